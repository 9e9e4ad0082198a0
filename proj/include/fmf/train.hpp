#pragma once

#include "fmf/metrics.hpp"

namespace fmf {

// Step decay: the initial rate for the first `drop_epoch` epochs, the
// decayed rate afterwards. Defaults: 5e-4 dropping to 5e-5 after epoch 20.
template <typename T>
T lr_schedule(int64_t epoch, T initial = T(5e-4), T decayed = T(5e-5), int64_t drop_epoch = 20) {
    FMF_CHECK(epoch >= 1, "epochs are 1-based");
    return epoch <= drop_epoch ? initial : decayed;
}

// Aggregation G(y; tau): abnormal iff the anomaly pixel count exceeds tau.
// With the default tau = 0.5 any nonzero mask is abnormal.
inline int aggregate_label(const std::vector<uint8_t>& mask, double tau = 0.5) {
    int64_t count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    return double(count) > tau ? 1 : 0;
}

template <typename T>
Tensor<T> one_hot_row(int label, int64_t k = 2) {
    Tensor<T> t(Shape{1, k});
    t[label] = T(1);
    return t;
}

// Decoupled-weight-decay Adam. Decay is applied multiplicatively before the
// bias-corrected adaptive update; rank-1 parameters (norm gains, biases) are
// excluded from decay via the registry's flag.
template <typename T>
struct AdamW {
    T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8), weight_decay = T(0.01);
    int64_t t = 0;
    std::vector<AVec<T>> m, v;

    void init(const ParamRegistry<T>& reg) {
        t = 0;
        m.clear();
        v.clear();
        for (const auto& p : reg.params()) {
            m.emplace_back(size_t(p.tensor.size()), T(0));
            v.emplace_back(size_t(p.tensor.size()), T(0));
        }
    }

    void step(ParamRegistry<T>& reg, T lr) {
        FMF_CHECK(m.size() == reg.params().size(), "optimizer not initialized for this model");
        ++t;
        T bc1 = T(1) - std::pow(beta1, T(t));
        T bc2 = T(1) - std::pow(beta2, T(t));
        for (size_t i = 0; i < reg.params().size(); ++i) {
            auto& p = reg.params()[i];
            T* w = p.tensor.data();
            int64_t n = p.tensor.size();
            const T* g = p.tensor.grad().empty() ? nullptr : p.tensor.grad().data();
            if (g)
                for (int64_t j = 0; j < n; ++j)
                    FMF_CHECK(std::isfinite(double(g[j])),
                              "non-finite gradient in " << p.name << "; aborting step " << t);
            T decay = (p.decay && weight_decay > T(0)) ? (T(1) - lr * weight_decay) : T(1);
            T* mi = m[i].data();
            T* vi = v[i].data();
            for (int64_t j = 0; j < n; ++j) {
                T gj = g ? g[j] : T(0);
                if (decay != T(1)) w[j] *= decay;
                mi[j] = beta1 * mi[j] + (T(1) - beta1) * gj;
                vi[j] = beta2 * vi[j] + (T(1) - beta2) * gj * gj;
                w[j] -= lr * (mi[j] / bc1) / (std::sqrt(vi[j] / bc2) + eps);
            }
        }
    }

    std::vector<CheckpointRecord> records(const ParamRegistry<T>& reg) const {
        std::vector<CheckpointRecord> recs;
        for (size_t i = 0; i < reg.params().size(); ++i) {
            const auto& p = reg.params()[i];
            CheckpointRecord rm{"opt.m." + p.name, p.tensor.shape(), {}};
            rm.data.assign(m[i].begin(), m[i].end());
            recs.push_back(std::move(rm));
            CheckpointRecord rv{"opt.v." + p.name, p.tensor.shape(), {}};
            rv.data.assign(v[i].begin(), v[i].end());
            recs.push_back(std::move(rv));
        }
        recs.push_back(CheckpointRecord{"opt.t", Shape{1}, {float(t)}});
        return recs;
    }

    void restore(const ParamRegistry<T>& reg, const std::vector<CheckpointRecord>& recs) {
        init(reg);
        size_t found = 0;
        for (const auto& r : recs) {
            if (r.name == "opt.t") {
                t = int64_t(r.data.at(0));
                ++found;
                continue;
            }
            for (size_t i = 0; i < reg.params().size(); ++i) {
                const auto& p = reg.params()[i];
                if (r.name == "opt.m." + p.name) {
                    FMF_CHECK(int64_t(r.data.size()) == p.tensor.size(), "moment size mismatch");
                    m[i].assign(r.data.begin(), r.data.end());
                    ++found;
                } else if (r.name == "opt.v." + p.name) {
                    FMF_CHECK(int64_t(r.data.size()) == p.tensor.size(), "moment size mismatch");
                    v[i].assign(r.data.begin(), r.data.end());
                    ++found;
                }
            }
        }
        FMF_CHECK(found >= 2 * reg.params().size(), "optimizer state incomplete in checkpoint");
    }
};

struct TrainOptions {
    int64_t epochs = 30;
    int64_t batch = 16;
    double lr = 5e-4;
    double lr_decayed = 5e-5;
    int64_t lr_drop_epoch = 20;
    double alpha = 1.0;  // balance of the classification term
    uint64_t seed = 0;
    double stop_acc = 0.0;   // early stop when both thresholds are reached (0 = off)
    double stop_miou = 0.0;
    std::string csv_path;   // per-epoch metrics log
    std::string ckpt_path;  // checkpoint written at every epoch end
    int64_t start_epoch = 1;
    bool quiet = true;
};

struct EpochStats {
    int64_t epoch = 0;
    double lr = 0, loss_pix = 0, loss_cls = 0, loss_total = 0;
    double acc = 0, f1 = 0, fdr = 0, mdr = 0, miou = 0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    bool diverged = false;
    int64_t epochs_run = 0;
};

inline void write_metrics_csv(const std::string& path, const std::vector<EpochStats>& rows) {
    detail_io::File f(path, "wb");
    std::string head = "epoch,lr,loss_pix,loss_cls,loss_total,acc,f1,fdr,mdr,miou\n";
    detail_io::write_bytes(f.f, head.data(), head.size());
    char buf[256];
    for (const auto& r : rows) {
        int n = std::snprintf(buf, sizeof buf, "%lld,%.6g,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                              (long long)r.epoch, r.lr, r.loss_pix, r.loss_cls, r.loss_total, r.acc,
                              r.f1, r.fdr, r.mdr, r.miou);
        detail_io::write_bytes(f.f, buf, size_t(n));
    }
}

// Deterministic training loop: per-epoch shuffles derive from (seed, epoch),
// so a resumed run replays the identical batch order. Metrics are the
// running train-split statistics of the epoch. On divergence (non-finite
// loss) the loop aborts; the last epoch checkpoint is the last good state.
inline TrainResult train(Model<float>& model, AdamW<float>& opt,
                         const std::vector<SampleTriple>& data, const TrainOptions& o) {
    FMF_CHECK(!data.empty(), "empty training set");
    bool dense_on = model.cfg.dense_active();
    bool cls_on = model.cfg.cls_active();
    FMF_CHECK(dense_on || cls_on, "no active head to train");
    int64_t n = int64_t(data.size());
    int64_t hh = data[0].video.defined() ? data[0].video.shape()[1] : 0;
    int64_t ww = data[0].video.defined() ? data[0].video.shape()[2] : 0;

    TrainResult result;
    for (int64_t epoch = o.start_epoch; epoch <= o.epochs; ++epoch) {
        double lr = lr_schedule<double>(epoch, o.lr, o.lr_decayed, o.lr_drop_epoch);
        std::vector<int64_t> order(size_t(n), 0);
        for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
        Rng shuffle_rng(seed_stream(o.seed, uint64_t(epoch)));
        shuffle_rng.shuffle(order.begin(), order.end());

        EpochStats st;
        st.epoch = epoch;
        st.lr = lr;
        ConfusionCounts counts;
        MiouAccumulator iou;
        double sum_pix = 0, sum_cls = 0;
        int64_t seen = 0;

        for (int64_t at = 0; at < n; at += o.batch) {
            int64_t bs = std::min<int64_t>(o.batch, n - at);
            std::vector<Tensor<float>> videos, currents;
            Tensor<float> pix_target;
            Tensor<float> cls_target({bs, 2});
            if (dense_on) pix_target = Tensor<float>({bs, hh, ww, 2});
            for (int64_t b = 0; b < bs; ++b) {
                const auto& sm = data[size_t(order[size_t(at + b)])];
                if (model.cfg.uses_video()) videos.push_back(sm.video);
                if (model.cfg.uses_current()) currents.push_back(sm.current);
                int label = aggregate_label(sm.mask);
                cls_target[b * 2 + label] = 1.0f;
                if (dense_on) {
                    float* tp = pix_target.data() + b * hh * ww * 2;
                    for (int64_t i = 0; i < hh * ww; ++i) tp[i * 2 + (sm.mask[size_t(i)] ? 1 : 0)] = 1.0f;
                }
            }

            Tape<float> tape;
            ModelOutput<float> out;
            Tensor<float> total;
            float pix_val = 0, cls_val = 0;
            {
                TapeScope<float> scope(tape);
                out = model.forward(videos, currents, ForwardMode::train());
                if (dense_on) {
                    auto lp = cross_entropy_pixels(out.dense_logits, pix_target);
                    pix_val = lp[0];
                    total = lp;
                }
                if (cls_on) {
                    auto lc = nll_from_probs(out.cls_probs, cls_target);
                    cls_val = lc[0];
                    auto scaled = o.alpha == 1.0 ? lc : scale(lc, float(o.alpha));
                    total = total.defined() ? add(total, scaled) : scaled;
                }
                if (!std::isfinite(double(total[0]))) {
                    result.diverged = true;
                    break;
                }
                model.reg.zero_grad();
                tape.backward(total);
            }
            opt.step(model.reg, float(lr));
            model.step = opt.t;

            sum_pix += double(pix_val) * double(bs);
            sum_cls += double(cls_val) * double(bs);
            seen += bs;
            for (int64_t b = 0; b < bs; ++b) {
                const auto& sm = data[size_t(order[size_t(at + b)])];
                if (cls_on) {
                    bool pred = out.cls_probs[b * 2 + 1] > out.cls_probs[b * 2 + 0];
                    counts.add(pred, aggregate_label(sm.mask) == 1);
                }
                if (dense_on) iou.add(dense_argmax(out.dense_logits, b), sm.mask);
            }
        }
        if (result.diverged) break;

        st.loss_pix = seen ? sum_pix / double(seen) : 0;
        st.loss_cls = seen ? sum_cls / double(seen) : 0;
        st.loss_total = st.loss_pix + o.alpha * st.loss_cls;
        if (cls_on) {
            auto m = classify_metrics(counts, /*warn=*/false);
            st.acc = m.acc;
            st.f1 = m.f1;
            st.fdr = m.fdr;
            st.mdr = m.mdr;
        }
        if (dense_on) st.miou = iou.value();
        result.history.push_back(st);
        result.epochs_run = epoch;
        if (!o.quiet)
            std::fprintf(stderr, "[fmf] epoch %lld lr %.2g loss %.4f acc %.4f miou %.4f\n",
                         (long long)epoch, lr, st.loss_total, st.acc, st.miou);
        if (!o.csv_path.empty()) write_metrics_csv(o.csv_path, result.history);
        if (!o.ckpt_path.empty()) {
            auto extra = opt.records(model.reg);
            extra.push_back(CheckpointRecord{"train.epochs_done", Shape{1}, {float(epoch)}});
            model.save(o.ckpt_path, extra);
        }
        bool acc_ok = o.stop_acc <= 0 || (cls_on && st.acc >= o.stop_acc);
        bool miou_ok = o.stop_miou <= 0 || (dense_on && st.miou >= o.stop_miou);
        if ((o.stop_acc > 0 || o.stop_miou > 0) && acc_ok && miou_ok) break;
    }
    return result;
}

}  // namespace fmf
