#pragma once

#include "fmf/model.hpp"
#include "fmf/synth.hpp"

namespace fmf {

// Abnormal is the positive class throughout.
struct ConfusionCounts {
    int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    int64_t total() const { return tp + fp + tn + fn; }
    void add(bool predicted_abnormal, bool truly_abnormal) {
        if (predicted_abnormal)
            (truly_abnormal ? tp : fp)++;
        else
            (truly_abnormal ? fn : tn)++;
    }
    ConfusionCounts& merge(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
};

struct ClassMetrics {
    double acc = 0, f1 = 0, fdr = 0, mdr = 0;
};

inline ClassMetrics classify_metrics(const ConfusionCounts& c, bool warn = true) {
    auto ratio = [&](double num, double den, const char* name) {
        if (den == 0) {
            if (warn) std::fprintf(stderr, "[fmf] warning: empty denominator for %s, reporting 0\n", name);
            return 0.0;
        }
        return num / den;
    };
    ClassMetrics m;
    m.acc = ratio(double(c.tp + c.tn), double(c.total()), "accuracy");
    m.f1 = ratio(double(2 * c.tp), double(2 * c.tp + c.fp + c.fn), "F1");
    m.fdr = ratio(double(c.fp), double(c.fp + c.tn), "FDR");
    m.mdr = ratio(double(c.fn), double(c.fn + c.tp), "MDR");
    return m;
}

// Dataset-level mean IoU: intersections and unions accumulate globally per
// class; a class absent from both prediction and truth over the whole
// dataset is excluded from the mean.
struct MiouAccumulator {
    int64_t inter[2] = {0, 0};
    int64_t uni[2] = {0, 0};

    void add(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth) {
        FMF_CHECK(pred.size() == truth.size(), "mask extents differ");
        for (size_t i = 0; i < pred.size(); ++i) {
            int p = pred[i] ? 1 : 0, t = truth[i] ? 1 : 0;
            for (int k = 0; k < 2; ++k) {
                bool in_p = (p == k), in_t = (t == k);
                inter[k] += (in_p && in_t) ? 1 : 0;
                uni[k] += (in_p || in_t) ? 1 : 0;
            }
        }
    }
    MiouAccumulator& merge(const MiouAccumulator& o) {
        for (int k = 0; k < 2; ++k) {
            inter[k] += o.inter[k];
            uni[k] += o.uni[k];
        }
        return *this;
    }
    double value() const {
        double sum = 0;
        int classes = 0;
        for (int k = 0; k < 2; ++k) {
            if (uni[k] == 0) continue;  // absent class: excluded
            sum += double(inter[k]) / double(uni[k]);
            ++classes;
        }
        return classes == 0 ? 0.0 : sum / classes;
    }
};

inline double miou(const std::vector<std::vector<uint8_t>>& preds,
                   const std::vector<std::vector<uint8_t>>& truths) {
    FMF_CHECK(preds.size() == truths.size(), "prediction/truth counts differ");
    MiouAccumulator acc;
    for (size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], truths[i]);
    return acc.value();
}

struct EvalRecord {
    ClassMetrics cls;
    double miou = 0;
    bool has_cls = false;
    bool has_miou = false;
    ConfusionCounts counts;
};

inline std::vector<uint8_t> dense_argmax(const Tensor<float>& logits, int64_t sample) {
    int64_t h = logits.shape()[1], w = logits.shape()[2], k = logits.shape()[3];
    std::vector<uint8_t> out(size_t(h * w), 0);
    const float* p = logits.data() + sample * h * w * k;
    for (int64_t i = 0; i < h * w; ++i) {
        int64_t best = 0;
        for (int64_t j = 1; j < k; ++j)
            if (p[i * k + j] > p[i * k + best]) best = j;
        out[size_t(i)] = uint8_t(best);
    }
    return out;
}

// Evaluates a model over a sample list (eval mode, running statistics).
// Sharded across workers; integer counts merge associatively so the result
// is independent of the worker count.
inline EvalRecord evaluate(Model<float>& model, const std::vector<SampleTriple>& samples) {
    int64_t n = int64_t(samples.size());
    FMF_CHECK(n >= 1, "empty evaluation set");
    std::vector<ConfusionCounts> counts{size_t(n)};
    std::vector<MiouAccumulator> ious{size_t(n)};
    bool want_cls = model.cfg.cls_active();
    bool want_dense = model.cfg.dense_active();
    parallel_for(n, [&](int64_t i) {
        const auto& sm = samples[size_t(i)];
        auto out = model.forward(model.cfg.uses_video() ? std::vector<Tensor<float>>{sm.video}
                                                        : std::vector<Tensor<float>>{},
                                 model.cfg.uses_current() ? std::vector<Tensor<float>>{sm.current}
                                                          : std::vector<Tensor<float>>{},
                                 ForwardMode::eval());
        if (want_cls) {
            bool pred = out.cls_probs[1] > out.cls_probs[0];
            counts[size_t(i)].add(pred, sm.label != 0);
        }
        if (want_dense) ious[size_t(i)].add(dense_argmax(out.dense_logits, 0), sm.mask);
    });
    EvalRecord rec;
    for (int64_t i = 0; i < n; ++i) rec.counts.merge(counts[size_t(i)]);
    if (want_cls) {
        rec.cls = classify_metrics(rec.counts);
        rec.has_cls = true;
    }
    if (want_dense) {
        MiouAccumulator total;
        for (auto& a : ious) total.merge(a);
        rec.miou = total.value();
        rec.has_miou = true;
    }
    return rec;
}

}  // namespace fmf
