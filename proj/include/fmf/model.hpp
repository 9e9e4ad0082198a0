#pragma once

#include "fmf/decoder.hpp"
#include "fmf/persist.hpp"

namespace fmf {

enum class HeadsMode { both, cls, dense };

inline const char* to_string(HeadsMode h) {
    switch (h) {
        case HeadsMode::both: return "both";
        case HeadsMode::cls: return "cls";
        default: return "dense";
    }
}

// Full model configuration: capacity preset, patch geometry, desk-scale
// input geometry, and the ablation switches.
struct ModelConfig {
    std::string preset = "base";
    int64_t dim = 96, mlp_dim = 384, heads = 3, layers = 6;
    int64_t t_v = 2, h_v = 8, w_v = 8, dilation = 2;
    int64_t classes = 2;
    int64_t T_v = 8, H = 64, W = 64, T_c = 64;

    Modality modality = Modality::cross;
    bool dilated = true;
    MhcaMode mhca = MhcaMode::bi;
    bool lf = true;
    HeadsMode heads_mode = HeadsMode::both;

    static ModelConfig from_preset(const std::string& name) {
        ModelConfig c;
        c.preset = name;
        if (name == "tiny") {
            c.dim = 36;
            c.mlp_dim = 144;
            c.layers = 6;
        } else if (name == "small") {
            c.dim = 48;
            c.mlp_dim = 192;
            c.layers = 6;
        } else if (name == "base") {
            c.dim = 96;
            c.mlp_dim = 384;
            c.layers = 6;
        } else if (name == "large") {
            c.dim = 96;
            c.mlp_dim = 384;
            c.layers = 12;
        } else {
            FMF_CHECK(false, "unknown preset '" << name << "' (tiny|small|base|large)");
        }
        return c;
    }

    bool uses_video() const { return modality != Modality::current; }
    bool uses_current() const { return modality != Modality::visual; }
    bool dense_active() const { return heads_mode != HeadsMode::cls && uses_video(); }
    bool cls_active() const { return heads_mode != HeadsMode::dense; }
    // the visual-to-current class token joins the fusion only in the full
    // bidirectional cross setting (or with independent streams under LF)
    bool cls_uses_vc() const {
        return modality == Modality::cross && lf && mhca != MhcaMode::uni && cls_active();
    }

    KvList to_kv() const {
        KvList kv;
        auto put = [&](const std::string& k, int64_t v) { kv.emplace_back(k, std::to_string(v)); };
        kv.emplace_back("preset", preset);
        put("dim", dim);
        put("mlp_dim", mlp_dim);
        put("heads", heads);
        put("layers", layers);
        put("t_v", t_v);
        put("h_v", h_v);
        put("w_v", w_v);
        put("dilation", dilation);
        put("classes", classes);
        put("T_v", T_v);
        put("H", H);
        put("W", W);
        put("T_c", T_c);
        kv.emplace_back("modality", to_string(modality));
        kv.emplace_back("dilated", dilated ? "on" : "off");
        kv.emplace_back("mhca", to_string(mhca));
        kv.emplace_back("lf", lf ? "on" : "off");
        kv.emplace_back("heads_mode", to_string(heads_mode));
        return kv;
    }

    static ModelConfig from_kv(const KvList& kv) {
        ModelConfig c;
        auto geti = [&](const char* k, int64_t& dst) {
            if (const std::string* v = kv_find(kv, k)) dst = std::stoll(*v);
        };
        if (const std::string* v = kv_find(kv, "preset")) c.preset = *v;
        geti("dim", c.dim);
        geti("mlp_dim", c.mlp_dim);
        geti("heads", c.heads);
        geti("layers", c.layers);
        geti("t_v", c.t_v);
        geti("h_v", c.h_v);
        geti("w_v", c.w_v);
        geti("dilation", c.dilation);
        geti("classes", c.classes);
        geti("T_v", c.T_v);
        geti("H", c.H);
        geti("W", c.W);
        geti("T_c", c.T_c);
        if (const std::string* v = kv_find(kv, "modality"))
            c.modality = *v == "visual" ? Modality::visual
                                        : (*v == "current" ? Modality::current : Modality::cross);
        if (const std::string* v = kv_find(kv, "dilated")) c.dilated = (*v == "on");
        if (const std::string* v = kv_find(kv, "mhca"))
            c.mhca = *v == "uni" ? MhcaMode::uni : (*v == "off" ? MhcaMode::off : MhcaMode::bi);
        if (const std::string* v = kv_find(kv, "lf")) c.lf = (*v == "on");
        if (const std::string* v = kv_find(kv, "heads_mode"))
            c.heads_mode = *v == "cls" ? HeadsMode::cls
                                       : (*v == "dense" ? HeadsMode::dense : HeadsMode::both);
        return c;
    }
};

template <typename T>
struct ModelOutput {
    Tensor<T> dense_logits;  // [B, H, W, K] when the dense head is active
    Tensor<T> cls_logits;    // [B, K] when the classification head is active
    Tensor<T> cls_probs;     // softmax of cls_logits
    bool dense_resized = false;
};

template <typename T>
class Model {
public:
    ModelConfig cfg;
    ParamRegistry<T> reg;
    VideoTokenizer<T> tok_v;
    CurrentTokenizer<T> tok_c;
    EncoderStack<T> enc;
    DenseHead<T> dense;
    ClassHead<T> cls;
    int64_t step = 0;  // optimizer steps taken

    void build(const ModelConfig& c, uint64_t seed) {
        cfg = c;
        FMF_CHECK(c.dim % c.heads == 0, "token dim " << c.dim << " not divisible by " << c.heads
                                                     << " heads");
        Rng rng(seed_stream(seed, /*tag=*/0xF0F0));
        if (c.uses_video()) {
            PatchGeometry g = compute_grid(c.T_v, c.H, c.W, c.t_v, c.h_v, c.w_v, c.dilation, c.dilated);
            tok_v.init(reg, "tok.video", g, c.dilated, c.dim, rng);
        }
        if (c.uses_current()) tok_c.init(reg, "tok.current", c.T_c, c.dim, rng);

        EncoderConfig ec;
        ec.dim = c.dim;
        ec.mlp_dim = c.mlp_dim;
        ec.heads_sa = c.heads;
        ec.heads_ca = c.heads;
        ec.layers = c.layers;
        ec.modality = c.modality;
        ec.mhca = c.mhca;
        enc.init(reg, "enc", ec, rng);

        if (c.dense_active())
            dense.init(reg, "dense", c.dim, tok_v.geom.n_t, c.h_v, c.classes, c.dilated, rng);
        if (c.cls_active()) cls.init(reg, "cls", c.dim, c.classes, c.cls_uses_vc(), rng);
    }

    int64_t parameter_count() const { return reg.count(); }

    // Batched forward. Samples must share geometry within one call; geometry
    // may differ from the build geometry (positional embeddings are
    // interpolated by the tokenizers).
    ModelOutput<T> forward(const std::vector<Tensor<T>>& videos,
                           const std::vector<Tensor<T>>& currents, const ForwardMode& mode,
                           std::vector<Tensor<T>>* audit = nullptr) {
        size_t batch = cfg.uses_video() ? videos.size() : currents.size();
        FMF_CHECK(batch >= 1, "empty batch");
        FMF_CHECK(!cfg.uses_video() || videos.size() == batch, "video inputs missing");
        FMF_CHECK(!cfg.uses_current() || currents.size() == batch,
                  "current inputs missing while the configuration demands the modality");

        std::vector<Tensor<T>> blended;
        std::vector<Tensor<T>> cls_logits_rows;
        for (size_t b = 0; b < batch; ++b) {
            TokenMatrix<T> zv, zc;
            if (cfg.uses_video()) zv = tok_v.forward(videos[b]);
            if (cfg.uses_current()) zc = tok_c.forward(currents[b]);
            auto [ov, oc] = enc.forward(zv.values, zc.values, audit);

            if (cfg.dense_active()) {
                auto [img_d, img_s] = dense.reassemble(ov, zv.layout);
                blended.push_back(cfg.dilated ? dense.blend(img_d, img_s, mode) : img_s);
            }
            if (cfg.cls_active()) {
                Tensor<T> main_cls = cfg.uses_video() ? slice0(ov, 0, 1) : slice0(oc, 0, 1);
                Tensor<T> other_cls;
                if (cfg.cls_uses_vc()) other_cls = slice0(oc, 0, 1);
                auto [logits, probs] = cls.forward(main_cls, other_cls);
                cls_logits_rows.push_back(logits);
            }
        }

        ModelOutput<T> out;
        if (cfg.dense_active()) {
            int64_t H = videos[0].shape()[1], W = videos[0].shape()[2];
            auto stacked = blended.size() == 1
                               ? blended[0]
                               : concat0(blended);  // each is [1, n_h, n_w, D]
            out.dense_logits = dense.predict(stacked, H, W, mode, &out.dense_resized);
        }
        if (cfg.cls_active()) {
            out.cls_logits = cls_logits_rows.size() == 1 ? cls_logits_rows[0]
                                                         : concat0(cls_logits_rows);
            out.cls_probs = softmax(out.cls_logits, -1);
        }
        return out;
    }

    // --- persistence ------------------------------------------------------

    std::vector<CheckpointRecord> snapshot() const {
        std::vector<CheckpointRecord> recs;
        for (const auto& p : reg.params()) {
            CheckpointRecord r;
            r.name = p.name;
            r.shape = p.tensor.shape();
            r.data.resize(size_t(p.tensor.size()));
            for (int64_t i = 0; i < p.tensor.size(); ++i) r.data[size_t(i)] = float(p.tensor[i]);
            recs.push_back(std::move(r));
        }
        for (const auto& b : reg.buffers()) {
            CheckpointRecord r;
            r.name = b.name;
            r.shape = Shape{int64_t(b.data->size())};
            r.data.resize(b.data->size());
            for (size_t i = 0; i < b.data->size(); ++i) r.data[i] = float((*b.data)[i]);
            recs.push_back(std::move(r));
        }
        return recs;
    }

    void restore(const std::vector<CheckpointRecord>& recs) {
        size_t used = 0;
        for (const auto& r : recs) {
            if (auto* p = const_cast<Param<T>*>(reg.find(r.name))) {
                FMF_CHECK(p->tensor.shape() == r.shape,
                          "checkpoint shape mismatch for " << r.name);
                for (int64_t i = 0; i < p->tensor.size(); ++i) p->tensor[i] = T(r.data[size_t(i)]);
                ++used;
                continue;
            }
            for (auto& b : reg.buffers())
                if (b.name == r.name) {
                    FMF_CHECK(b.data->size() == r.data.size(),
                              "checkpoint buffer size mismatch for " << r.name);
                    for (size_t i = 0; i < r.data.size(); ++i) (*b.data)[i] = T(r.data[i]);
                    ++used;
                }
        }
        FMF_CHECK(used >= reg.params().size(),
                  "checkpoint is missing parameters (restored " << used << ")");
    }

    void save(const std::string& path, const std::vector<CheckpointRecord>& extra = {}) const {
        KvList kv = cfg.to_kv();
        kv.emplace_back("step", std::to_string(step));
        auto recs = snapshot();
        recs.insert(recs.end(), extra.begin(), extra.end());
        write_checkpoint(path, kv, recs);
    }

    // Rebuilds the model from a checkpoint; extra (non-model) records are
    // returned for the caller (optimizer state).
    static Model load(const std::string& path, std::vector<CheckpointRecord>* extra = nullptr) {
        KvList kv;
        std::vector<CheckpointRecord> recs;
        read_checkpoint(path, kv, recs);
        Model m;
        m.build(ModelConfig::from_kv(kv), /*seed=*/0);
        m.restore(recs);
        if (const std::string* v = kv_find(kv, "step")) m.step = std::stoll(*v);
        if (extra) {
            extra->clear();
            for (auto& r : recs)
                if (!m.reg.find(r.name)) {
                    bool is_buffer = false;
                    for (const auto& b : m.reg.buffers())
                        if (b.name == r.name) is_buffer = true;
                    if (!is_buffer) extra->push_back(std::move(r));
                }
        }
        return m;
    }
};

}  // namespace fmf
