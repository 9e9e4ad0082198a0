#pragma once

#include "fmf/tokenization.hpp"

namespace fmf {

enum class Modality { cross, visual, current };
enum class MhcaMode { bi, uni, off };

inline const char* to_string(Modality m) {
    switch (m) {
        case Modality::cross: return "cross";
        case Modality::visual: return "visual";
        default: return "current";
    }
}
inline const char* to_string(MhcaMode m) {
    switch (m) {
        case MhcaMode::bi: return "bi";
        case MhcaMode::uni: return "uni";
        default: return "off";
    }
}

// Multi-head scaled dot-product attention on already-projected q/k/v.
// Heads are even column slices; each head's row-softmax can be captured for
// normalization audits.
template <typename T>
Tensor<T> attention_heads(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int64_t heads,
                          std::vector<Tensor<T>>* audit = nullptr) {
    int64_t d = q.shape()[1];
    FMF_CHECK(k.shape()[1] == d && v.shape()[1] == d, "attention stream dims differ");
    FMF_CHECK(heads >= 1 && d % heads == 0,
              "token dim " << d << " is not divisible by head count " << heads);
    int64_t hd = d / heads;
    T sc = T(1) / T(std::sqrt(double(hd)));
    std::vector<Tensor<T>> outs;
    outs.reserve(size_t(heads));
    for (int64_t h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * hd, (h + 1) * hd);
        auto kh = slice_cols(k, h * hd, (h + 1) * hd);
        auto vh = slice_cols(v, h * hd, (h + 1) * hd);
        auto probs = softmax(matmul(qh, kh, false, true, sc), -1);
        if (audit) audit->push_back(probs);
        outs.push_back(matmul(probs, vh));
    }
    return heads == 1 ? outs[0] : concat_cols(outs);
}

// Layer-normalized q/k/v projections for one stream. Slots are allocated
// only for the directions the encoder actually uses.
template <typename T>
struct QkvMaps {
    LayerNormP<T> ln;
    Linear<T> wq, wk, wv;
    bool has_q = false, has_kv = false;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t d, Rng& rng, bool need_q,
              bool need_kv) {
        has_q = need_q;
        has_kv = need_kv;
        ln.init(reg, name + ".ln", d);
        if (need_q) wq.init(reg, name + ".wq", d, d, rng);
        if (need_kv) {
            wk.init(reg, name + ".wk", d, d, rng);
            wv.init(reg, name + ".wv", d, d, rng);
        }
    }
};

template <typename T>
struct SelfAttentionBlock {
    QkvMaps<T> qkv;
    Linear<T> proj;
    Mlp<T> mlp;
    int64_t heads = 1;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t d, int64_t mlp_dim, int64_t h,
              Rng& rng) {
        heads = h;
        qkv.init(reg, name + ".qkv", d, rng, true, true);
        proj.init(reg, name + ".proj", d, d, rng);
        mlp.init(reg, name + ".mlp", d, mlp_dim, d, rng);
    }

    Tensor<T> forward(const Tensor<T>& z, std::vector<Tensor<T>>* audit = nullptr) const {
        auto n = qkv.ln.forward(z);
        auto att = attention_heads(qkv.wq.forward(n), qkv.wk.forward(n), qkv.wv.forward(n), heads,
                                   audit);
        auto a = add(proj.forward(att), z);
        return add(mlp.forward(a), a);
    }
};

// Bidirectional cross-attention. The two directions share the six per-stream
// projection maps (queries of one stream against keys/values of the other)
// and have their own output projection and MLP.
template <typename T>
struct CrossAttentionBlock {
    QkvMaps<T> qkv_v, qkv_c;
    Linear<T> proj_cv, proj_vc;
    Mlp<T> mlp_cv, mlp_vc;
    int64_t heads = 1;
    bool bidirectional = true;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t d, int64_t mlp_dim, int64_t h,
              Rng& rng, bool bi) {
        heads = h;
        bidirectional = bi;
        qkv_v.init(reg, name + ".v", d, rng, true, bi);
        qkv_c.init(reg, name + ".c", d, rng, bi, true);
        proj_cv.init(reg, name + ".proj_cv", d, d, rng);
        mlp_cv.init(reg, name + ".mlp_cv", d, mlp_dim, d, rng);
        if (bi) {
            proj_vc.init(reg, name + ".proj_vc", d, d, rng);
            mlp_vc.init(reg, name + ".mlp_vc", d, mlp_dim, d, rng);
        }
    }

    // current-to-visual only; query stream is updated
    Tensor<T> forward_uni(const Tensor<T>& zq, const Tensor<T>& zkv,
                          std::vector<Tensor<T>>* audit = nullptr) const {
        auto nq = qkv_v.ln.forward(zq);
        auto nkv = qkv_c.ln.forward(zkv);
        auto att = attention_heads(qkv_v.wq.forward(nq), qkv_c.wk.forward(nkv),
                                   qkv_c.wv.forward(nkv), heads, audit);
        auto a = add(proj_cv.forward(att), zq);
        return add(mlp_cv.forward(a), a);
    }

    std::pair<Tensor<T>, Tensor<T>> forward_bi(const Tensor<T>& zv, const Tensor<T>& zc,
                                               std::vector<Tensor<T>>* audit = nullptr) const {
        FMF_CHECK(bidirectional, "cross block built unidirectional");
        FMF_CHECK(zv.shape()[1] == zc.shape()[1], "stream token dims differ");
        auto nv = qkv_v.ln.forward(zv);
        auto nc = qkv_c.ln.forward(zc);
        auto qv = qkv_v.wq.forward(nv);
        auto kv = qkv_v.wk.forward(nv);
        auto vv = qkv_v.wv.forward(nv);
        auto qc = qkv_c.wq.forward(nc);
        auto kc = qkv_c.wk.forward(nc);
        auto vc = qkv_c.wv.forward(nc);

        auto att_cv = attention_heads(qv, kc, vc, heads, audit);
        auto a_cv = add(proj_cv.forward(att_cv), zv);
        auto z_cv = add(mlp_cv.forward(a_cv), a_cv);

        auto att_vc = attention_heads(qc, kv, vv, heads, audit);
        auto a_vc = add(proj_vc.forward(att_vc), zc);
        auto z_vc = add(mlp_vc.forward(a_vc), a_vc);
        return {z_cv, z_vc};
    }
};

struct EncoderConfig {
    int64_t dim = 0;
    int64_t mlp_dim = 0;
    int64_t heads_sa = 3;
    int64_t heads_ca = 3;
    int64_t layers = 0;
    Modality modality = Modality::cross;
    MhcaMode mhca = MhcaMode::bi;

    bool uses_video() const { return modality != Modality::current; }
    bool uses_current() const { return modality != Modality::visual; }
    bool has_cross_block() const { return mhca != MhcaMode::off; }
};

template <typename T>
struct EncoderLayer {
    SelfAttentionBlock<T> sa_v, sa_c;
    CrossAttentionBlock<T> ca;
};

// Alternating stack: per layer, self-attention on each active stream, then
// the cross block. In unimodal configurations the cross block degenerates to
// a second self-attention on the single stream (queries and keys/values both
// come from it), keeping the layer structure intact.
template <typename T>
struct EncoderStack {
    EncoderConfig cfg;
    std::vector<EncoderLayer<T>> layers;

    void init(ParamRegistry<T>& reg, const std::string& name, const EncoderConfig& c, Rng& rng) {
        FMF_CHECK(c.dim % c.heads_sa == 0 && c.dim % c.heads_ca == 0,
                  "token dim " << c.dim << " must be divisible by head counts");
        cfg = c;
        layers.resize(size_t(c.layers));
        for (int64_t l = 0; l < c.layers; ++l) {
            std::string base = name + ".l" + std::to_string(l);
            auto& layer = layers[size_t(l)];
            if (c.uses_video())
                layer.sa_v.init(reg, base + ".sa_v", c.dim, c.mlp_dim, c.heads_sa, rng);
            if (c.uses_current())
                layer.sa_c.init(reg, base + ".sa_c", c.dim, c.mlp_dim, c.heads_sa, rng);
            if (c.has_cross_block()) {
                bool bi = c.modality == Modality::cross && c.mhca == MhcaMode::bi;
                layer.ca.init(reg, base + ".ca", c.dim, c.mlp_dim, c.heads_ca, rng, bi);
            }
        }
    }

    // Returns the encoded streams (current-to-visual, visual-to-current).
    // Unused streams come back undefined.
    std::pair<Tensor<T>, Tensor<T>> forward(Tensor<T> zv, Tensor<T> zc,
                                            std::vector<Tensor<T>>* audit = nullptr) const {
        for (const auto& layer : layers) {
            if (cfg.uses_video()) zv = layer.sa_v.forward(zv, audit);
            if (cfg.uses_current()) zc = layer.sa_c.forward(zc, audit);
            if (!cfg.has_cross_block()) continue;
            switch (cfg.modality) {
                case Modality::cross:
                    if (cfg.mhca == MhcaMode::bi) {
                        auto [a, b] = layer.ca.forward_bi(zv, zc, audit);
                        zv = a;
                        zc = b;
                    } else {
                        zv = layer.ca.forward_uni(zv, zc, audit);
                    }
                    break;
                case Modality::visual:
                    zv = layer.ca.forward_uni(zv, zv, audit);
                    break;
                case Modality::current:
                    zc = layer.ca.forward_uni(zc, zc, audit);
                    break;
            }
        }
        return {zv, zc};
    }
};

}  // namespace fmf
