#pragma once

#include "fmf/encoder.hpp"

namespace fmf {

// Inverts the (t, h, w) token emission order into an image-like feature,
// folding the temporal axis into channels: out[0,h,w,t*D+e] =
// tokens[(t*n_h + h)*n_w + w, e]. Output is [1, n_h, n_w, n_t*D].
template <typename T>
Tensor<T> tokens_to_image(const Tensor<T>& tokens, int64_t n_t, int64_t n_h, int64_t n_w) {
    FMF_CHECK(tokens.rank() == 2, "tokens_to_image expects a matrix");
    int64_t d = tokens.shape()[1];
    FMF_CHECK(tokens.shape()[0] == n_t * n_h * n_w,
              "token count " << tokens.shape()[0] << " != " << n_t << "*" << n_h << "*" << n_w);
    Tensor<T> y(Shape{1, n_h, n_w, n_t * d});
    for (int64_t t = 0; t < n_t; ++t)
        for (int64_t h = 0; h < n_h; ++h)
            for (int64_t w = 0; w < n_w; ++w)
                std::copy(tokens.data() + ((t * n_h + h) * n_w + w) * d,
                          tokens.data() + ((t * n_h + h) * n_w + w + 1) * d,
                          y.data() + ((h * n_w + w) * n_t + t) * d);
    auto tn = tokens.node(), yn = y.node();
    detail::record("tokens_to_image", {tokens}, y, [tn, yn, n_t, n_h, n_w, d]() {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (int64_t t = 0; t < n_t; ++t)
            for (int64_t h = 0; h < n_h; ++h)
                for (int64_t w = 0; w < n_w; ++w) {
                    const T* src = yn->grad.data() + ((h * n_w + w) * n_t + t) * d;
                    T* dst = tn->grad.data() + ((t * n_h + h) * n_w + w) * d;
                    for (int64_t e = 0; e < d; ++e) dst[e] += src[e];
                }
    });
    return y;
}

// Dense prediction head: reassembles the regular current-to-visual tokens of
// both scales into image-like features, blends the dilated scale into the
// standard one, and upsamples to the clip resolution through stacks of
// [deconv 2x2 -> conv 3x3 -> BN -> ReLU] with channels [128, 64, 32, ...],
// then a 1x1 projection to the K logits.
template <typename T>
struct DenseHead {
    bool dilated = true;
    int64_t dim = 0, classes = 2, stages = 3;
    Conv<T> squeeze_d, squeeze_s;  // 1x1, (n_t*D) -> D
    Deconv2x2<T> blend_up;         // D -> D
    ConvBnRelu<T> blend_conv;      // D -> D
    std::vector<Deconv2x2<T>> up;
    std::vector<ConvBnRelu<T>> conv;
    Conv<T> out_proj;  // 1x1 -> K

    static int64_t stage_count(int64_t h_v) {
        int64_t s = 0;
        while ((int64_t(1) << (s + 1)) <= h_v) ++s;
        return s;
    }
    static int64_t stage_channels(int64_t i) { return std::max<int64_t>(128 >> i, 4); }

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t D, int64_t n_t, int64_t h_v,
              int64_t K, bool dilated_on, Rng& rng) {
        dilated = dilated_on;
        dim = D;
        classes = K;
        stages = stage_count(h_v);
        FMF_CHECK(stages >= 1, "patch height too small for an upsampling stack");
        if (dilated) {
            squeeze_d.init(reg, name + ".squeeze_d", 1, n_t * D, D, rng);
            blend_up.init(reg, name + ".blend_up", D, D, rng);
            blend_conv.init(reg, name + ".blend_conv", D, D, rng);
        }
        squeeze_s.init(reg, name + ".squeeze_s", 1, n_t * D, D, rng);
        up.resize(size_t(stages));
        conv.resize(size_t(stages));
        int64_t cin = D;
        for (int64_t i = 0; i < stages; ++i) {
            int64_t cout = stage_channels(i);
            up[size_t(i)].init(reg, name + ".up" + std::to_string(i), cin, cout, rng);
            conv[size_t(i)].init(reg, name + ".conv" + std::to_string(i), cout, cout, rng);
            cin = cout;
        }
        out_proj.init(reg, name + ".out", 1, cin, K, rng);
    }

    // Regular tokens of one sample -> (dilated feature, standard feature).
    std::pair<Tensor<T>, Tensor<T>> reassemble(const Tensor<T>& tokens,
                                               const TokenLayout& layout) const {
        FMF_CHECK(layout.rows() == tokens.shape()[0], "token layout does not match matrix rows");
        FMF_CHECK(layout.n_t >= 1 && layout.n_h >= 1 && layout.n_w >= 1,
                  "layout lacks video grid metadata");
        Tensor<T> img_d;
        if (dilated) {
            FMF_CHECK(layout.dilated == layout.n_t * layout.n_h_d * layout.n_w_d,
                      "dilated segment size inconsistent with grid");
            auto seg = slice0(tokens, layout.dilated_begin(), layout.dilated_begin() + layout.dilated);
            img_d = squeeze_d.forward(tokens_to_image(seg, layout.n_t, layout.n_h_d, layout.n_w_d));
        }
        auto seg_s = slice0(tokens, layout.standard_begin(), layout.standard_begin() + layout.standard);
        auto img_s = squeeze_s.forward(tokens_to_image(seg_s, layout.n_t, layout.n_h, layout.n_w));
        return {img_d, img_s};
    }

    // Upsamples the dilated-scale feature and adds it to the standard-scale
    // one. A bilinear alignment resize is inserted when doubling the dilated
    // grid does not land exactly on the standard grid.
    Tensor<T> blend(const Tensor<T>& img_d, const Tensor<T>& img_s, const ForwardMode& mode) {
        FMF_CHECK(dilated, "blend called on a single-scale head");
        int64_t h = img_s.shape()[1], w = img_s.shape()[2];
        auto x = blend_up.forward(img_d);
        if (x.shape()[1] != h || x.shape()[2] != w) x = bilinear_resize(x, h, w);
        return add(img_s, blend_conv.forward(x, mode));
    }

    // Batched upsampling from [B, n_h, n_w, D] to [B, H, W, K] logits. When
    // the stack's power-of-two growth cannot land on (H, W) exactly, a final
    // bilinear resize is applied (and reported through `resized`).
    Tensor<T> predict(const Tensor<T>& blended, int64_t H, int64_t W, const ForwardMode& mode,
                      bool* resized = nullptr) {
        Tensor<T> x = blended;
        for (int64_t i = 0; i < stages; ++i)
            x = conv[size_t(i)].forward(up[size_t(i)].forward(x), mode);
        auto logits = out_proj.forward(x);
        if (resized) *resized = false;
        if (logits.shape()[1] != H || logits.shape()[2] != W) {
            logits = bilinear_resize(logits, H, W);
            if (resized) *resized = true;
        }
        return logits;
    }
};

// Classification head: one small MLP per class token, fused by summing the
// K-dim logits and applying softmax.
template <typename T>
struct ClassHead {
    Mlp<T> mlp_cv, mlp_vc;
    bool has_vc = true;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t D, int64_t K, bool with_vc,
              Rng& rng) {
        has_vc = with_vc;
        mlp_cv.init(reg, name + ".cv", D, D, K, rng);
        if (with_vc) mlp_vc.init(reg, name + ".vc", D, D, K, rng);
    }

    static Tensor<T> fuse(const Tensor<T>& logits_cv, const Tensor<T>& logits_vc) {
        return softmax(logits_vc.defined() ? add(logits_cv, logits_vc) : logits_cv, -1);
    }

    // cls rows are [1 x D]; returns (fused logits, probabilities)
    std::pair<Tensor<T>, Tensor<T>> forward(const Tensor<T>& cls_cv, const Tensor<T>& cls_vc) const {
        auto l_cv = mlp_cv.forward(cls_cv);
        Tensor<T> l_vc;
        if (has_vc && cls_vc.defined()) l_vc = mlp_vc.forward(cls_vc);
        auto logits = l_vc.defined() ? add(l_cv, l_vc) : l_cv;
        return {logits, softmax(logits, -1)};
    }
};

}  // namespace fmf
