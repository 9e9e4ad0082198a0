#pragma once

#include "fmf/nn.hpp"

namespace fmf {

// Patch grid bookkeeping for one input geometry. Counts follow the floor
// formulas: n = floor(extent / patch) for the standard scale and
// floor(extent / ((patch-1)*d + 1)) for the dilated scale, whose footprint
// covers (patch-1)*d + 1 pixels per spatial axis. Border remainders are
// dropped. Dilation applies to the spatial axes only.
struct PatchGeometry {
    int64_t t_v = 2, h_v = 8, w_v = 8;  // patch extents (frames, pixels, pixels)
    int64_t d = 2;                      // spatial dilation rate, >= 1
    int64_t T_v = 0, H = 0, W = 0;      // input extents
    int64_t n_t = 0, n_h = 0, n_w = 0;  // standard grid
    int64_t n_h_d = 0, n_w_d = 0;       // dilated grid

    int64_t footprint_h() const { return (h_v - 1) * d + 1; }
    int64_t footprint_w() const { return (w_v - 1) * d + 1; }
    int64_t patch_len() const { return t_v * h_v * w_v * 3; }
    int64_t dilated_tokens() const { return n_t * n_h_d * n_w_d; }
    int64_t standard_tokens() const { return n_t * n_h * n_w; }
    int64_t video_tokens(bool dilated_on) const {
        return (dilated_on ? dilated_tokens() : 0) + standard_tokens() + 1;
    }

    bool same_grid(const PatchGeometry& o) const {
        return n_t == o.n_t && n_h == o.n_h && n_w == o.n_w && n_h_d == o.n_h_d && n_w_d == o.n_w_d;
    }
};

inline PatchGeometry compute_grid(int64_t T_v, int64_t H, int64_t W, int64_t t_v, int64_t h_v,
                                  int64_t w_v, int64_t d, bool require_dilated = true) {
    FMF_CHECK(T_v > 0 && H > 0 && W > 0, "video extents must be positive");
    FMF_CHECK(t_v > 0 && h_v > 0 && w_v > 0 && d >= 1, "invalid patch geometry");
    PatchGeometry g;
    g.t_v = t_v;
    g.h_v = h_v;
    g.w_v = w_v;
    g.d = d;
    g.T_v = T_v;
    g.H = H;
    g.W = W;
    g.n_t = T_v / t_v;
    g.n_h = H / h_v;
    g.n_w = W / w_v;
    g.n_h_d = H / g.footprint_h();
    g.n_w_d = W / g.footprint_w();
    FMF_CHECK(g.n_t >= 1 && g.n_h >= 1 && g.n_w >= 1,
              "input too small: " << T_v << "x" << H << "x" << W << " yields an empty standard grid");
    if (require_dilated)
        FMF_CHECK(g.n_h_d >= 1 && g.n_w_d >= 1,
                  "input too small for dilated footprint " << g.footprint_h() << "x" << g.footprint_w());
    return g;
}

// Row bookkeeping for a token matrix: class token at row 0, then the dilated
// segment, then the standard segment (video) or the sample rows (current).
struct TokenLayout {
    int64_t dilated = 0;
    int64_t standard = 0;
    // video grids (zero for current-modality layouts)
    int64_t n_t = 0, n_h = 0, n_w = 0, n_h_d = 0, n_w_d = 0;

    int64_t rows() const { return 1 + dilated + standard; }
    int64_t dilated_begin() const { return 1; }
    int64_t standard_begin() const { return 1 + dilated; }
};

template <typename T>
struct TokenMatrix {
    Tensor<T> values;  // rows() x D
    TokenLayout layout;
};

// Gathers one flattened patch; elements ordered (t, h, w, channel) row-major.
// The dilated variant samples at spatial stride d inside the footprint; the
// temporal axis is always dense.
template <typename T>
void gather_patch(const T* x, const PatchGeometry& g, int64_t pt, int64_t ph, int64_t pw, bool dilated,
                  T* out) {
    int64_t stride = dilated ? g.d : 1;
    int64_t t0 = pt * g.t_v;
    int64_t h0 = ph * (dilated ? g.footprint_h() : g.h_v);
    int64_t w0 = pw * (dilated ? g.footprint_w() : g.w_v);
    int64_t idx = 0;
    for (int64_t it = 0; it < g.t_v; ++it) {
        int64_t t = t0 + it;
        for (int64_t ih = 0; ih < g.h_v; ++ih) {
            int64_t hh = h0 + ih * stride;
            for (int64_t iw = 0; iw < g.w_v; ++iw) {
                int64_t ww = w0 + iw * stride;
                const T* src = x + ((t * g.H + hh) * g.W + ww) * 3;
                out[idx++] = src[0];
                out[idx++] = src[1];
                out[idx++] = src[2];
            }
        }
    }
}

template <typename T>
std::vector<T> extract_patch(const Tensor<T>& x, const PatchGeometry& g, int64_t pt, int64_t ph,
                             int64_t pw, bool dilated) {
    FMF_CHECK(x.rank() == 4 && x.shape()[3] == 3, "expected [T,H,W,3] video");
    int64_t nh = dilated ? g.n_h_d : g.n_h, nw = dilated ? g.n_w_d : g.n_w;
    FMF_CHECK(pt >= 0 && pt < g.n_t && ph >= 0 && ph < nh && pw >= 0 && pw < nw,
              "patch origin outside grid");
    std::vector<T> out(size_t(g.patch_len()));
    gather_patch(x.data(), g, pt, ph, pw, dilated, out.data());
    return out;
}

// Extracts the full patch set of one scale as a [count x patch_len] matrix.
// Token emission order is t-major, then h, then w.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& x, const PatchGeometry& g, bool dilated) {
    FMF_CHECK(x.rank() == 4 && x.shape()[3] == 3,
              "expected [T,H,W,3] video, got " << shape_str(x.shape()));
    FMF_CHECK(x.shape()[0] == g.T_v && x.shape()[1] == g.H && x.shape()[2] == g.W,
              "video extents " << shape_str(x.shape()) << " do not match geometry");
    int64_t nh = dilated ? g.n_h_d : g.n_h, nw = dilated ? g.n_w_d : g.n_w;
    int64_t count = g.n_t * nh * nw;
    FMF_CHECK(count >= 1, "empty patch grid");
    int64_t len = g.patch_len();
    Tensor<T> y(Shape{count, len});
    int64_t row = 0;
    for (int64_t pt = 0; pt < g.n_t; ++pt)
        for (int64_t ph = 0; ph < nh; ++ph)
            for (int64_t pw = 0; pw < nw; ++pw) gather_patch(x.data(), g, pt, ph, pw, dilated, y.data() + (row++) * len);

    auto xn = x.node(), yn = y.node();
    detail::record("extract_patches", {x}, y, [xn, yn, g, dilated, nh, nw, len]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        // scatter-add: patches within a scale are non-overlapping
        int64_t stride = dilated ? g.d : 1;
        int64_t row = 0;
        for (int64_t pt = 0; pt < g.n_t; ++pt)
            for (int64_t ph = 0; ph < nh; ++ph)
                for (int64_t pw = 0; pw < nw; ++pw) {
                    const T* gr = yn->grad.data() + row * len;
                    int64_t t0 = pt * g.t_v;
                    int64_t h0 = ph * (dilated ? g.footprint_h() : g.h_v);
                    int64_t w0 = pw * (dilated ? g.footprint_w() : g.w_v);
                    int64_t idx = 0;
                    for (int64_t it = 0; it < g.t_v; ++it)
                        for (int64_t ih = 0; ih < g.h_v; ++ih)
                            for (int64_t iw = 0; iw < g.w_v; ++iw) {
                                T* dst = xn->grad.data() +
                                         (((t0 + it) * g.H + h0 + ih * stride) * g.W + w0 +
                                          iw * stride) * 3;
                                dst[0] += gr[idx++];
                                dst[1] += gr[idx++];
                                dst[2] += gr[idx++];
                            }
                    ++row;
                }
    });
    return y;
}

// Resizes a per-scale positional grid (n_t, n_h, n_w, D) to a new grid,
// bilinear over (h, w) per temporal slice, then linear over t. Stays on the
// tape so gradients reach the source embedding if one is training through it.
template <typename T>
Tensor<T> resize_pos_grid(const Tensor<T>& seg, int64_t d, int64_t n_t, int64_t n_h, int64_t n_w,
                          int64_t n_t2, int64_t n_h2, int64_t n_w2) {
    FMF_CHECK(n_t2 >= 1 && n_h2 >= 1 && n_w2 >= 1, "positional target grid has a zero extent");
    std::vector<Tensor<T>> slices;
    slices.reserve(size_t(n_t));
    for (int64_t t = 0; t < n_t; ++t) {
        auto sl = slice0(seg, t * n_h * n_w, (t + 1) * n_h * n_w);
        auto img = reshape(sl, Shape{1, n_h, n_w, d});
        auto rs = bilinear_resize(img, n_h2, n_w2);
        slices.push_back(reshape(rs, Shape{n_h2 * n_w2, d}));
    }
    if (n_t2 == n_t) return concat0(slices);
    std::vector<Tensor<T>> out;
    out.reserve(size_t(n_t2));
    for (int64_t t2 = 0; t2 < n_t2; ++t2) {
        double f = n_t2 > 1 ? double(t2) * double(n_t - 1) / double(n_t2 - 1) : 0.0;
        int64_t s0 = std::min<int64_t>(int64_t(f), n_t - 1);
        int64_t s1 = std::min<int64_t>(s0 + 1, n_t - 1);
        T w1 = T(f - double(s0));
        if (s0 == s1 || w1 == T(0)) {
            out.push_back(slices[size_t(s0)]);
        } else {
            out.push_back(add(scale(slices[size_t(s0)], T(1) - w1), scale(slices[size_t(s1)], w1)));
        }
    }
    return concat0(out);
}

// Multiscale video tokenizer: patches from both scales share one linear map,
// a class token is prepended, and learnable positional embeddings are added.
template <typename T>
struct VideoTokenizer {
    PatchGeometry geom;  // build-time geometry
    bool dilated = true;
    int64_t dim = 0;
    Linear<T> proj;
    Tensor<T> cls;  // 1 x D
    Tensor<T> pos;  // video_tokens(dilated) x D

    void init(ParamRegistry<T>& reg, const std::string& name, const PatchGeometry& g, bool dilated_on,
              int64_t D, Rng& rng) {
        geom = g;
        dilated = dilated_on;
        dim = D;
        proj.init(reg, name + ".proj", g.patch_len(), D, rng);
        cls = reg.add(name + ".cls", Tensor<T>::randn(Shape{1, D}, rng, T(kProjInitStd)));
        pos = reg.add(name + ".pos",
                      Tensor<T>::randn(Shape{g.video_tokens(dilated_on), D}, rng, T(kProjInitStd)));
    }

    TokenLayout layout_for(const PatchGeometry& g) const {
        TokenLayout l;
        l.dilated = dilated ? g.dilated_tokens() : 0;
        l.standard = g.standard_tokens();
        l.n_t = g.n_t;
        l.n_h = g.n_h;
        l.n_w = g.n_w;
        l.n_h_d = g.n_h_d;
        l.n_w_d = g.n_w_d;
        return l;
    }

    // Positional embeddings for an arbitrary grid; identity when it matches
    // the build grid, otherwise interpolated scale by scale.
    Tensor<T> positional_for(const PatchGeometry& g) const {
        if (g.same_grid(geom)) return pos;
        std::vector<Tensor<T>> parts;
        parts.push_back(slice0(pos, 0, 1));
        int64_t off = 1;
        if (dilated) {
            auto seg = slice0(pos, off, off + geom.dilated_tokens());
            parts.push_back(resize_pos_grid(seg, dim, geom.n_t, geom.n_h_d, geom.n_w_d, g.n_t, g.n_h_d,
                                            g.n_w_d));
            off += geom.dilated_tokens();
        }
        auto seg = slice0(pos, off, off + geom.standard_tokens());
        parts.push_back(resize_pos_grid(seg, dim, geom.n_t, geom.n_h, geom.n_w, g.n_t, g.n_h, g.n_w));
        return concat0(parts);
    }

    TokenMatrix<T> forward(const Tensor<T>& x) const {
        PatchGeometry g = compute_grid(x.shape()[0], x.shape()[1], x.shape()[2], geom.t_v, geom.h_v,
                                       geom.w_v, geom.d, dilated);
        // both scales concatenated before the single shared linear map; the
        // class row joins after the projection
        std::vector<Tensor<T>> patch_parts;
        if (dilated) patch_parts.push_back(extract_patches(x, g, true));
        patch_parts.push_back(extract_patches(x, g, false));
        auto patches = patch_parts.size() == 1 ? patch_parts[0] : concat0(patch_parts);
        auto toks = proj.forward(patches);
        auto all = concat0<T>({cls, toks});
        TokenMatrix<T> tm;
        tm.values = add(all, positional_for(g));
        tm.layout = layout_for(g);
        return tm;
    }
};

// Current tokenizer: each 3-phase sample maps to one token.
template <typename T>
struct CurrentTokenizer {
    int64_t t_c = 0;  // build-time sequence length
    int64_t dim = 0;
    Linear<T> proj;
    Tensor<T> cls;
    Tensor<T> pos;  // (T_c + 1) x D

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t T_c, int64_t D, Rng& rng) {
        FMF_CHECK(T_c >= 1, "current sequence length must be positive");
        t_c = T_c;
        dim = D;
        proj.init(reg, name + ".proj", 3, D, rng);
        cls = reg.add(name + ".cls", Tensor<T>::randn(Shape{1, D}, rng, T(kProjInitStd)));
        pos = reg.add(name + ".pos", Tensor<T>::randn(Shape{T_c + 1, D}, rng, T(kProjInitStd)));
    }

    Tensor<T> positional_for(int64_t len) const {
        if (len == t_c) return pos;
        FMF_CHECK(len >= 1, "current positional target length must be positive");
        auto cls_row = slice0(pos, 0, 1);
        auto body = slice0(pos, 1, t_c + 1);
        auto img = reshape(body, Shape{1, t_c, 1, dim});
        auto rs = reshape(bilinear_resize(img, len, 1), Shape{len, dim});
        return concat0<T>({cls_row, rs});
    }

    TokenMatrix<T> forward(const Tensor<T>& x) const {
        FMF_CHECK(x.rank() == 2 && x.shape()[1] == 3,
                  "expected [T_c, 3] current input, got " << shape_str(x.shape()));
        int64_t len = x.shape()[0];
        auto toks = proj.forward(x);
        auto all = concat0<T>({cls, toks});
        TokenMatrix<T> tm;
        tm.values = add(all, positional_for(len));
        tm.layout.standard = len;
        return tm;
    }
};

}  // namespace fmf
