#pragma once

#include <Eigen/Core>
#include <atomic>
#include <cstdio>
#include <memory>
#include <utility>

#include "fmf/common.hpp"

namespace fmf {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;
template <typename T>
using MapV = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapV = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
struct TensorData {
    Shape shape;
    AVec<T> values;
    AVec<T> grad;  // empty until touched by backward
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
};

// Value-semantic handle to an immutable n-d array. Copies share the buffer;
// ops never mutate their inputs. Mutation through data() is reserved for
// owners (initialization, optimizer steps) outside any recording scope.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : d_(std::make_shared<TensorData<T>>()) {
        for (int64_t e : shape) FMF_CHECK(e > 0, "tensor extents must be positive, got " << shape_str(shape));
        d_->shape = std::move(shape);
        d_->values.assign(size_t(fmf::numel(d_->shape)), fill);
        d_->requires_grad = requires_grad;
    }

    static Tensor from(Shape shape, const std::vector<T>& values, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        FMF_CHECK(fmf::numel(shape) == int64_t(values.size()),
                  "value count " << values.size() << " does not match shape " << shape_str(shape));
        t.d_->shape = std::move(shape);
        t.d_->values.assign(values.begin(), values.end());
        t.d_->requires_grad = requires_grad;
        return t;
    }


    static Tensor randn(Shape shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        Tensor t(std::move(shape), T(0), requires_grad);
        for (auto& v : t.d_->values) v = T(rng.gaussian()) * stddev;
        return t;
    }

    bool defined() const { return bool(d_); }
    const Shape& shape() const { return d_->shape; }
    int64_t dim(size_t i) const { return d_->shape[i]; }
    size_t rank() const { return d_->shape.size(); }
    int64_t size() const { return int64_t(d_->values.size()); }

    T* data() { return d_->values.data(); }
    const T* data() const { return d_->values.data(); }
    AVec<T>& values() { return d_->values; }
    const AVec<T>& values() const { return d_->values; }
    T operator[](int64_t i) const { return d_->values[size_t(i)]; }
    T& operator[](int64_t i) { return d_->values[size_t(i)]; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }
    const AVec<T>& grad() const { return d_->grad; }
    AVec<T>& grad() { return d_->grad; }
    void zero_grad() {
        if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    std::shared_ptr<TensorData<T>> node() const { return d_; }

    bool finite() const {
        for (T v : d_->values)
            if (!std::isfinite(double(v))) return false;
        return true;
    }

private:
    std::shared_ptr<TensorData<T>> d_;
};

template <typename T>
struct TapeOp {
    const char* name;
    std::vector<std::shared_ptr<TensorData<T>>> inputs;
    std::shared_ptr<TensorData<T>> output;
    std::function<void()> backward;
};

// Ordered record of executed ops. Ops append at execution time, so the record
// is topologically ordered by construction; backward walks it exactly once in
// reverse. Confined to one execution context (thread_local activation).
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active_slot() {
        thread_local Tape* active = nullptr;
        return active;
    }
    static Tape* active() { return active_slot(); }

    void push(TapeOp<T> op) { ops_.push_back(std::move(op)); }
    const std::vector<TapeOp<T>>& ops() const { return ops_; }
    size_t size() const { return ops_.size(); }

    void reset() {
        ops_.clear();
        consumed_ = false;
    }

    // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
    // recorded tensor that requires them.
    void backward(const Tensor<T>& loss) {
        FMF_CHECK(loss.size() == 1, "backward expects a scalar loss, got " << shape_str(loss.shape()));
        FMF_CHECK(!consumed_, "backward called twice on the same tape (reset it first)");
        loss.node()->ensure_grad();
        loss.node()->grad[0] = T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (it->output->grad.empty()) continue;  // not on the loss path
            it->backward();
        }
        consumed_ = true;
    }

    bool consumed() const { return consumed_; }

private:
    std::vector<TapeOp<T>> ops_;
    bool consumed_ = false;
};

template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_slot()) { Tape<T>::active_slot() = &tape; }
    ~TapeScope() { Tape<T>::active_slot() = prev_; }
    TapeScope(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<Tensor<T>> ts) {
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

template <typename T, typename F>
void record(const char* name, std::initializer_list<Tensor<T>> inputs, Tensor<T>& out, F&& fn) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape || !any_requires_grad(inputs)) return;
    out.node()->requires_grad = true;
    TapeOp<T> op;
    op.name = name;
    for (const auto& t : inputs)
        if (t.defined()) op.inputs.push_back(t.node());
    op.output = out.node();
    op.backward = std::function<void()>(std::forward<F>(fn));
    tape->push(std::move(op));
}

template <typename T>
void accumulate(const std::shared_ptr<TensorData<T>>& node, const AVec<T>& contrib) {
    if (!node->requires_grad) return;
    node->ensure_grad();
    CMapV<T> c(contrib.data(), int64_t(contrib.size()));
    MapV<T>(node->grad.data(), int64_t(node->grad.size())) += c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    FMF_CHECK(a.shape() == b.shape(),
              "add shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
    Tensor<T> y(a.shape());
    CMapV<T> av(a.data(), a.size()), bv(b.data(), b.size());
    MapV<T>(y.data(), y.size()) = av + bv;
    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record("add", {a, b}, y, [an, bn, yn]() {
        detail::accumulate(an, yn->grad);
        detail::accumulate(bn, yn->grad);
    });
    return y;
}

// Broadcasts a [D] or [1 x D] vector over the rows of a [N x D] matrix.
template <typename T>
Tensor<T> add_rows(const Tensor<T>& a, const Tensor<T>& b) {
    int64_t d = a.shape().back();
    FMF_CHECK(b.size() == d, "add_rows: vector size " << b.size() << " != last extent " << d);
    int64_t rows = a.size() / d;
    Tensor<T> y(a.shape());
    for (int64_t r = 0; r < rows; ++r) {
        CMapV<T> av(a.data() + r * d, d);
        CMapV<T> bv(b.data(), d);
        MapV<T>(y.data() + r * d, d) = av + bv;
    }
    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record("add_rows", {a, b}, y, [an, bn, yn, rows, d]() {
        detail::accumulate(an, yn->grad);
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                MapV<T>(bn->grad.data(), d) += CMapV<T>(yn->grad.data() + r * d, d);
        }
    });
    return y;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> y(a.shape());
    MapV<T>(y.data(), y.size()) = CMapV<T>(a.data(), a.size()) * c;
    auto an = a.node(), yn = y.node();
    detail::record("scale", {a}, y, [an, yn, c]() {
        if (!an->requires_grad) return;
        an->ensure_grad();
        MapV<T>(an->grad.data(), int64_t(an->grad.size())) +=
            CMapV<T>(yn->grad.data(), int64_t(yn->grad.size())) * c;
    });
    return y;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    FMF_CHECK(a.shape() == b.shape(),
              "mul shape mismatch " << shape_str(a.shape()) << " vs " << shape_str(b.shape()));
    Tensor<T> y(a.shape());
    MapV<T>(y.data(), y.size()) = CMapV<T>(a.data(), a.size()) * CMapV<T>(b.data(), b.size());
    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record("mul", {a, b}, y, [an, bn, yn]() {
        int64_t n = int64_t(yn->grad.size());
        if (an->requires_grad) {
            an->ensure_grad();
            MapV<T>(an->grad.data(), n) +=
                CMapV<T>(yn->grad.data(), n) * CMapV<T>(bn->values.data(), n);
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            MapV<T>(bn->grad.data(), n) +=
                CMapV<T>(yn->grad.data(), n) * CMapV<T>(an->values.data(), n);
        }
    });
    return y;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    Tensor<T> y(Shape{1});
    // Fixed sequential reduction order keeps forwards bit-deterministic.
    T acc = T(0);
    const T* p = a.data();
    for (int64_t i = 0; i < a.size(); ++i) acc += p[i];
    y[0] = acc;
    auto an = a.node(), yn = y.node();
    detail::record("sum_all", {a}, y, [an, yn]() {
        if (!an->requires_grad) return;
        an->ensure_grad();
        T g = yn->grad[0];
        MapV<T>(an->grad.data(), int64_t(an->grad.size())) += g;
    });
    return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    FMF_CHECK(fmf::numel(new_shape) == a.size(),
              "reshape " << shape_str(a.shape()) << " -> " << shape_str(new_shape) << " changes element count");
    Tensor<T> y(std::move(new_shape));
    y.values() = a.values();
    auto an = a.node(), yn = y.node();
    detail::record("reshape", {a}, y, [an, yn]() { detail::accumulate(an, yn->grad); });
    return y;
}

// Slice along axis 0; trailing shape preserved.
template <typename T>
Tensor<T> slice0(const Tensor<T>& a, int64_t i0, int64_t i1) {
    FMF_CHECK(0 <= i0 && i0 < i1 && i1 <= a.shape()[0],
              "slice0 range [" << i0 << "," << i1 << ") out of bounds for " << shape_str(a.shape()));
    Shape s = a.shape();
    s[0] = i1 - i0;
    int64_t stride = a.size() / a.shape()[0];
    Tensor<T> y(s);
    std::copy(a.data() + i0 * stride, a.data() + i1 * stride, y.data());
    auto an = a.node(), yn = y.node();
    detail::record("slice0", {a}, y, [an, yn, i0, stride]() {
        if (!an->requires_grad) return;
        an->ensure_grad();
        int64_t n = int64_t(yn->grad.size());
        MapV<T>(an->grad.data() + i0 * stride, n) += CMapV<T>(yn->grad.data(), n);
    });
    return y;
}

template <typename T>
Tensor<T> concat0(const std::vector<Tensor<T>>& parts) {
    FMF_CHECK(!parts.empty(), "concat0 of zero tensors");
    Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
    int64_t total = 0;
    for (const auto& p : parts) {
        Shape pt(p.shape().begin() + 1, p.shape().end());
        FMF_CHECK(pt == tail, "concat0: trailing shapes differ");
        total += p.shape()[0];
    }
    Shape s = parts[0].shape();
    s[0] = total;
    Tensor<T> y(s);
    int64_t off = 0;
    bool needs = false;
    for (const auto& p : parts) {
        std::copy(p.data(), p.data() + p.size(), y.data() + off);
        off += p.size();
        needs = needs || p.requires_grad();
    }
    Tape<T>* tape = Tape<T>::active();
    if (tape && needs) {
        y.node()->requires_grad = true;
        TapeOp<T> op;
        op.name = "concat0";
        for (const auto& p : parts) op.inputs.push_back(p.node());
        op.output = y.node();
        auto yn = y.node();
        std::vector<std::shared_ptr<TensorData<T>>> ins = op.inputs;
        op.backward = [ins, yn]() {
            int64_t off = 0;
            for (auto& in : ins) {
                int64_t n = int64_t(in->values.size());
                if (in->requires_grad) {
                    in->ensure_grad();
                    MapV<T>(in->grad.data(), n) += CMapV<T>(yn->grad.data() + off, n);
                }
                off += n;
            }
        };
        tape->push(std::move(op));
    }
    return y;
}

// Stacks equal-shape tensors along a new leading axis.
template <typename T>
Tensor<T> stack0(const std::vector<Tensor<T>>& parts) {
    FMF_CHECK(!parts.empty(), "stack0 of zero tensors");
    std::vector<Tensor<T>> rows;
    rows.reserve(parts.size());
    Shape s = parts[0].shape();
    s.insert(s.begin(), 1);
    // concat0 over [1 x ...] views; reshape records its own pass-through.
    for (const auto& p : parts) rows.push_back(reshape(p, s));
    return concat0(rows);
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, int64_t c0, int64_t c1) {
    FMF_CHECK(a.rank() == 2, "slice_cols expects a matrix");
    int64_t rows = a.shape()[0], cols = a.shape()[1];
    FMF_CHECK(0 <= c0 && c0 < c1 && c1 <= cols, "slice_cols range out of bounds");
    int64_t w = c1 - c0;
    Tensor<T> y(Shape{rows, w});
    for (int64_t r = 0; r < rows; ++r)
        std::copy(a.data() + r * cols + c0, a.data() + r * cols + c1, y.data() + r * w);
    auto an = a.node(), yn = y.node();
    detail::record("slice_cols", {a}, y, [an, yn, rows, cols, c0, w]() {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r)
            MapV<T>(an->grad.data() + r * cols + c0, w) += CMapV<T>(yn->grad.data() + r * w, w);
    });
    return y;
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    FMF_CHECK(!parts.empty(), "concat_cols of zero tensors");
    int64_t rows = parts[0].shape()[0];
    int64_t cols = 0;
    for (const auto& p : parts) {
        FMF_CHECK(p.rank() == 2 && p.shape()[0] == rows, "concat_cols: row counts differ");
        cols += p.shape()[1];
    }
    Tensor<T> y(Shape{rows, cols});
    int64_t off = 0;
    bool needs = false;
    for (const auto& p : parts) {
        int64_t w = p.shape()[1];
        for (int64_t r = 0; r < rows; ++r)
            std::copy(p.data() + r * w, p.data() + (r + 1) * w, y.data() + r * cols + off);
        off += w;
        needs = needs || p.requires_grad();
    }
    Tape<T>* tape = Tape<T>::active();
    if (tape && needs) {
        y.node()->requires_grad = true;
        TapeOp<T> op;
        op.name = "concat_cols";
        for (const auto& p : parts) op.inputs.push_back(p.node());
        op.output = y.node();
        auto yn = y.node();
        std::vector<std::shared_ptr<TensorData<T>>> ins = op.inputs;
        op.backward = [ins, yn, rows, cols]() {
            int64_t off = 0;
            for (auto& in : ins) {
                int64_t w = int64_t(in->values.size()) / rows;
                if (in->requires_grad) {
                    in->ensure_grad();
                    for (int64_t r = 0; r < rows; ++r)
                        MapV<T>(in->grad.data() + r * w, w) +=
                            CMapV<T>(yn->grad.data() + r * cols + off, w);
                }
                off += w;
            }
        };
        tape->push(std::move(op));
    }
    return y;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// y = alpha * op(a) * op(b) with op defined by the transpose flags.
// Backward: da = g.b^T, db = a^T.g (adjusted per flags).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false, bool trans_b = false,
                 T alpha = T(1)) {
    FMF_CHECK(a.rank() == 2 && b.rank() == 2, "matmul expects matrices");
    int64_t m = trans_a ? a.shape()[1] : a.shape()[0];
    int64_t k = trans_a ? a.shape()[0] : a.shape()[1];
    int64_t kb = trans_b ? b.shape()[1] : b.shape()[0];
    int64_t n = trans_b ? b.shape()[0] : b.shape()[1];
    FMF_CHECK(k == kb, "matmul inner extents differ: " << shape_str(a.shape()) << (trans_a ? "^T" : "")
                                                       << " x " << shape_str(b.shape())
                                                       << (trans_b ? "^T" : ""));
    Tensor<T> y(Shape{m, n});
    CMapM<T> A(a.data(), a.shape()[0], a.shape()[1]);
    CMapM<T> B(b.data(), b.shape()[0], b.shape()[1]);
    MapM<T> Y(y.data(), m, n);
    if (!trans_a && !trans_b)
        Y.noalias() = alpha * (A * B);
    else if (!trans_a && trans_b)
        Y.noalias() = alpha * (A * B.transpose());
    else if (trans_a && !trans_b)
        Y.noalias() = alpha * (A.transpose() * B);
    else
        Y.noalias() = alpha * (A.transpose() * B.transpose());

    auto an = a.node(), bn = b.node(), yn = y.node();
    detail::record("matmul", {a, b}, y, [an, bn, yn, trans_a, trans_b, alpha, m, n]() {
        CMapM<T> A(an->values.data(), int64_t(an->shape[0]), int64_t(an->shape[1]));
        CMapM<T> B(bn->values.data(), int64_t(bn->shape[0]), int64_t(bn->shape[1]));
        CMapM<T> G(yn->grad.data(), m, n);
        if (an->requires_grad) {
            an->ensure_grad();
            MapM<T> dA(an->grad.data(), an->shape[0], an->shape[1]);
            if (!trans_a && !trans_b)
                dA.noalias() += alpha * (G * B.transpose());
            else if (!trans_a && trans_b)
                dA.noalias() += alpha * (G * B);
            else if (trans_a && !trans_b)
                dA.noalias() += alpha * (B * G.transpose());
            else
                dA.noalias() += alpha * (B.transpose() * G.transpose());
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            MapM<T> dB(bn->grad.data(), bn->shape[0], bn->shape[1]);
            if (!trans_a && !trans_b)
                dB.noalias() += alpha * (A.transpose() * G);
            else if (!trans_a && trans_b)
                dB.noalias() += alpha * (G.transpose() * A);
            else if (trans_a && !trans_b)
                dB.noalias() += alpha * (A * G);
            else
                dB.noalias() += alpha * (G.transpose() * A.transpose());
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    size_t r = x.rank();
    int ax = axis < 0 ? int(r) + axis : axis;
    FMF_CHECK(ax >= 0 && ax < int(r), "softmax axis out of range");
    int64_t lanes = x.shape()[ax];
    int64_t inner = 1;
    for (size_t i = size_t(ax) + 1; i < r; ++i) inner *= x.shape()[i];
    int64_t outer = x.size() / (lanes * inner);

    Tensor<T> y(x.shape());
    const T* xp = x.data();
    T* yp = y.data();
    for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
            const T* xs = xp + o * lanes * inner + i;
            T* ys = yp + o * lanes * inner + i;
            T mx = xs[0];
            for (int64_t l = 1; l < lanes; ++l) mx = std::max(mx, xs[l * inner]);
            T denom = T(0);
            for (int64_t l = 0; l < lanes; ++l) {
                T e = std::exp(xs[l * inner] - mx);
                ys[l * inner] = e;
                denom += e;
            }
            T inv = T(1) / denom;
            for (int64_t l = 0; l < lanes; ++l) ys[l * inner] *= inv;
        }
    }
    auto xn = x.node(), yn = y.node();
    detail::record("softmax", {x}, y, [xn, yn, outer, lanes, inner]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const T* yp = yn->values.data();
        const T* gp = yn->grad.data();
        T* dxp = xn->grad.data();
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t i = 0; i < inner; ++i) {
                int64_t base = o * lanes * inner + i;
                T dot = T(0);
                for (int64_t l = 0; l < lanes; ++l) dot += gp[base + l * inner] * yp[base + l * inner];
                for (int64_t l = 0; l < lanes; ++l) {
                    int64_t k = base + l * inner;
                    dxp[k] += yp[k] * (gp[k] - dot);
                }
            }
        }
    });
    return y;
}

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
    int64_t d = x.shape().back();
    FMF_CHECK(gain.size() == d && bias.size() == d,
              "layer_norm: gain/bias size must equal last extent " << d);
    int64_t rows = x.size() / d;
    Tensor<T> y(x.shape());
    std::vector<T> mean(rows), inv_std(rows);
    for (int64_t r = 0; r < rows; ++r) {
        CMapV<T> xv(x.data() + r * d, d);
        T mu = xv.mean();
        T var = (xv - mu).square().sum() / T(d);
        T is = T(1) / std::sqrt(var + T(kLayerNormEps));
        mean[r] = mu;
        inv_std[r] = is;
        MapV<T>(y.data() + r * d, d) =
            ((xv - mu) * is) * CMapV<T>(gain.data(), d) + CMapV<T>(bias.data(), d);
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), yn = y.node();
    detail::record("layer_norm", {x, gain, bias}, y,
                   [xn, gn, bn, yn, rows, d, mean = std::move(mean), inv_std = std::move(inv_std)]() {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            CMapV<T> xv(xn->values.data() + r * d, d);
            CMapV<T> gv(yn->grad.data() + r * d, d);
            CMapV<T> gainv(gn->values.data(), d);
            auto xhat = (xv - mean[r]) * inv_std[r];
            if (gn->requires_grad) MapV<T>(gn->grad.data(), d) += gv * xhat;
            if (bn->requires_grad) MapV<T>(bn->grad.data(), d) += gv;
            if (xn->requires_grad) {
                auto dxhat = (gv * gainv).eval();
                T s1 = dxhat.sum() / T(d);
                T s2 = (dxhat * xhat).sum() / T(d);
                MapV<T>(xn->grad.data() + r * d, d) += inv_std[r] * (dxhat - s1 - xhat * s2);
            }
        }
    });
    return y;
}

// Optional activation-sign probe. Central finite differences are only valid
// when no ReLU input changes sign across the probed interval; gradient
// oracles install a hash slot here and compare it between the two loss
// evaluations to detect (and exclude) kink-crossing coordinates.
inline uint64_t*& relu_sign_probe() {
    thread_local uint64_t* slot = nullptr;
    return slot;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    MapV<T>(y.data(), y.size()) = CMapV<T>(x.data(), x.size()).max(T(0));
    if (uint64_t* probe = relu_sign_probe()) {
        const T* xp = x.data();
        for (int64_t i = 0; i < x.size(); ++i)
            *probe = (*probe ^ uint64_t(xp[i] > T(0))) * 1099511628211ULL;
    }
    auto xn = x.node(), yn = y.node();
    detail::record("relu", {x}, y, [xn, yn]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        int64_t n = int64_t(xn->values.size());
        for (int64_t i = 0; i < n; ++i)
            if (xn->values[i] > T(0)) xn->grad[i] += yn->grad[i];
    });
    return y;
}

// tanh-form gelu; 0.7978845608... = sqrt(2/pi).
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluA = 0.044715;

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    const T* xp = x.data();
    T* yp = y.data();
    for (int64_t i = 0; i < x.size(); ++i) {
        T v = xp[i];
        T t = std::tanh(T(kGeluC) * (v + T(kGeluA) * v * v * v));
        yp[i] = T(0.5) * v * (T(1) + t);
    }
    auto xn = x.node(), yn = y.node();
    detail::record("gelu", {x}, y, [xn, yn]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        int64_t n = int64_t(xn->values.size());
        for (int64_t i = 0; i < n; ++i) {
            T v = xn->values[i];
            T u = T(kGeluC) * (v + T(kGeluA) * v * v * v);
            T t = std::tanh(u);
            T du = T(kGeluC) * (T(1) + T(3) * T(kGeluA) * v * v);
            T d = T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * du;
            xn->grad[i] += yn->grad[i] * d;
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// convolution family (NHWC, stride 1, kernel 1x1 pad 0 or 3x3 pad 1)
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int64_t b, int64_t h, int64_t w, int64_t ci, int64_t k, int64_t pad, T* out) {
    int64_t patch = k * k * ci;
    for (int64_t bi = 0; bi < b; ++bi) {
        const T* xb = x + bi * h * w * ci;
        T* ob = out + bi * h * w * patch;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t xx = 0; xx < w; ++xx) {
                T* row = ob + (y * w + xx) * patch;
                for (int64_t ky = 0; ky < k; ++ky) {
                    int64_t sy = y + ky - pad;
                    for (int64_t kx = 0; kx < k; ++kx) {
                        int64_t sx = xx + kx - pad;
                        T* dst = row + (ky * k + kx) * ci;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
                            std::fill(dst, dst + ci, T(0));
                        } else {
                            const T* src = xb + (sy * w + sx) * ci;
                            std::copy(src, src + ci, dst);
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_accum(const T* cols, int64_t b, int64_t h, int64_t w, int64_t ci, int64_t k, int64_t pad,
                  T* dx) {
    int64_t patch = k * k * ci;
    for (int64_t bi = 0; bi < b; ++bi) {
        const T* cb = cols + bi * h * w * patch;
        T* xb = dx + bi * h * w * ci;
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t xx = 0; xx < w; ++xx) {
                const T* row = cb + (y * w + xx) * patch;
                for (int64_t ky = 0; ky < k; ++ky) {
                    int64_t sy = y + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int64_t kx = 0; kx < k; ++kx) {
                        int64_t sx = xx + kx - pad;
                        if (sx < 0 || sx >= w) continue;
                        const T* src = row + (ky * k + kx) * ci;
                        T* dst = xb + (sy * w + sx) * ci;
                        for (int64_t c = 0; c < ci; ++c) dst[c] += src[c];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Cross-correlation over [B,H,W,Cin] with weight [k,k,Cin,Cout]; spatial
// extents preserved (pad 0 for 1x1, pad 1 for 3x3).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    FMF_CHECK(x.rank() == 4, "conv2d expects [B,H,W,C] input, got " << shape_str(x.shape()));
    FMF_CHECK(w.rank() == 4 && w.shape()[0] == w.shape()[1], "conv2d weight must be [k,k,Cin,Cout]");
    int64_t k = w.shape()[0];
    FMF_CHECK(k == 1 || k == 3, "conv2d supports 1x1 and 3x3 kernels, got " << k);
    int64_t b = x.shape()[0], h = x.shape()[1], wd = x.shape()[2], ci = x.shape()[3];
    FMF_CHECK(w.shape()[2] == ci, "conv2d channel mismatch: input " << ci << " vs weight " << w.shape()[2]);
    int64_t co = w.shape()[3];
    FMF_CHECK(!bias.defined() || bias.size() == co, "conv2d bias size mismatch");
    int64_t pad = (k == 3) ? 1 : 0;
    int64_t rows = b * h * wd, patch = k * k * ci;

    Tensor<T> y(Shape{b, h, wd, co});
    AVec<T> cols;
    const T* m;
    if (k == 1) {
        m = x.data();
    } else {
        cols.resize(size_t(rows * patch));
        detail::im2col(x.data(), b, h, wd, ci, k, pad, cols.data());
        m = cols.data();
    }
    {
        CMapM<T> M(m, rows, patch);
        CMapM<T> W(w.data(), patch, co);
        MapM<T> Y(y.data(), rows, co);
        Y.noalias() = M * W;
        if (bias.defined()) {
            CMapV<T> bv(bias.data(), co);
            for (int64_t r = 0; r < rows; ++r) MapV<T>(y.data() + r * co, co) += bv;
        }
    }
    auto xn = x.node(), wn = w.node(), yn = y.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    detail::record("conv2d", {x, w, bias}, y, [xn, wn, bn, yn, b, h, wd, ci, co, k, pad, rows, patch]() {
        AVec<T> cols;
        const T* m;
        if (k == 1) {
            m = xn->values.data();
        } else {
            cols.resize(size_t(rows * patch));
            detail::im2col(xn->values.data(), b, h, wd, ci, k, pad, cols.data());
            m = cols.data();
        }
        CMapM<T> M(m, rows, patch);
        CMapM<T> G(yn->grad.data(), rows, co);
        if (wn->requires_grad) {
            wn->ensure_grad();
            MapM<T> dW(wn->grad.data(), patch, co);
            dW.noalias() += M.transpose() * G;
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                MapV<T>(bn->grad.data(), co) += CMapV<T>(yn->grad.data() + r * co, co);
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            CMapM<T> W(wn->values.data(), patch, co);
            if (k == 1) {
                MapM<T> dX(xn->grad.data(), rows, ci);
                dX.noalias() += G * W.transpose();
            } else {
                AVec<T> dcols(size_t(rows * patch));
                MapM<T> dM(dcols.data(), rows, patch);
                dM.noalias() = G * W.transpose();
                detail::col2im_accum(dcols.data(), b, h, wd, ci, k, pad, xn->grad.data());
            }
        }
    });
    return y;
}

// Transposed convolution, kernel 2x2, stride 2, no padding: exact spatial
// doubling. Equivalent to the gradient of a stride-2 2x2 convolution.
template <typename T>
Tensor<T> deconv2d_2x2(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    FMF_CHECK(x.rank() == 4, "deconv2d expects [B,H,W,C] input");
    FMF_CHECK(w.rank() == 4 && w.shape()[0] == 2 && w.shape()[1] == 2, "deconv2d weight must be [2,2,Cin,Cout]");
    int64_t b = x.shape()[0], h = x.shape()[1], wd = x.shape()[2], ci = x.shape()[3];
    FMF_CHECK(w.shape()[2] == ci, "deconv2d channel mismatch");
    int64_t co = w.shape()[3];
    FMF_CHECK(!bias.defined() || bias.size() == co, "deconv2d bias size mismatch");
    int64_t rows = b * h * wd;

    Tensor<T> y(Shape{b, 2 * h, 2 * wd, co});
    AVec<T> prod(size_t(rows * 4 * co));
    {
        CMapM<T> X(x.data(), rows, ci);
        // weight is stored [2,2,ci,co]; taps are contiguous [ci,co] blocks
        MapM<T> P(prod.data(), rows, 4 * co);
        for (int64_t tap = 0; tap < 4; ++tap) {
            CMapM<T> Wt(w.data() + tap * ci * co, ci, co);
            P.middleCols(tap * co, co).noalias() = X * Wt;
        }
    }
    T* yp = y.data();
    const T* bp = bias.defined() ? bias.data() : nullptr;
    for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t yy = 0; yy < h; ++yy)
            for (int64_t xx = 0; xx < wd; ++xx) {
                const T* pr = prod.data() + ((bi * h + yy) * wd + xx) * 4 * co;
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx) {
                        T* dst = yp + (((bi * 2 * h) + 2 * yy + dy) * 2 * wd + 2 * xx + dx) * co;
                        const T* src = pr + (dy * 2 + dx) * co;
                        if (bp)
                            for (int64_t c = 0; c < co; ++c) dst[c] = src[c] + bp[c];
                        else
                            std::copy(src, src + co, dst);
                    }
            }

    auto xn = x.node(), wn = w.node(), yn = y.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    detail::record("deconv2d_2x2", {x, w, bias}, y, [xn, wn, bn, yn, b, h, wd, ci, co, rows]() {
        // gather output grad back into [rows, 4*co] tap layout
        AVec<T> gg(size_t(rows * 4 * co));
        const T* gp = yn->grad.data();
        for (int64_t bi = 0; bi < b; ++bi)
            for (int64_t yy = 0; yy < h; ++yy)
                for (int64_t xx = 0; xx < wd; ++xx) {
                    T* dst = gg.data() + ((bi * h + yy) * wd + xx) * 4 * co;
                    for (int64_t dy = 0; dy < 2; ++dy)
                        for (int64_t dx = 0; dx < 2; ++dx) {
                            const T* src =
                                gp + (((bi * 2 * h) + 2 * yy + dy) * 2 * wd + 2 * xx + dx) * co;
                            std::copy(src, src + co, dst + (dy * 2 + dx) * co);
                        }
                }
        CMapM<T> G(gg.data(), rows, 4 * co);
        if (xn->requires_grad) {
            xn->ensure_grad();
            MapM<T> dX(xn->grad.data(), rows, ci);
            for (int64_t tap = 0; tap < 4; ++tap) {
                CMapM<T> Wt(wn->values.data() + tap * ci * co, ci, co);
                dX.noalias() += G.middleCols(tap * co, co) * Wt.transpose();
            }
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            CMapM<T> X(xn->values.data(), rows, ci);
            for (int64_t tap = 0; tap < 4; ++tap) {
                MapM<T> dWt(wn->grad.data() + tap * ci * co, ci, co);
                dWt.noalias() += X.transpose() * G.middleCols(tap * co, co);
            }
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            int64_t orow = 4 * rows;
            for (int64_t r = 0; r < orow; ++r)
                MapV<T>(bn->grad.data(), co) += CMapV<T>(yn->grad.data() + r * co, co);
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// batch normalization (NHWC, per channel)
// ---------------------------------------------------------------------------

template <typename T>
struct BnState {
    std::vector<T> running_mean;
    std::vector<T> running_var;  // biased estimate, matching the normalizer
    T momentum = T(0.1);
    T eps = T(1e-5);

    explicit BnState(int64_t channels = 0)
        : running_mean(size_t(channels), T(0)), running_var(size_t(channels), T(1)) {}
};

template <typename T>
Tensor<T> batch_norm_2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                        BnState<T>& state, bool use_batch_stats, bool update_running) {
    FMF_CHECK(x.rank() == 4, "batch_norm_2d expects [B,H,W,C]");
    int64_t c = x.shape()[3];
    FMF_CHECK(int64_t(state.running_mean.size()) == c, "batch_norm_2d state channel mismatch");
    FMF_CHECK(gamma.size() == c && beta.size() == c, "batch_norm_2d affine size mismatch");
    int64_t n = x.size() / c;

    std::vector<T> mean(size_t(c), T(0)), var(size_t(c), T(0));
    if (use_batch_stats) {
        std::fill(mean.begin(), mean.end(), T(0));
        std::fill(var.begin(), var.end(), T(0));
        const T* xp = x.data();
        for (int64_t r = 0; r < n; ++r)
            for (int64_t ch = 0; ch < c; ++ch) mean[size_t(ch)] += xp[r * c + ch];
        for (int64_t ch = 0; ch < c; ++ch) mean[size_t(ch)] /= T(n);
        for (int64_t r = 0; r < n; ++r)
            for (int64_t ch = 0; ch < c; ++ch) {
                T d = xp[r * c + ch] - mean[size_t(ch)];
                var[size_t(ch)] += d * d;
            }
        for (int64_t ch = 0; ch < c; ++ch) var[size_t(ch)] /= T(n);
        if (update_running) {
            for (int64_t ch = 0; ch < c; ++ch) {
                state.running_mean[size_t(ch)] =
                    (T(1) - state.momentum) * state.running_mean[size_t(ch)] + state.momentum * mean[size_t(ch)];
                state.running_var[size_t(ch)] =
                    (T(1) - state.momentum) * state.running_var[size_t(ch)] + state.momentum * var[size_t(ch)];
            }
        }
    } else {
        mean = state.running_mean;
        var = state.running_var;
    }

    Tensor<T> y(x.shape());
    std::vector<T> inv_std(size_t(c), T(0));
    for (int64_t ch = 0; ch < c; ++ch) inv_std[size_t(ch)] = T(1) / std::sqrt(var[size_t(ch)] + state.eps);
    {
        const T* xp = x.data();
        T* yp = y.data();
        const T* gp = gamma.data();
        const T* bp = beta.data();
        for (int64_t r = 0; r < n; ++r)
            for (int64_t ch = 0; ch < c; ++ch)
                yp[r * c + ch] = gp[ch] * (xp[r * c + ch] - mean[size_t(ch)]) * inv_std[size_t(ch)] + bp[ch];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), yn = y.node();
    detail::record("batch_norm_2d", {x, gamma, beta}, y,
                   [xn, gn, bn, yn, n, c, use_batch_stats, mean = std::move(mean),
                    inv_std = std::move(inv_std)]() {
        const T* xp = xn->values.data();
        const T* gp = yn->grad.data();
        std::vector<T> sum_g(size_t(c), T(0)), sum_gx(size_t(c), T(0));
        for (int64_t r = 0; r < n; ++r)
            for (int64_t ch = 0; ch < c; ++ch) {
                T xhat = (xp[r * c + ch] - mean[size_t(ch)]) * inv_std[size_t(ch)];
                sum_g[size_t(ch)] += gp[r * c + ch];
                sum_gx[size_t(ch)] += gp[r * c + ch] * xhat;
            }
        if (gn->requires_grad) {
            gn->ensure_grad();
            for (int64_t ch = 0; ch < c; ++ch) gn->grad[size_t(ch)] += sum_gx[size_t(ch)];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (int64_t ch = 0; ch < c; ++ch) bn->grad[size_t(ch)] += sum_g[size_t(ch)];
        }
        if (xn->requires_grad) {
            xn->ensure_grad();
            const T* gammap = gn->values.data();
            T* dxp = xn->grad.data();
            if (use_batch_stats) {
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t ch = 0; ch < c; ++ch) {
                        T xhat = (xp[r * c + ch] - mean[size_t(ch)]) * inv_std[size_t(ch)];
                        dxp[r * c + ch] += gammap[ch] * inv_std[size_t(ch)] *
                                           (gp[r * c + ch] - sum_g[size_t(ch)] / T(n) -
                                            xhat * sum_gx[size_t(ch)] / T(n));
                    }
            } else {
                for (int64_t r = 0; r < n; ++r)
                    for (int64_t ch = 0; ch < c; ++ch)
                        dxp[r * c + ch] += gammap[ch] * inv_std[size_t(ch)] * gp[r * c + ch];
            }
        }
    });
    return y;
}

// ---------------------------------------------------------------------------
// bilinear resize (align-corners) over [B,H,W,C]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int64_t h2, int64_t w2) {
    FMF_CHECK(x.rank() == 4, "bilinear_resize expects [B,H,W,C]");
    FMF_CHECK(h2 >= 1 && w2 >= 1, "bilinear_resize target extents must be positive");
    int64_t b = x.shape()[0], h = x.shape()[1], w = x.shape()[2], c = x.shape()[3];
    Tensor<T> y(Shape{b, h2, w2, c});
    double sy = h2 > 1 ? double(h - 1) / double(h2 - 1) : 0.0;
    double sx = w2 > 1 ? double(w - 1) / double(w2 - 1) : 0.0;

    auto run = [b, h, w, c, h2, w2, sy, sx](const T* src, T* dst, T* dsrc, const T* ddst) {
        for (int64_t bi = 0; bi < b; ++bi) {
            const T* xb = src ? src + bi * h * w * c : nullptr;
            T* yb = dst ? dst + bi * h2 * w2 * c : nullptr;
            T* dxb = dsrc ? dsrc + bi * h * w * c : nullptr;
            const T* dyb = ddst ? ddst + bi * h2 * w2 * c : nullptr;
            for (int64_t i = 0; i < h2; ++i) {
                double fy = i * sy;
                int64_t y0 = int64_t(fy);
                if (y0 > h - 2) y0 = std::max<int64_t>(0, h - 2);
                double wy = h > 1 ? fy - double(y0) : 0.0;
                for (int64_t j = 0; j < w2; ++j) {
                    double fx = j * sx;
                    int64_t x0 = int64_t(fx);
                    if (x0 > w - 2) x0 = std::max<int64_t>(0, w - 2);
                    double wx = w > 1 ? fx - double(x0) : 0.0;
                    int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
                    T w00 = T((1 - wy) * (1 - wx)), w01 = T((1 - wy) * wx);
                    T w10 = T(wy * (1 - wx)), w11 = T(wy * wx);
                    for (int64_t ch = 0; ch < c; ++ch) {
                        if (dst) {
                            yb[(i * w2 + j) * c + ch] = w00 * xb[(y0 * w + x0) * c + ch] +
                                                        w01 * xb[(y0 * w + x1) * c + ch] +
                                                        w10 * xb[(y1 * w + x0) * c + ch] +
                                                        w11 * xb[(y1 * w + x1) * c + ch];
                        } else {
                            T g = dyb[(i * w2 + j) * c + ch];
                            dxb[(y0 * w + x0) * c + ch] += w00 * g;
                            dxb[(y0 * w + x1) * c + ch] += w01 * g;
                            dxb[(y1 * w + x0) * c + ch] += w10 * g;
                            dxb[(y1 * w + x1) * c + ch] += w11 * g;
                        }
                    }
                }
            }
        }
    };
    run(x.data(), y.data(), nullptr, nullptr);
    auto xn = x.node(), yn = y.node();
    detail::record("bilinear_resize", {x}, y, [xn, yn, run]() {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        run(nullptr, nullptr, xn->grad.data(), yn->grad.data());
    });
    return y;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Mean over batch of the per-sample pixel cross-entropy
//   -(1/HW) sum_{h,w} sum_k y log softmax(logits)_k.
template <typename T>
Tensor<T> cross_entropy_pixels(const Tensor<T>& logits, const Tensor<T>& onehot) {
    FMF_CHECK(logits.rank() == 4, "cross_entropy_pixels expects [B,H,W,K] logits");
    FMF_CHECK(logits.shape() == onehot.shape(), "cross_entropy_pixels: logits/target shapes differ");
    int64_t k = logits.shape()[3];
    int64_t rows = logits.size() / k;
    Tensor<T> y(Shape{1});
    T acc = T(0);
    const T* lp = logits.data();
    const T* tp = onehot.data();
    for (int64_t r = 0; r < rows; ++r) {
        const T* l = lp + r * k;
        const T* t = tp + r * k;
        T mx = l[0];
        for (int64_t i = 1; i < k; ++i) mx = std::max(mx, l[i]);
        T denom = T(0);
        for (int64_t i = 0; i < k; ++i) denom += std::exp(l[i] - mx);
        T lse = std::log(denom) + mx;
        for (int64_t i = 0; i < k; ++i) acc += t[i] * (lse - l[i]);
    }
    y[0] = acc / T(rows);
    auto ln = logits.node(), tn = onehot.node(), yn = y.node();
    detail::record("cross_entropy_pixels", {logits, onehot}, y, [ln, tn, yn, rows, k]() {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        T g = yn->grad[0] / T(rows);
        const T* lp = ln->values.data();
        const T* tp = tn->values.data();
        T* dp = ln->grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const T* l = lp + r * k;
            T mx = l[0];
            for (int64_t i = 1; i < k; ++i) mx = std::max(mx, l[i]);
            T denom = T(0);
            for (int64_t i = 0; i < k; ++i) denom += std::exp(l[i] - mx);
            for (int64_t i = 0; i < k; ++i) {
                T p = std::exp(l[i] - mx) / denom;
                dp[r * k + i] += g * (p - tp[r * k + i]);
            }
        }
    });
    return y;
}

inline std::atomic<long>& prob_clamp_count() {
    static std::atomic<long> n{0};
    return n;
}

// Class-wise cross entropy on probabilities (already softmax-ed): mean over
// rows of -sum_k y_k log max(p_k, eps). Clamped rows are counted and the
// first occurrence is reported on stderr.
template <typename T>
Tensor<T> nll_from_probs(const Tensor<T>& probs, const Tensor<T>& onehot, T eps = T(1e-12)) {
    FMF_CHECK(probs.rank() == 2 && probs.shape() == onehot.shape(),
              "nll_from_probs expects matching [N x K] tensors");
    int64_t rows = probs.shape()[0], k = probs.shape()[1];
    Tensor<T> y(Shape{1});
    T acc = T(0);
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < k; ++i) {
            T t = onehot[r * k + i];
            if (t == T(0)) continue;
            T p = probs[r * k + i];
            if (p < eps) {
                p = eps;
                if (prob_clamp_count().fetch_add(1) == 0)
                    std::fprintf(stderr, "[fmf] warning: clamped log of ~zero class probability\n");
            }
            acc -= t * std::log(p);
        }
    y[0] = acc / T(rows);
    auto pn = probs.node(), tn = onehot.node(), yn = y.node();
    detail::record("nll_from_probs", {probs, onehot}, y, [pn, tn, yn, rows, k, eps]() {
        if (!pn->requires_grad) return;
        pn->ensure_grad();
        T g = yn->grad[0] / T(rows);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t i = 0; i < k; ++i) {
                T t = tn->values[r * k + i];
                if (t == T(0)) continue;
                T p = pn->values[r * k + i];
                if (p < eps) continue;  // clamp active: derivative is zero
                pn->grad[r * k + i] -= g * t / p;
            }
    });
    return y;
}

}  // namespace fmf
