#pragma once

#include <string>

#include "fmf/tensor.hpp"

namespace fmf {

// Init scheme: projections and embeddings ~ N(0, 0.02), biases zero,
// conv/deconv weights He-scaled for the ReLU stacks they feed.
inline constexpr double kProjInitStd = 0.02;

template <typename T>
struct Param {
    std::string name;
    Tensor<T> tensor;
    bool decay;  // weight decay applies to rank >= 2 tensors only
};

template <typename T>
struct NamedBuffer {
    std::string name;
    std::vector<T>* data;
};

// Owns the canonical ordered list of trainable tensors plus non-trainable
// state buffers (batch-norm running statistics). Order is build order and is
// part of the determinism contract (optimizer walks it sequentially).
template <typename T>
class ParamRegistry {
public:
    Tensor<T> add(const std::string& name, Tensor<T> t) {
        for (const auto& p : params_) FMF_CHECK(p.name != name, "duplicate parameter name " << name);
        t.set_requires_grad(true);
        params_.push_back(Param<T>{name, t, t.rank() >= 2});
        return t;
    }

    void add_buffer(const std::string& name, std::vector<T>* v) {
        buffers_.push_back(NamedBuffer<T>{name, v});
    }

    std::vector<Param<T>>& params() { return params_; }
    const std::vector<Param<T>>& params() const { return params_; }
    std::vector<NamedBuffer<T>>& buffers() { return buffers_; }
    const std::vector<NamedBuffer<T>>& buffers() const { return buffers_; }

    int64_t count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    const Param<T>* find(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return &p;
        return nullptr;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<Param<T>> params_;
    std::vector<NamedBuffer<T>> buffers_;
};

struct ForwardMode {
    bool batch_stats = false;     // batch statistics vs running statistics
    bool update_running = false;  // fold batch statistics into running state

    static ForwardMode train() { return {true, true}; }
    static ForwardMode frozen_train() { return {true, false}; }  // for gradient oracles
    static ForwardMode eval() { return {false, false}; }
};

template <typename T>
struct Linear {
    Tensor<T> w, b;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t in, int64_t out, Rng& rng) {
        w = reg.add(name + ".w", Tensor<T>::randn(Shape{in, out}, rng, T(kProjInitStd)));
        b = reg.add(name + ".b", Tensor<T>(Shape{out}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return add_rows(matmul(x, w), b); }
};

template <typename T>
struct LayerNormP {
    Tensor<T> g, b;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t d) {
        g = reg.add(name + ".g", Tensor<T>(Shape{d}, T(1)));
        b = reg.add(name + ".b", Tensor<T>(Shape{d}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, g, b); }
};

// LN -> linear -> GELU -> linear, the MLP used by the attention blocks and
// the classification head.
template <typename T>
struct Mlp {
    LayerNormP<T> ln;
    Linear<T> fc1, fc2;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t d, int64_t hidden, int64_t out,
              Rng& rng) {
        ln.init(reg, name + ".ln", d);
        fc1.init(reg, name + ".fc1", d, hidden, rng);
        fc2.init(reg, name + ".fc2", hidden, out, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) const { return fc2.forward(gelu(fc1.forward(ln.forward(x)))); }
};

template <typename T>
struct Conv {
    Tensor<T> w, b;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t k, int64_t cin, int64_t cout,
              Rng& rng, bool he = true) {
        T std = he ? T(std::sqrt(2.0 / double(k * k * cin))) : T(kProjInitStd);
        w = reg.add(name + ".w", Tensor<T>::randn(Shape{k, k, cin, cout}, rng, std));
        b = reg.add(name + ".b", Tensor<T>(Shape{cout}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return conv2d(x, w, b); }
};

template <typename T>
struct Deconv2x2 {
    Tensor<T> w, b;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
        T std = T(std::sqrt(2.0 / double(cin)));
        w = reg.add(name + ".w", Tensor<T>::randn(Shape{2, 2, cin, cout}, rng, std));
        b = reg.add(name + ".b", Tensor<T>(Shape{cout}));
    }

    Tensor<T> forward(const Tensor<T>& x) const { return deconv2d_2x2(x, w, b); }
};

template <typename T>
struct BatchNorm {
    Tensor<T> gamma, beta;
    // heap-held so registered buffer pointers survive layer-struct moves
    std::shared_ptr<BnState<T>> state;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t c) {
        gamma = reg.add(name + ".g", Tensor<T>(Shape{c}, T(1)));
        beta = reg.add(name + ".b", Tensor<T>(Shape{c}));
        state = std::make_shared<BnState<T>>(c);
        reg.add_buffer(name + ".running_mean", &state->running_mean);
        reg.add_buffer(name + ".running_var", &state->running_var);
    }

    Tensor<T> forward(const Tensor<T>& x, const ForwardMode& mode) {
        return batch_norm_2d(x, gamma, beta, *state, mode.batch_stats, mode.update_running);
    }
};

// 3x3 conv + batch norm + ReLU, the unit every upsampling stage uses.
template <typename T>
struct ConvBnRelu {
    Conv<T> conv;
    BatchNorm<T> bn;

    void init(ParamRegistry<T>& reg, const std::string& name, int64_t cin, int64_t cout, Rng& rng) {
        conv.init(reg, name + ".conv", 3, cin, cout, rng);
        bn.init(reg, name + ".bn", cout);
    }

    Tensor<T> forward(const Tensor<T>& x, const ForwardMode& mode) {
        return relu(bn.forward(conv.forward(x), mode));
    }
};

}  // namespace fmf
