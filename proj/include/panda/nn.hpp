#pragma once

// Layer modules built on the autograd ops. A module owns its parameter Vars
// (persistent leaves) and registers them by dotted name for the optimizer and
// the checkpoint writer.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "panda/autograd.hpp"
#include "panda/rng.hpp"

namespace panda::nn {

using ag::Var;

template <typename T>
struct NamedParam {
    std::string name;
    Var<T>* var;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
inline Var<T> make_param(const Shape& shape, Rng& rng, double stddev) {
    return Var<T>(Tensor<T>::randn(shape, rng, static_cast<T>(stddev)), true);
}

inline double he_std(int fan_in) { return std::sqrt(2.0 / fan_in); }

// pick the largest group count <= limit that divides the channel count
inline int pick_groups(int channels, int limit = 8) {
    for (int g = std::min(channels, limit); g > 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

template <typename T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng, bool zero_init = false)
        : stride_(stride), pad_(pad) {
        double s = zero_init ? 0.0 : he_std(in_ch * k * k);
        w = make_param<T>(Shape{out_ch, in_ch, k, k}, rng, s);
        b = Var<T>(Tensor<T>::zeros(Shape{out_ch}), true);
    }

    Var<T> forward(const Var<T>& x) const { return ag::conv2d(x, w, b, stride_, pad_); }

    void params(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }

    Var<T> w, b;

private:
    int stride_ = 1, pad_ = 0;
};

template <typename T>
class ConvTranspose2d {
public:
    ConvTranspose2d() = default;
    ConvTranspose2d(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng)
        : stride_(stride), pad_(pad) {
        w = make_param<T>(Shape{in_ch, out_ch, k, k}, rng, he_std(in_ch * k * k));
        b = Var<T>(Tensor<T>::zeros(Shape{out_ch}), true);
    }

    Var<T> forward(const Var<T>& x) const { return ag::conv_transpose2d(x, w, b, stride_, pad_); }

    void params(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }

    Var<T> w, b;

private:
    int stride_ = 2, pad_ = 1;
};

template <typename T>
class GroupNorm {
public:
    GroupNorm() = default;
    explicit GroupNorm(int channels) : groups_(pick_groups(channels)) {
        gamma = Var<T>(Tensor<T>::full(Shape{channels}, T(1)), true);
        beta = Var<T>(Tensor<T>::zeros(Shape{channels}), true);
    }

    Var<T> forward(const Var<T>& x) const {
        return ag::group_norm(x, gamma, beta, groups_, T(1e-5));
    }

    void params(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".gamma", &gamma});
        out.push_back({prefix + ".beta", &beta});
    }

    Var<T> gamma, beta;

private:
    int groups_ = 1;
};

template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(int in_f, int out_f, Rng& rng) {
        w = make_param<T>(Shape{out_f, in_f}, rng, std::sqrt(1.0 / in_f));
        b = Var<T>(Tensor<T>::zeros(Shape{out_f}), true);
    }

    Var<T> forward(const Var<T>& x) const { return ag::linear(x, w, b); }

    void params(ParamList<T>& out, const std::string& prefix) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }

    Var<T> w, b;
};

// conv 4x4 stride 2 + group norm + leaky relu: one downsampling stage
template <typename T>
class DownBlock {
public:
    DownBlock() = default;
    DownBlock(int in_ch, int out_ch, Rng& rng) : conv(in_ch, out_ch, 4, 2, 1, rng), norm(out_ch) {}

    Var<T> forward(const Var<T>& x) const {
        return ag::leaky_relu(norm.forward(conv.forward(x)), T(0.2));
    }

    void params(ParamList<T>& out, const std::string& prefix) {
        conv.params(out, prefix + ".conv");
        norm.params(out, prefix + ".norm");
    }

    Conv2d<T> conv;
    GroupNorm<T> norm;
};

// transposed conv 4x4 stride 2 + group norm + leaky relu: one upsampling stage
template <typename T>
class UpBlock {
public:
    UpBlock() = default;
    UpBlock(int in_ch, int out_ch, Rng& rng) : conv(in_ch, out_ch, 4, 2, 1, rng), norm(out_ch) {}

    Var<T> forward(const Var<T>& x) const {
        return ag::leaky_relu(norm.forward(conv.forward(x)), T(0.2));
    }

    void params(ParamList<T>& out, const std::string& prefix) {
        conv.params(out, prefix + ".conv");
        norm.params(out, prefix + ".norm");
    }

    ConvTranspose2d<T> conv;
    GroupNorm<T> norm;
};

// pre-activation residual block: out = x + conv(lrelu(norm(conv(lrelu(norm(x))))))
// with a zero-initialized branch this is the identity map exactly
template <typename T>
class ResBlock {
public:
    ResBlock() = default;
    ResBlock(int channels, Rng& rng, bool zero_init_branch = false)
        : norm1(channels),
          conv1(channels, channels, 3, 1, 1, rng),
          norm2(channels),
          conv2(channels, channels, 3, 1, 1, rng, zero_init_branch) {}

    Var<T> forward(const Var<T>& x) const {
        auto h = conv1.forward(ag::leaky_relu(norm1.forward(x), T(0.2)));
        h = conv2.forward(ag::leaky_relu(norm2.forward(h), T(0.2)));
        return ag::add(x, h);
    }

    void params(ParamList<T>& out, const std::string& prefix) {
        norm1.params(out, prefix + ".norm1");
        conv1.params(out, prefix + ".conv1");
        norm2.params(out, prefix + ".norm2");
        conv2.params(out, prefix + ".conv2");
    }

    GroupNorm<T> norm1;
    Conv2d<T> conv1;
    GroupNorm<T> norm2;
    Conv2d<T> conv2;
};

template <typename T>
inline int64_t param_count(const ParamList<T>& params) {
    int64_t n = 0;
    for (const auto& p : params) n += p.var->value().numel();
    return n;
}

template <typename T>
inline void zero_grads(const ParamList<T>& params) {
    for (const auto& p : params) p.var->zero_grad();
}

}  // namespace panda::nn
