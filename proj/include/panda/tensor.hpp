#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "panda/error.hpp"
#include "panda/rng.hpp"

namespace panda {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// Dense row-major tensor. Images and feature maps use [N, C, H, W].
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(shape_numel(shape_)), T(0));
    }

    Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(shape_numel(shape_)), fill);
    }

    static Tensor zeros(const Shape& s) { return Tensor(s); }
    static Tensor full(const Shape& s, T v) { return Tensor(s, v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

    static Tensor randn(const Shape& s, Rng& rng, T stddev = T(1)) {
        Tensor t(s);
        for (auto& v : t.data_) v = static_cast<T>(rng.next_normal()) * stddev;
        return t;
    }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& at(int n, int c, int h, int w) {
        return data_[static_cast<size_t>(((int64_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    const T& at(int n, int c, int h, int w) const {
        return data_[static_cast<size_t>(((int64_t(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            raise(ErrorCode::ShapeMismatch,
                  "reshape " + shape_str(shape_) + " -> " + shape_str(s));
        Tensor out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    void add_(const Tensor& o) {
        for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    }

    void scale_(T s) {
        for (auto& v : data_) v *= s;
    }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T min() const { return *std::min_element(data_.begin(), data_.end()); }
    T max() const { return *std::max_element(data_.begin(), data_.end()); }

    double sum() const {
        double s = 0;
        for (const T& v : data_) s += static_cast<double>(v);
        return s;
    }

    double l2_norm() const {
        double s = 0;
        for (const T& v : data_) s += static_cast<double>(v) * static_cast<double>(v);
        return std::sqrt(s);
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out = Tensor<U>(shape_);
        for (int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
        return out;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

inline void check_same_shape(const Shape& a, const Shape& b, const char* where) {
    if (a != b)
        raise(ErrorCode::ShapeMismatch,
              std::string(where) + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace panda
