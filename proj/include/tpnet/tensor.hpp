#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tpnet/error.hpp"

namespace tpnet {

struct Shape {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    std::size_t numel() const { return n * c * h * w; }
    std::size_t plane() const { return h * w; }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << n << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

/// Dense NCHW feature map. Storage is always shape.numel() contiguous values.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0)) : shape_(shape), data_(shape.numel(), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != shape_.numel())
            fail(ErrorKind::shape, "storage size " + std::to_string(data_.size()) +
                                       " does not match shape " + shape_.str());
    }

    const Shape& shape() const { return shape_; }
    std::size_t n() const { return shape_.n; }
    std::size_t c() const { return shape_.c; }
    std::size_t h() const { return shape_.h; }
    std::size_t w() const { return shape_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    std::size_t index(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
        return ((b * shape_.c + ch) * shape_.h + y) * shape_.w + x;
    }
    T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) { return data_[index(b, ch, y, x)]; }
    const T& at(std::size_t b, std::size_t ch, std::size_t y, std::size_t x) const {
        return data_[index(b, ch, y, x)];
    }

    // Pointer to the (b, ch) plane.
    T* plane(std::size_t b, std::size_t ch) { return data_.data() + (b * shape_.c + ch) * shape_.plane(); }
    const T* plane(std::size_t b, std::size_t ch) const {
        return data_.data() + (b * shape_.c + ch) * shape_.plane();
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    Tensor& operator+=(const Tensor& other) {
        require_same_shape(other, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
        return *this;
    }

    void require_same_shape(const Tensor& other, const char* what) const {
        if (shape_ != other.shape_)
            fail(ErrorKind::shape, std::string(what) + ": shape " + shape_.str() + " vs " + other.shape_.str());
    }

private:
    Shape shape_{};
    std::vector<T> data_;
};

template <typename T>
using FeatureMap = Tensor<T>;

template <typename T>
void require_finite(const Tensor<T>& t, const char* what) {
    if (!t.all_finite()) fail(ErrorKind::numeric, std::string(what) + ": non-finite input");
}

/// Concatenate along channels; all inputs share n, h, w.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
        fail(ErrorKind::shape, "concat: resolution mismatch " + a.shape().str() + " vs " + b.shape().str());
    Tensor<T> out(Shape{a.n(), a.c() + b.c(), a.h(), a.w()});
    const std::size_t plane = a.shape().plane();
    for (std::size_t i = 0; i < a.n(); ++i) {
        std::copy_n(a.plane(i, 0), a.c() * plane, out.plane(i, 0));
        std::copy_n(b.plane(i, 0), b.c() * plane, out.plane(i, a.c()));
    }
    return out;
}

/// Inverse of concat_channels for gradients: split `g` into the first `c_first` channels and the rest.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& g, std::size_t c_first) {
    const Shape s = g.shape();
    Tensor<T> a(Shape{s.n, c_first, s.h, s.w});
    Tensor<T> b(Shape{s.n, s.c - c_first, s.h, s.w});
    const std::size_t plane = s.plane();
    for (std::size_t i = 0; i < s.n; ++i) {
        std::copy_n(g.plane(i, 0), c_first * plane, a.plane(i, 0));
        std::copy_n(g.plane(i, c_first), (s.c - c_first) * plane, b.plane(i, 0));
    }
    return {std::move(a), std::move(b)};
}

/// Slice one batch item, keeping rank 4.
template <typename T>
Tensor<T> batch_item(const Tensor<T>& t, std::size_t b) {
    Tensor<T> out(Shape{1, t.c(), t.h(), t.w()});
    std::copy_n(t.plane(b, 0), t.c() * t.shape().plane(), out.data());
    return out;
}

}  // namespace tpnet
