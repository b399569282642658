#pragma once

// Stride-1 2-D convolution (grouped, optional zero padding), activations and
// pooling, each with a matching backward pass. Convolutions lower to GEMM on a
// per-group basis.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "tpnet/error.hpp"
#include "tpnet/params.hpp"
#include "tpnet/tensor.hpp"

namespace tpnet {

namespace blas {

inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b, int ldb,
                 float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda,
                b, ldb, beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
                 int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda,
                b, ldb, beta, c, ldc);
}

}  // namespace blas

/// Geometry of one convolution layer. Weight layout is
/// (out_channels, in_channels / groups, kernel, kernel); bias is (out_channels).
struct ConvSpec {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::size_t kernel = 3;
    std::size_t padding = 1;
    std::size_t groups = 1;
    bool bias = true;

    std::size_t in_per_group() const { return in_channels / groups; }
    std::size_t out_per_group() const { return out_channels / groups; }
    std::size_t fan_in() const { return in_per_group() * kernel * kernel; }
    std::vector<std::size_t> weight_shape() const { return {out_channels, in_per_group(), kernel, kernel}; }

    void validate(const std::string& name) const {
        if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0)
            fail(ErrorKind::config, name + ": channels " + std::to_string(in_channels) + "->" +
                                        std::to_string(out_channels) + " not divisible by groups " +
                                        std::to_string(groups));
    }
    std::size_t out_size(std::size_t in) const { return in + 2 * padding - kernel + 1; }
};

namespace detail {

// Columns for one batch item and one input-channel group: rows are
// (channel, ky, kx), columns are output pixels.
template <typename T>
void im2col(const T* src, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
            std::size_t oh, std::size_t ow, T* col) {
    for (std::size_t c = 0; c < channels; ++c) {
        const T* plane = src + c * h * w;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((c * k + ky) * k + kx) * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + y * ow;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill_n(dst, ow, T(0));
                        continue;
                    }
                    const T* line = plane + static_cast<std::size_t>(iy) * w;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
                        dst[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) ? T(0) : line[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t pad,
                std::size_t oh, std::size_t ow, T* dst) {
    for (std::size_t c = 0; c < channels; ++c) {
        T* plane = dst + c * h * w;
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((c * k + ky) * k + kx) * oh * ow;
                for (std::size_t y = 0; y < oh; ++y) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    T* line = plane + static_cast<std::size_t>(iy) * w;
                    const T* s = row + y * ow;
                    for (std::size_t x = 0; x < ow; ++x) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(x + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) line[ix] += s[x];
                    }
                }
            }
        }
    }
}

// Few output channels make a single im2col GEMM memory bound; those layers
// use per-tap GEMMs instead.
constexpr std::size_t kTapGemmMaxOut = 16;

inline bool is_pointwise(const ConvSpec& s) { return s.kernel == 1 && s.padding == 0; }

// Tap GEMMs: spatial convolutions run as one GEMM per kernel tap over a zero-padded copy
// of the input. Outputs live on a grid with the padded row pitch, so tap
// (ky, kx) is a constant offset ky * pitch + kx into every padded plane; the
// trailing (kernel - 1) columns of each output row are discarded.
struct TapGrid {
    std::size_t h, w, pad, k, oh, ow;
    std::size_t hp() const { return h + 2 * pad; }
    std::size_t wp() const { return w + 2 * pad; }
    std::size_t plane() const { return hp() * wp(); }
    std::size_t span() const { return (oh - 1) * wp() + ow; }
    std::size_t offset(std::size_t tap) const { return (tap / k) * wp() + tap % k; }
};

template <typename T>
void pad_planes(const T* src, std::size_t channels, const TapGrid& g, T* dst) {
    std::fill_n(dst, channels * g.plane(), T(0));
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < g.h; ++y)
            std::copy_n(src + (c * g.h + y) * g.w, g.w, dst + c * g.plane() + (y + g.pad) * g.wp() + g.pad);
}

// (tap, out, in) copy of one group's (out, in, tap) weights.
template <typename T>
std::vector<T> tap_major(const T* w, std::size_t cout, std::size_t cin, std::size_t taps) {
    std::vector<T> r(taps * cout * cin);
    for (std::size_t o = 0; o < cout; ++o)
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t t = 0; t < taps; ++t) r[(t * cout + o) * cin + c] = w[(o * cin + c) * taps + t];
    return r;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const ConvSpec& spec, const Param<T>& weight, const Param<T>* bias) {
    if (x.c() != spec.in_channels)
        fail(ErrorKind::shape, "conv2d: expected " + std::to_string(spec.in_channels) + " input channels, got " +
                                   x.shape().str());
    if (weight.shape != spec.weight_shape()) fail(ErrorKind::config, "conv2d: weight shape does not match layer");
    if (x.h() + 2 * spec.padding < spec.kernel || x.w() + 2 * spec.padding < spec.kernel)
        fail(ErrorKind::shape, "conv2d: input " + x.shape().str() + " smaller than kernel");
    const std::size_t oh = spec.out_size(x.h()), ow = spec.out_size(x.w());
    const std::size_t pixels = oh * ow;
    const std::size_t cin_g = spec.in_per_group(), cout_g = spec.out_per_group();
    const std::size_t kdim = spec.fan_in();
    Tensor<T> y(Shape{x.n(), spec.out_channels, oh, ow});
    if (detail::is_pointwise(spec)) {
        for (std::size_t b = 0; b < x.n(); ++b)
            for (std::size_t g = 0; g < spec.groups; ++g) {
                T* out = y.plane(b, g * cout_g);
                if (bias)
                    for (std::size_t o = 0; o < cout_g; ++o)
                        std::fill_n(out + o * pixels, pixels, bias->values[g * cout_g + o]);
                blas::gemm(false, false, static_cast<int>(cout_g), static_cast<int>(pixels), static_cast<int>(kdim),
                           T(1), weight.values.data() + g * cout_g * kdim, static_cast<int>(kdim),
                           x.plane(b, g * cin_g), static_cast<int>(pixels), bias ? T(1) : T(0), out,
                           static_cast<int>(pixels));
            }
        return y;
    }
    if (cout_g > detail::kTapGemmMaxOut) {
        std::vector<T> col(kdim * pixels);
        for (std::size_t b = 0; b < x.n(); ++b)
            for (std::size_t g = 0; g < spec.groups; ++g) {
                detail::im2col(x.plane(b, g * cin_g), cin_g, x.h(), x.w(), spec.kernel, spec.padding, oh, ow,
                               col.data());
                T* out = y.plane(b, g * cout_g);
                if (bias)
                    for (std::size_t o = 0; o < cout_g; ++o)
                        std::fill_n(out + o * pixels, pixels, bias->values[g * cout_g + o]);
                blas::gemm(false, false, static_cast<int>(cout_g), static_cast<int>(pixels), static_cast<int>(kdim),
                           T(1), weight.values.data() + g * cout_g * kdim, static_cast<int>(kdim), col.data(),
                           static_cast<int>(pixels), bias ? T(1) : T(0), out, static_cast<int>(pixels));
            }
        return y;
    }
    const detail::TapGrid grid{x.h(), x.w(), spec.padding, spec.kernel, oh, ow};
    const std::size_t taps = spec.kernel * spec.kernel;
    std::vector<T> padded(cin_g * grid.plane()), acc(cout_g * grid.span());
    for (std::size_t g = 0; g < spec.groups; ++g) {
        const auto wt = detail::tap_major(weight.values.data() + g * cout_g * kdim, cout_g, cin_g, taps);
        for (std::size_t b = 0; b < x.n(); ++b) {
            detail::pad_planes(x.plane(b, g * cin_g), cin_g, grid, padded.data());
            for (std::size_t t = 0; t < taps; ++t)
                blas::gemm(false, false, static_cast<int>(cout_g), static_cast<int>(grid.span()),
                           static_cast<int>(cin_g), T(1), wt.data() + t * cout_g * cin_g, static_cast<int>(cin_g),
                           padded.data() + grid.offset(t), static_cast<int>(grid.plane()), t ? T(1) : T(0),
                           acc.data(), static_cast<int>(grid.span()));
            for (std::size_t o = 0; o < cout_g; ++o) {
                T* out = y.plane(b, g * cout_g + o);
                const T shift = bias ? bias->values[g * cout_g + o] : T(0);
                for (std::size_t r = 0; r < oh; ++r) {
                    const T* src = acc.data() + o * grid.span() + r * grid.wp();
                    for (std::size_t c = 0; c < ow; ++c) out[r * ow + c] = src[c] + shift;
                }
            }
        }
    }
    return y;
}

/// Accumulates parameter gradients into grad_w / grad_b (when non-null) and
/// returns the input gradient when `want_input_grad`. A nonzero `grad_from`
/// (ungrouped layers only) restricts the input gradient to channels
/// [grad_from, in_channels), returned as a tensor of just those channels.
template <typename T>
Tensor<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& grad_y, const ConvSpec& spec, const Param<T>& weight,
                          Param<T>* grad_w, Param<T>* grad_b, bool want_input_grad = true,
                          std::size_t grad_from = 0) {
    const std::size_t oh = grad_y.h(), ow = grad_y.w();
    const std::size_t pixels = oh * ow;
    const std::size_t cin_g = spec.in_per_group(), cout_g = spec.out_per_group();
    const std::size_t kdim = spec.fan_in();
    if (grad_from > 0 && (spec.groups != 1 || grad_from > spec.in_channels))
        fail(ErrorKind::unsupported, "conv2d_backward: partial input gradient needs an ungrouped layer");
    const std::size_t kk = spec.kernel * spec.kernel;
    const std::size_t keep = cin_g - grad_from;  // input-gradient channels per group
    Tensor<T> grad_x;
    if (want_input_grad) grad_x = Tensor<T>(Shape{x.n(), x.c() - grad_from, x.h(), x.w()});
    if (grad_b)
        for (std::size_t b = 0; b < x.n(); ++b)
            for (std::size_t o = 0; o < spec.out_channels; ++o) {
                const T* row = grad_y.plane(b, o);
                T acc = 0;
                for (std::size_t p = 0; p < pixels; ++p) acc += row[p];
                grad_b->values[o] += acc;
            }
    if (detail::is_pointwise(spec)) {
        for (std::size_t b = 0; b < x.n(); ++b)
            for (std::size_t g = 0; g < spec.groups; ++g) {
                const T* dy = grad_y.plane(b, g * cout_g);
                if (grad_w)
                    blas::gemm(false, true, static_cast<int>(cout_g), static_cast<int>(kdim), static_cast<int>(pixels),
                               T(1), dy, static_cast<int>(pixels), x.plane(b, g * cin_g), static_cast<int>(pixels),
                               T(1), grad_w->values.data() + g * cout_g * kdim, static_cast<int>(kdim));
                if (want_input_grad && keep > 0)
                    blas::gemm(true, false, static_cast<int>(keep), static_cast<int>(pixels), static_cast<int>(cout_g),
                               T(1), weight.values.data() + g * cout_g * kdim + grad_from, static_cast<int>(kdim), dy,
                               static_cast<int>(pixels), T(1), grad_x.plane(b, g * keep), static_cast<int>(pixels));
            }
        return grad_x;
    }
    if (cout_g > detail::kTapGemmMaxOut) {
        std::vector<T> col(kdim * pixels);
        for (std::size_t b = 0; b < x.n(); ++b)
            for (std::size_t g = 0; g < spec.groups; ++g) {
                const T* dy = grad_y.plane(b, g * cout_g);
                const T* wg = weight.values.data() + g * cout_g * kdim;
                if (grad_w) {
                    detail::im2col(x.plane(b, g * cin_g), cin_g, x.h(), x.w(), spec.kernel, spec.padding, oh, ow,
                                   col.data());
                    blas::gemm(false, true, static_cast<int>(cout_g), static_cast<int>(kdim), static_cast<int>(pixels),
                               T(1), dy, static_cast<int>(pixels), col.data(), static_cast<int>(pixels), T(1),
                               grad_w->values.data() + g * cout_g * kdim, static_cast<int>(kdim));
                }
                if (want_input_grad && keep > 0) {
                    blas::gemm(true, false, static_cast<int>(keep * kk), static_cast<int>(pixels),
                               static_cast<int>(cout_g), T(1), wg + grad_from * kk, static_cast<int>(kdim), dy,
                               static_cast<int>(pixels), T(0), col.data(), static_cast<int>(pixels));
                    detail::col2im_add(col.data(), keep, x.h(), x.w(), spec.kernel, spec.padding, oh, ow,
                                       grad_x.plane(b, g * keep));
                }
            }
        return grad_x;
    }
    const detail::TapGrid grid{x.h(), x.w(), spec.padding, spec.kernel, oh, ow};
    const std::size_t taps = spec.kernel * spec.kernel;
    std::vector<T> padded(grad_w ? cin_g * grid.plane() : 0), dpad(want_input_grad ? keep * grid.plane() : 0);
    std::vector<T> dy(cout_g * grid.span()), gw(grad_w ? taps * cout_g * cin_g : 0);
    for (std::size_t g = 0; g < spec.groups; ++g) {
        const auto wt = detail::tap_major(weight.values.data() + g * cout_g * kdim, cout_g, cin_g, taps);
        std::fill(gw.begin(), gw.end(), T(0));
        for (std::size_t b = 0; b < x.n(); ++b) {
            std::fill(dy.begin(), dy.end(), T(0));
            for (std::size_t o = 0; o < cout_g; ++o)
                for (std::size_t r = 0; r < oh; ++r)
                    std::copy_n(grad_y.plane(b, g * cout_g + o) + r * ow, ow,
                                dy.data() + o * grid.span() + r * grid.wp());
            if (grad_w) {
                detail::pad_planes(x.plane(b, g * cin_g), cin_g, grid, padded.data());
                for (std::size_t t = 0; t < taps; ++t)
                    blas::gemm(false, true, static_cast<int>(cout_g), static_cast<int>(cin_g),
                               static_cast<int>(grid.span()), T(1), dy.data(), static_cast<int>(grid.span()),
                               padded.data() + grid.offset(t), static_cast<int>(grid.plane()), T(1),
                               gw.data() + t * cout_g * cin_g, static_cast<int>(cin_g));
            }
            if (want_input_grad && keep > 0) {
                std::fill(dpad.begin(), dpad.end(), T(0));
                for (std::size_t t = 0; t < taps; ++t)
                    blas::gemm(true, false, static_cast<int>(keep), static_cast<int>(grid.span()),
                               static_cast<int>(cout_g), T(1), wt.data() + t * cout_g * cin_g + grad_from,
                               static_cast<int>(cin_g), dy.data(), static_cast<int>(grid.span()), T(1),
                               dpad.data() + grid.offset(t), static_cast<int>(grid.plane()));
                for (std::size_t c = 0; c < keep; ++c)
                    for (std::size_t r = 0; r < x.h(); ++r)
                        std::copy_n(dpad.data() + c * grid.plane() + (r + grid.pad) * grid.wp() + grid.pad, x.w(),
                                    grad_x.plane(b, g * keep + c) + r * x.w());
            }
        }
        if (grad_w)
            for (std::size_t o = 0; o < cout_g; ++o)
                for (std::size_t c = 0; c < cin_g; ++c)
                    for (std::size_t t = 0; t < taps; ++t)
                        grad_w->values[((g * cout_g + o) * cin_g + c) * taps + t] += gw[(t * cout_g + o) * cin_g + c];
    }
    return grad_x;
}

template <typename T>
Tensor<T> relu(Tensor<T> x) {
    for (auto& v : x.values()) v = v > T(0) ? v : T(0);
    return x;
}

/// `activated` is the forward output; its positive entries pass the gradient.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& activated, Tensor<T> grad) {
    auto a = activated.values();
    auto g = grad.values();
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!(a[i] > T(0))) g[i] = T(0);
    return grad;
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> x) {
    for (auto& v : x.values()) v = T(1) / (T(1) + std::exp(-v));
    return x;
}

template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& s, Tensor<T> grad) {
    auto sv = s.values();
    auto g = grad.values();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= sv[i] * (T(1) - sv[i]);
    return grad;
}

/// Pooling result plus the flat input index each output was taken from.
template <typename T>
struct PoolResult {
    Tensor<T> out;
    std::vector<std::uint32_t> argmax;
};

template <typename T>
PoolResult<T> max_pool2x2(const Tensor<T>& x) {
    if (x.h() < 2 || x.w() < 2) fail(ErrorKind::shape, "max_pool2x2: input " + x.shape().str() + " too small");
    const std::size_t oh = x.h() / 2, ow = x.w() / 2;
    PoolResult<T> r{Tensor<T>(Shape{x.n(), x.c(), oh, ow}), {}};
    r.argmax.resize(r.out.size());
    std::size_t o = 0;
    for (std::size_t b = 0; b < x.n(); ++b)
        for (std::size_t c = 0; c < x.c(); ++c)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
                    std::size_t best = x.index(b, c, 2 * y, 2 * xx);
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t i = x.index(b, c, 2 * y + dy, 2 * xx + dx);
                            if (x.data()[i] > x.data()[best]) best = i;
                        }
                    r.out.data()[o] = x.data()[best];
                    r.argmax[o] = static_cast<std::uint32_t>(best);
                }
    return r;
}

template <typename T>
Tensor<T> max_pool_backward(const Shape& input_shape, const std::vector<std::uint32_t>& argmax,
                            const Tensor<T>& grad) {
    Tensor<T> gx(input_shape);
    for (std::size_t o = 0; o < grad.size(); ++o) gx.data()[argmax[o]] += grad.data()[o];
    return gx;
}

namespace detail {
// Adaptive pooling window [start, end) for output cell i (floor / ceil rule).
inline std::pair<std::size_t, std::size_t> adaptive_window(std::size_t i, std::size_t in, std::size_t out) {
    return {(i * in) / out, ((i + 1) * in + out - 1) / out};
}
}  // namespace detail

template <typename T>
PoolResult<T> adaptive_max_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    PoolResult<T> r{Tensor<T>(Shape{x.n(), x.c(), out_h, out_w}), {}};
    r.argmax.resize(r.out.size());
    std::size_t o = 0;
    for (std::size_t b = 0; b < x.n(); ++b)
        for (std::size_t c = 0; c < x.c(); ++c)
            for (std::size_t i = 0; i < out_h; ++i) {
                const auto [y0, y1] = detail::adaptive_window(i, x.h(), out_h);
                for (std::size_t j = 0; j < out_w; ++j, ++o) {
                    const auto [x0, x1] = detail::adaptive_window(j, x.w(), out_w);
                    std::size_t best = x.index(b, c, y0, x0);
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx) {
                            const std::size_t k = x.index(b, c, y, xx);
                            if (x.data()[k] > x.data()[best]) best = k;
                        }
                    r.out.data()[o] = x.data()[best];
                    r.argmax[o] = static_cast<std::uint32_t>(best);
                }
            }
    return r;
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
    Tensor<T> out(Shape{x.n(), x.c(), out_h, out_w});
    for (std::size_t b = 0; b < x.n(); ++b)
        for (std::size_t c = 0; c < x.c(); ++c)
            for (std::size_t i = 0; i < out_h; ++i) {
                const auto [y0, y1] = detail::adaptive_window(i, x.h(), out_h);
                for (std::size_t j = 0; j < out_w; ++j) {
                    const auto [x0, x1] = detail::adaptive_window(j, x.w(), out_w);
                    T acc = 0;
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx) acc += x.at(b, c, y, xx);
                    out.at(b, c, i, j) = acc / static_cast<T>((y1 - y0) * (x1 - x0));
                }
            }
    return out;
}

template <typename T>
Tensor<T> adaptive_avg_pool_backward(const Shape& input_shape, const Tensor<T>& grad) {
    Tensor<T> gx(input_shape);
    const std::size_t out_h = grad.h(), out_w = grad.w();
    for (std::size_t b = 0; b < grad.n(); ++b)
        for (std::size_t c = 0; c < grad.c(); ++c)
            for (std::size_t i = 0; i < out_h; ++i) {
                const auto [y0, y1] = detail::adaptive_window(i, input_shape.h, out_h);
                for (std::size_t j = 0; j < out_w; ++j) {
                    const auto [x0, x1] = detail::adaptive_window(j, input_shape.w, out_w);
                    const T share = grad.at(b, c, i, j) / static_cast<T>((y1 - y0) * (x1 - x0));
                    for (std::size_t y = y0; y < y1; ++y)
                        for (std::size_t xx = x0; xx < x1; ++xx) gx.at(b, c, y, xx) += share;
                }
            }
    return gx;
}

}  // namespace tpnet
