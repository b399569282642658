#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tpnet/error.hpp"
#include "tpnet/image.hpp"

namespace tpnet::metrics {

namespace detail {

inline void check_pair(std::span<const double> xs, std::span<const double> ys, const char* what) {
    if (xs.size() != ys.size())
        fail(ErrorKind::data, std::string(what) + ": length mismatch " + std::to_string(xs.size()) + " vs " +
                                  std::to_string(ys.size()));
    if (xs.size() < 2) fail(ErrorKind::data, std::string(what) + ": need at least 2 values");
    for (std::size_t i = 0; i < xs.size(); ++i)
        if (!std::isfinite(xs[i]) || !std::isfinite(ys[i]))
            fail(ErrorKind::numeric, std::string(what) + ": non-finite value at index " + std::to_string(i));
}

}  // namespace detail

/// Pearson linear correlation. Either input being constant is an error.
inline double plcc(std::span<const double> xs, std::span<const double> ys) {
    detail::check_pair(xs, ys, "plcc");
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double dx = xs[i] - mx, dy = ys[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0 || syy == 0) fail(ErrorKind::numeric, "plcc: zero variance input");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of their rank range.
inline std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double srcc(std::span<const double> xs, std::span<const double> ys) {
    detail::check_pair(xs, ys, "srcc");
    const auto rx = average_ranks(xs);
    const auto ry = average_ranks(ys);
    return plcc(rx, ry);
}

/// PSNR in dB; identical inputs yield the explicit infinite sentinel.
struct Psnr {
    bool infinite = false;
    double db = 0;

    static Psnr inf() { return {true, std::numeric_limits<double>::infinity()}; }
    std::string str() const;
};

inline std::string Psnr::str() const {
    if (infinite) return "inf";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", db);
    return buf;
}

inline void check_same_dims(const Image& a, const Image& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        fail(ErrorKind::shape, std::string(what) + ": dimension mismatch " + std::to_string(a.width) + "x" +
                                   std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                                   std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                                   std::to_string(b.channels));
}

inline Psnr psnr(const Image& ref, const Image& test, double max_value = 255.0) {
    check_same_dims(ref, test, "psnr");
    double sse = 0;
    for (std::size_t i = 0; i < ref.pixels.size(); ++i) {
        const double d = static_cast<double>(ref.pixels[i]) - static_cast<double>(test.pixels[i]);
        sse += d * d;
    }
    if (sse == 0) return Psnr::inf();
    const double mse = sse / static_cast<double>(ref.pixels.size());
    return {false, 10.0 * std::log10(max_value * max_value / mse)};
}

/// Luma plane (ITU-R BT.601 weights 0.299, 0.587, 0.114); 1-channel input is copied.
inline std::vector<double> luma(const Image& img) {
    std::vector<double> out(img.width * img.height);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (img.channels == 1) {
            out[i] = img.pixels[i];
        } else {
            const auto* p = &img.pixels[i * img.channels];
            out[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        }
    }
    return out;
}

struct SsimOptions {
    double k1 = 0.01;
    double k2 = 0.03;
    double dynamic_range = 255.0;
    std::size_t window = 11;
    double sigma = 1.5;
};

/// Mean SSIM over the valid (unpadded) region of a Gaussian-windowed map.
inline double ssim_plane(const std::vector<double>& a, const std::vector<double>& b, std::size_t w, std::size_t h,
                         const SsimOptions& opt = {}) {
    const std::size_t win = opt.window;
    if (w < win || h < win)
        fail(ErrorKind::shape, "ssim: image " + std::to_string(w) + "x" + std::to_string(h) + " smaller than the " +
                                   std::to_string(win) + "x" + std::to_string(win) + " window");
    std::vector<double> g(win);
    const double center = static_cast<double>(win - 1) / 2.0;
    for (std::size_t i = 0; i < win; ++i) {
        const double d = static_cast<double>(i) - center;
        g[i] = std::exp(-d * d / (2 * opt.sigma * opt.sigma));
    }
    const double gsum = std::accumulate(g.begin(), g.end(), 0.0);
    for (auto& v : g) v /= gsum;

    const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2);
    const double c2 = std::pow(opt.k2 * opt.dynamic_range, 2);
    const std::size_t ow = w - win + 1, oh = h - win + 1;

    // Separable filtering of a, b, a^2, b^2, ab; horizontal pass first.
    auto filter = [&](auto&& value) {
        std::vector<double> tmp(h * ow), out(oh * ow);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = 0;
                for (std::size_t k = 0; k < win; ++k) acc += g[k] * value(y * w + x + k);
                tmp[y * ow + x] = acc;
            }
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x) {
                double acc = 0;
                for (std::size_t k = 0; k < win; ++k) acc += g[k] * tmp[(y + k) * ow + x];
                out[y * ow + x] = acc;
            }
        return out;
    };
    const auto mu_a = filter([&](std::size_t i) { return a[i]; });
    const auto mu_b = filter([&](std::size_t i) { return b[i]; });
    const auto aa = filter([&](std::size_t i) { return a[i] * a[i]; });
    const auto bb = filter([&](std::size_t i) { return b[i] * b[i]; });
    const auto ab = filter([&](std::size_t i) { return a[i] * b[i]; });

    double total = 0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double va = aa[i] - ma * ma, vb = bb[i] - mb * mb, cov = ab[i] - ma * mb;
        total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return total / static_cast<double>(mu_a.size());
}

inline double ssim(const Image& ref, const Image& test, const SsimOptions& opt = {}) {
    check_same_dims(ref, test, "ssim");
    return ssim_plane(luma(ref), luma(test), ref.width, ref.height, opt);
}

struct ScoredPair {
    double predicted = 0;
    double mos = 0;
    std::string id;
};

struct MetricsReport {
    double plcc = 0;
    double srcc = 0;
    std::size_t n = 0;
};

inline MetricsReport evaluate(std::span<const ScoredPair> pairs) {
    std::vector<double> pred, mos;
    for (const auto& p : pairs) {
        pred.push_back(p.predicted);
        mos.push_back(p.mos);
    }
    return {plcc(pred, mos), srcc(pred, mos), pairs.size()};
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
    j = nlohmann::json{{"plcc", r.plcc}, {"srcc", r.srcc}, {"n", r.n}};
}

}  // namespace tpnet::metrics
