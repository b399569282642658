#pragma once

// Dataset ingestion (CSV manifests with MOS labels), deterministic splitting,
// training crops and synthetic degradations.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tpnet/error.hpp"
#include "tpnet/image.hpp"
#include "tpnet/rng.hpp"

namespace tpnet {

enum class Split { unassigned, train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
        case Split::unassigned: break;
    }
    return "unassigned";
}

struct SampleRecord {
    std::string image_path;  // resolved against the manifest directory
    double mos = 0;
    double mos_normalized = 0;
    std::string group_id;  // empty when absent
    std::string method_tag;
    std::string scale_tag;
    Split split = Split::unassigned;
};

struct Manifest {
    std::vector<SampleRecord> records;
    double dataset_min = 0;
    double dataset_max = 0;
    bool degenerate_labels = false;  // all MOS equal: every mos_normalized is 0.5
    std::uint64_t split_seed = 0;

    std::vector<SampleRecord> subset(Split s) const {
        std::vector<SampleRecord> out;
        std::copy_if(records.begin(), records.end(), std::back_inserter(out),
                     [s](const SampleRecord& r) { return r.split == s; });
        return out;
    }
};

/// Min-max label normalization over the whole manifest.
inline void normalize_labels(Manifest& m) {
    if (m.records.empty()) return;
    const auto [lo, hi] = std::minmax_element(m.records.begin(), m.records.end(),
                                              [](const auto& a, const auto& b) { return a.mos < b.mos; });
    m.dataset_min = lo->mos;
    m.dataset_max = hi->mos;
    m.degenerate_labels = !(m.dataset_max > m.dataset_min);
    for (auto& r : m.records)
        r.mos_normalized =
            m.degenerate_labels ? 0.5 : (r.mos - m.dataset_min) / (m.dataset_max - m.dataset_min);
}

// ---------------------------------------------------------------------------
// CSV

/// Splits one CSV line; supports double-quoted fields with "" escapes.
inline std::vector<std::string> parse_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return out + "\"";
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::optional<std::size_t> column(const std::string& name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) return std::nullopt;
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::io, "cannot open CSV " + path);
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        auto fields = parse_csv_line(line);
        if (first) {
            t.header = std::move(fields);
            first = false;
        } else {
            t.rows.push_back(std::move(fields));
        }
    }
    if (first) fail(ErrorKind::data, "empty CSV " + path);
    return t;
}

inline double parse_double(const std::string& s, const std::string& context) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
        if (pos != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::data, context + ": cannot parse number '" + s + "'");
    }
}

/// Loads `image_path,mos[,group_id,method,scale]`. Rows are numbered from 1
/// (the header is not counted) in error messages. Relative image paths are
/// resolved against the manifest's directory.
inline Manifest load_manifest(const std::string& csv_path, bool check_files = true) {
    const auto table = read_csv(csv_path);
    const auto path_col = table.column("image_path");
    const auto mos_col = table.column("mos");
    if (!path_col || !mos_col) {
        std::string missing = !path_col ? "image_path" : "";
        if (!mos_col) missing += std::string(missing.empty() ? "" : ", ") + "mos";
        fail(ErrorKind::data, csv_path + ": missing required column(s) " + missing);
    }
    const auto group_col = table.column("group_id");
    const auto method_col = table.column("method");
    const auto scale_col = table.column("scale");
    const auto base = std::filesystem::path(csv_path).parent_path();

    Manifest m;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
        const auto& row = table.rows[i];
        const std::string where = csv_path + " row " + std::to_string(i + 1);
        if (row.size() < table.header.size())
            fail(ErrorKind::data, where + ": expected " + std::to_string(table.header.size()) + " fields, got " +
                                      std::to_string(row.size()));
        SampleRecord r;
        std::filesystem::path p(row[*path_col]);
        r.image_path = p.is_absolute() ? p.string() : (base / p).string();
        r.mos = parse_double(row[*mos_col], where);
        if (group_col) r.group_id = row[*group_col];
        if (method_col) r.method_tag = row[*method_col];
        if (scale_col) r.scale_tag = row[*scale_col];
        if (check_files && !std::filesystem::exists(r.image_path))
            fail(ErrorKind::data, where + ": image file not found: " + r.image_path);
        m.records.push_back(std::move(r));
    }
    normalize_labels(m);
    if (m.degenerate_labels)
        std::clog << "warning: " << csv_path << ": all MOS values are equal; normalized labels set to 0.5\n";
    return m;
}

inline void write_manifest(const Manifest& m, const std::string& csv_path) {
    std::ofstream out(csv_path, std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + csv_path);
    const auto base = std::filesystem::path(csv_path).parent_path();
    out << "image_path,mos,group_id,method,scale\n";
    char num[64];
    for (const auto& r : m.records) {
        std::snprintf(num, sizeof(num), "%.17g", r.mos);
        auto rel = std::filesystem::path(r.image_path).lexically_relative(base);
        const std::string path = rel.empty() ? r.image_path : rel.string();
        out << csv_escape(path) << ',' << num << ',' << csv_escape(r.group_id) << ',' << csv_escape(r.method_tag)
            << ',' << csv_escape(r.scale_tag) << '\n';
    }
}

// ---------------------------------------------------------------------------
// Splitting

template <typename It>
void seeded_shuffle(It first, It last, Rng& rng) {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(first[i - 1], first[pick(rng)]);
    }
}

struct SplitCounts {
    std::size_t train = 0, val = 0, test = 0;
};

/// 60/20/20 by count; the rounding remainder goes to train.
inline SplitCounts split_counts(std::size_t n) {
    SplitCounts c;
    c.val = n / 5;
    c.test = n / 5;
    c.train = n - c.val - c.test;
    return c;
}

/// Seeded shuffle then 60/20/20 partition. With `group_aware`, records sharing a
/// group_id land in one split (records without a group are their own group);
/// counts then follow group boundaries.
inline Manifest split_manifest(Manifest m, std::uint64_t seed, bool group_aware = false) {
    const std::size_t n = m.records.size();
    if (n < 5) fail(ErrorKind::data, "split needs at least 5 records, got " + std::to_string(n));
    m.split_seed = seed;
    Rng rng(derive_seed(seed, "split"));
    const auto target = split_counts(n);
    if (!group_aware) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        seeded_shuffle(order.begin(), order.end(), rng);
        for (std::size_t k = 0; k < n; ++k) {
            auto& r = m.records[order[k]];
            r.split = k < target.val ? Split::val : (k < target.val + target.test ? Split::test : Split::train);
        }
        return m;
    }
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& g = m.records[i].group_id;
        groups[g.empty() ? "\x01record:" + std::to_string(i) : g].push_back(i);
    }
    std::vector<const std::vector<std::size_t>*> order;
    for (const auto& [_, members] : groups) order.push_back(&members);
    seeded_shuffle(order.begin(), order.end(), rng);
    std::size_t val = 0, test = 0;
    for (const auto* members : order) {
        Split s = Split::train;
        if (val < target.val) {
            s = Split::val;
            val += members->size();
        } else if (test < target.test) {
            s = Split::test;
            test += members->size();
        }
        for (auto i : *members) m.records[i].split = s;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Geometry

inline Image crop(const Image& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
    if (x0 + w > img.width || y0 + h > img.height) fail(ErrorKind::shape, "crop window outside the image");
    Image out(w, h, img.channels);
    for (std::size_t y = 0; y < h; ++y)
        std::copy_n(&img.pixels[((y0 + y) * img.width + x0) * img.channels], w * img.channels,
                    &out.pixels[y * w * img.channels]);
    return out;
}

/// Largest centered window whose sides are multiples of `multiple`.
inline Image center_crop_to_multiple(const Image& img, std::size_t multiple) {
    const std::size_t w = img.width / multiple * multiple, h = img.height / multiple * multiple;
    if (w == img.width && h == img.height) return img;
    return crop(img, (img.width - w) / 2, (img.height - h) / 2, w, h);
}

namespace detail {
// Mirror index without repeating the edge sample (reflect-101).
inline std::size_t reflect(std::ptrdiff_t i, std::size_t n) {
    if (n == 1) return 0;
    const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
    i %= period;
    if (i < 0) i += period;
    return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}
}  // namespace detail

inline Image reflect_pad(const Image& img, std::size_t w, std::size_t h) {
    const std::ptrdiff_t left = static_cast<std::ptrdiff_t>((w - img.width) / 2);
    const std::ptrdiff_t top = static_cast<std::ptrdiff_t>((h - img.height) / 2);
    Image out(w, h, img.channels);
    for (std::size_t y = 0; y < h; ++y) {
        const auto sy = detail::reflect(static_cast<std::ptrdiff_t>(y) - top, img.height);
        for (std::size_t x = 0; x < w; ++x) {
            const auto sx = detail::reflect(static_cast<std::ptrdiff_t>(x) - left, img.width);
            for (std::size_t c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(sy, sx, c);
        }
    }
    return out;
}

/// Seeded size x size crop. Sides shorter than `size` (but at least `min_side`)
/// are reflect-padded first.
inline Image sample_crop(const Image& img, std::size_t size, std::uint64_t seed, std::size_t min_side = 128) {
    if (img.width < min_side || img.height < min_side)
        fail(ErrorKind::shape, "image " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                   " is below the minimum size " + std::to_string(min_side) + "x" +
                                   std::to_string(min_side));
    if (2 * img.width - 1 < size || 2 * img.height - 1 < size)
        fail(ErrorKind::shape, "image too small to reflect-pad to " + std::to_string(size));
    const Image* src = &img;
    Image padded;
    if (img.width < size || img.height < size) {
        padded = reflect_pad(img, std::max(size, img.width), std::max(size, img.height));
        src = &padded;
    }
    if (src->width == size && src->height == size) return *src;
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> dx(0, src->width - size), dy(0, src->height - size);
    const std::size_t x0 = dx(rng);
    const std::size_t y0 = dy(rng);
    return crop(*src, x0, y0, size, size);
}

// ---------------------------------------------------------------------------
// Synthetic degradations

enum class DegradationKind { gaussian_blur, additive_noise, bicubic_updown };

inline const char* to_string(DegradationKind k) {
    switch (k) {
        case DegradationKind::gaussian_blur: return "gaussian_blur";
        case DegradationKind::additive_noise: return "additive_noise";
        case DegradationKind::bicubic_updown: return "bicubic_updown";
    }
    return "?";
}

inline DegradationKind parse_degradation(const std::string& s) {
    if (s == "gaussian_blur" || s == "blur") return DegradationKind::gaussian_blur;
    if (s == "additive_noise" || s == "noise") return DegradationKind::additive_noise;
    if (s == "bicubic_updown" || s == "bicubic") return DegradationKind::bicubic_updown;
    fail(ErrorKind::config, "unknown degradation kind '" + s + "'");
}

struct DegradationSpec {
    DegradationKind kind = DegradationKind::gaussian_blur;
    double severity = 0;
    std::uint64_t seed = 0;
};

/// Labeling rule for synthetic data: exp(-severity).
inline double pseudo_mos(double severity) { return std::exp(-severity); }

inline std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L)); }

inline Image gaussian_blur(const Image& img, double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= sum;
    const std::size_t w = img.width, h = img.height, ch = img.channels;
    std::vector<double> tmp(w * h * ch);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * img.at(y, detail::reflect(static_cast<std::ptrdiff_t>(x) + i, w), c);
                tmp[(y * w + x) * ch + c] = acc;
            }
    Image out(w, h, ch);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0;
                for (int i = -radius; i <= radius; ++i)
                    acc += k[i + radius] * tmp[(detail::reflect(static_cast<std::ptrdiff_t>(y) + i, h) * w + x) * ch + c];
                out.at(y, x, c) = to_u8(acc);
            }
    return out;
}

/// Zero-mean Gaussian noise of standard deviation `sigma` (8-bit units), one
/// draw per sample in raster order from mt19937_64 seeded with `seed`.
inline Image additive_noise(const Image& img, double sigma, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    Image out = img;
    for (auto& p : out.pixels) p = to_u8(static_cast<double>(p) + noise(rng));
    return out;
}

namespace detail {
inline double cubic(double x) {
    constexpr double a = -0.5;
    x = std::abs(x);
    if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
    if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
    return 0;
}
}  // namespace detail

/// Bicubic (Keys, a = -0.5) resampling with half-pixel centers and clamped edges.
inline Image resize_bicubic(const Image& img, std::size_t out_w, std::size_t out_h) {
    const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
    const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
    auto clampi = [](std::ptrdiff_t v, std::size_t n) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
    };
    Image out(out_w, out_h, img.channels);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
        const auto iy = static_cast<std::ptrdiff_t>(std::floor(fy));
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
            const auto ix = static_cast<std::ptrdiff_t>(std::floor(fx));
            for (std::size_t c = 0; c < img.channels; ++c) {
                double acc = 0;
                for (std::ptrdiff_t m = -1; m <= 2; ++m) {
                    const double wy = detail::cubic(fy - static_cast<double>(iy + m));
                    for (std::ptrdiff_t n = -1; n <= 2; ++n)
                        acc += wy * detail::cubic(fx - static_cast<double>(ix + n)) *
                               img.at(clampi(iy + m, img.height), clampi(ix + n, img.width), c);
                }
                out.at(y, x, c) = to_u8(acc);
            }
        }
    }
    return out;
}

/// Seeded stand-in for a pristine photograph: a smooth color field carrying
/// oriented gratings spread over every frequency band, plus hard-edged discs,
/// so each degradation kind leaves a comparable trace on every source.
inline Image procedural_source(std::size_t w, std::size_t h, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "source"));
    std::uniform_real_distribution<double> u(0.0, 1.0);
    constexpr double pi = 3.14159265358979323846;
    constexpr int kWaves = 16;
    struct Wave {
        double fx, fy, phase, amp[3];
    };
    struct Disc {
        double cx, cy, r, color[3];
    };
    std::vector<Wave> waves(kWaves);
    for (int i = 0; i < kWaves; ++i) {
        // one wave per log-spaced band between 0.01 and 0.45 cycles per pixel
        const double band = (i + u(rng)) / kWaves;
        const double freq = 0.01 * std::pow(45.0, band), angle = u(rng) * pi;
        auto& wv = waves[static_cast<std::size_t>(i)];
        wv = {freq * std::cos(angle), freq * std::sin(angle), 2 * pi * u(rng), {}};
        for (auto& a : wv.amp) a = 10 * (0.8 + 0.4 * u(rng));
    }
    std::vector<Disc> discs(5);
    for (auto& d : discs) {
        d = {u(rng) * static_cast<double>(w), u(rng) * static_cast<double>(h),
             (0.05 + 0.2 * u(rng)) * static_cast<double>(std::min(w, h)), {}};
        for (auto& c : d.color) c = 255 * u(rng);
    }
    double base[3];
    for (auto& b : base) b = 70 + 110 * u(rng);
    Image img(w, h, 3);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                double v = base[c];
                for (const auto& d : discs) {
                    const double dx = static_cast<double>(x) - d.cx, dy = static_cast<double>(y) - d.cy;
                    if (dx * dx + dy * dy < d.r * d.r) v = 0.5 * v + 0.5 * d.color[c];
                }
                for (const auto& wv : waves)
                    v += wv.amp[c] * std::sin(2 * pi * (wv.fx * static_cast<double>(x) + wv.fy * static_cast<double>(y)) +
                                              wv.phase);
                img.at(y, x, c) = to_u8(v);
            }
    return img;
}

struct Degraded {
    Image image;
    double pseudo_mos = 1.0;
};

inline Degraded synthesize(const Image& source, const DegradationSpec& spec) {
    if (!(spec.severity >= 0) || !std::isfinite(spec.severity))
        fail(ErrorKind::config, "degradation severity must be finite and >= 0");
    Degraded out{source, pseudo_mos(spec.severity)};
    if (spec.severity == 0) return out;
    switch (spec.kind) {
        case DegradationKind::gaussian_blur:
            out.image = gaussian_blur(source, spec.severity);
            break;
        case DegradationKind::additive_noise:
            out.image = additive_noise(source, spec.severity, derive_seed(spec.seed, "noise"));
            break;
        case DegradationKind::bicubic_updown: {
            const double factor = 1.0 + spec.severity;
            const auto dw = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(source.width / factor)));
            const auto dh = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(source.height / factor)));
            out.image = resize_bicubic(resize_bicubic(source, dw, dh), source.width, source.height);
            break;
        }
    }
    return out;
}

}  // namespace tpnet
