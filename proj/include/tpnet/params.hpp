#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "tpnet/error.hpp"
#include "tpnet/tensor.hpp"

namespace tpnet {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

enum class ParamRole : std::uint8_t { weight = 0, bias = 1, state = 2 };

template <typename T>
struct Param {
    std::vector<std::size_t> shape;
    std::vector<T> values;
    ParamRole role = ParamRole::weight;

    std::size_t numel() const {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    }
};

/// Ordered named-tensor container. Iteration order is insertion order, which is
/// also the archive order.
template <typename T>
class ParamStore {
public:
    Param<T>& add(const std::string& name, std::vector<std::size_t> shape, ParamRole role) {
        if (index_.count(name)) fail(ErrorKind::integrity, "duplicate parameter name: " + name);
        Param<T> p;
        p.shape = std::move(shape);
        p.role = role;
        p.values.assign(p.numel(), T(0));
        index_[name] = entries_.size();
        names_.push_back(name);
        entries_.push_back(std::move(p));
        return entries_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Param<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) fail(ErrorKind::integrity, "missing parameter: " + name);
        return entries_[it->second];
    }
    const Param<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) fail(ErrorKind::integrity, "missing parameter: " + name);
        return entries_[it->second];
    }

    std::size_t size() const { return entries_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    Param<T>& at(std::size_t i) { return entries_[i]; }
    const Param<T>& at(std::size_t i) const { return entries_[i]; }

    std::size_t total_values() const {
        std::size_t total = 0;
        for (const auto& e : entries_) total += e.values.size();
        return total;
    }

    /// Same names and shapes, all values zero. Used for gradients and optimizer moments.
    ParamStore zeros_like() const {
        ParamStore out;
        for (std::size_t i = 0; i < entries_.size(); ++i) out.add(names_[i], entries_[i].shape, entries_[i].role);
        return out;
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            auto& p = out.add(names_[i], entries_[i].shape, entries_[i].role);
            for (std::size_t k = 0; k < p.values.size(); ++k) p.values[k] = static_cast<U>(entries_[i].values[k]);
        }
        return out;
    }

    void set_zero() {
        for (auto& e : entries_) std::fill(e.values.begin(), e.values.end(), T(0));
    }

    /// Copy of the entries whose names start with `prefix`, with the prefix stripped.
    ParamStore slice(const std::string& prefix) const {
        ParamStore out;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (names_[i].rfind(prefix, 0) == 0) {
                auto& p = out.add(names_[i].substr(prefix.size()), entries_[i].shape, entries_[i].role);
                p.values = entries_[i].values;
            }
        }
        return out;
    }

    /// Append all entries of `other` under `prefix`.
    void merge(const ParamStore& other, const std::string& prefix = "") {
        for (std::size_t i = 0; i < other.size(); ++i) {
            auto& p = add(prefix + other.names()[i], other.at(i).shape, other.at(i).role);
            p.values = other.at(i).values;
        }
    }

    bool operator==(const ParamStore& other) const {
        if (names_ != other.names_) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& a = entries_[i];
            const auto& b = other.entries_[i];
            if (a.shape != b.shape || a.role != b.role || a.values.size() != b.values.size()) return false;
            if (std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(T)) != 0) return false;
        }
        return true;
    }

private:
    std::vector<std::string> names_;
    std::vector<Param<T>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Compare names and shapes of `actual` against `expected`; throws an integrity
/// error listing every missing, unexpected or mis-shaped tensor.
template <typename T, typename U>
void check_layout(const ParamStore<T>& expected, const ParamStore<U>& actual, const std::string& context) {
    std::vector<std::string> missing, extra, mismatched;
    std::set<std::string> expected_names(expected.names().begin(), expected.names().end());
    for (const auto& name : expected.names()) {
        if (!actual.contains(name))
            missing.push_back(name);
        else if (actual.get(name).shape != expected.get(name).shape)
            mismatched.push_back(name);
    }
    for (const auto& name : actual.names())
        if (!expected_names.count(name)) extra.push_back(name);
    if (missing.empty() && extra.empty() && mismatched.empty()) return;
    auto join = [](const std::vector<std::string>& v) {
        std::string s;
        for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
        return s;
    };
    std::string msg = context + ":";
    if (!missing.empty()) msg += " missing [" + join(missing) + "]";
    if (!extra.empty()) msg += " unexpected [" + join(extra) + "]";
    if (!mismatched.empty()) msg += " shape mismatch [" + join(mismatched) + "]";
    fail(ErrorKind::integrity, msg);
}

// ---------------------------------------------------------------------------
// Named-tensor archive
//
//   "TPNA"            4 bytes magic
//   version           u32 (= 1)
//   count             u32
//   count entries:
//     name_len        u32, then name_len bytes of UTF-8
//     role            u8   (0 weight, 1 bias, 2 state)
//     dtype           u8   (1 = float32 little-endian)
//     rank            u32, then rank x u64 dims
//     data            prod(dims) x 4 bytes
//   crc32             u32 over every preceding byte
//
// All integers little-endian.

namespace archive_detail {

constexpr char kMagic[4] = {'T', 'P', 'N', 'A'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat32 = 1;

inline void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

class Reader {
public:
    explicit Reader(std::string_view bytes) : bytes_(bytes) {}

    void read(void* dst, std::size_t n) {
        if (pos_ + n > bytes_.size()) fail(ErrorKind::integrity, "archive truncated");
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        read(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        read(&v, 8);
        return v;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        read(&v, 1);
        return v;
    }
    std::size_t pos() const { return pos_; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

}  // namespace archive_detail

inline std::uint32_t crc32_of(std::string_view bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

template <typename T>
std::string encode_archive(const ParamStore<T>& store) {
    using namespace archive_detail;
    std::string out(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(store.size()));
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& name = store.names()[i];
        const auto& p = store.at(i);
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        out.push_back(static_cast<char>(p.role));
        out.push_back(static_cast<char>(kFloat32));
        put_u32(out, static_cast<std::uint32_t>(p.shape.size()));
        for (auto d : p.shape) put_u64(out, d);
        std::vector<float> tmp(p.values.begin(), p.values.end());
        out.append(reinterpret_cast<const char*>(tmp.data()), tmp.size() * sizeof(float));
    }
    put_u32(out, crc32_of(out));
    return out;
}

template <typename T>
ParamStore<T> decode_archive(std::string_view bytes) {
    using namespace archive_detail;
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        fail(ErrorKind::integrity, "not a tensor archive (bad magic)");
    std::uint32_t stored_crc;
    std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
    if (crc32_of(bytes.substr(0, bytes.size() - 4)) != stored_crc)
        fail(ErrorKind::integrity, "archive checksum mismatch (file corrupted)");
    Reader r(bytes.substr(0, bytes.size() - 4));
    char magic[4];
    r.read(magic, 4);
    if (const auto version = r.u32(); version != kVersion)
        fail(ErrorKind::integrity, "unsupported archive version " + std::to_string(version));
    const std::uint32_t count = r.u32();
    ParamStore<T> store;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name(r.u32(), '\0');
        r.read(name.data(), name.size());
        const auto role = r.u8();
        if (role > 2) fail(ErrorKind::integrity, "bad role tag for " + name);
        if (r.u8() != kFloat32) fail(ErrorKind::integrity, "unsupported dtype for " + name);
        std::vector<std::size_t> shape(r.u32());
        for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
        auto& p = store.add(name, shape, static_cast<ParamRole>(role));
        std::vector<float> tmp(p.numel());
        r.read(tmp.data(), tmp.size() * sizeof(float));
        std::copy(tmp.begin(), tmp.end(), p.values.begin());
    }
    return store;
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "write failed: " + path);
}

template <typename T>
void save_params(const ParamStore<T>& store, const std::string& path) {
    write_file(path, encode_archive(store));
}

template <typename T = float>
ParamStore<T> load_params(const std::string& path) {
    return decode_archive<T>(read_file(path));
}

/// Load and verify against the layout of `expected` (names and shapes).
template <typename T>
ParamStore<T> load_params(const std::string& path, const ParamStore<T>& expected) {
    auto store = load_params<T>(path);
    check_layout(expected, store, path);
    return store;
}

/// CRC32 over the float32 payload of every tensor in order; used to log imports.
template <typename T>
std::uint32_t checksum(const ParamStore<T>& store) {
    std::uint32_t crc = 0;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& name = store.names()[i];
        crc = static_cast<std::uint32_t>(::crc32(crc, reinterpret_cast<const Bytef*>(name.data()), name.size()));
        std::vector<float> tmp(store.at(i).values.begin(), store.at(i).values.end());
        crc = static_cast<std::uint32_t>(
            ::crc32(crc, reinterpret_cast<const Bytef*>(tmp.data()), static_cast<uInt>(tmp.size() * sizeof(float))));
    }
    return crc;
}

}  // namespace tpnet
