#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace tpnet {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001B3ull;
    }
    return h;
}

/// Seed of the named substream `name` under `root` (e.g. "split", "crop", "init", "noise").
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name) {
    return splitmix64(root ^ splitmix64(fnv1a64(name)));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t index) {
    return splitmix64(derive_seed(root, name) + splitmix64(index));
}

using Rng = std::mt19937_64;

}  // namespace tpnet
