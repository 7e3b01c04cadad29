#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace fluxnet {

using Rng = std::mt19937_64;

// splitmix64 finalizer, used to mix seeds and labels into substream seeds.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t fnv1a64_bytes(const void* data, std::size_t n,
                                      std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Independent substream seed derived from a master seed and a label.
// Streams with distinct labels or indices are decorrelated regardless of the
// order in which they are consumed.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label) {
    return mix64(master ^ fnv1a64(label));
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::string_view label,
                                    std::uint64_t index) {
    return mix64(derive_seed(master, label) ^ mix64(index));
}

inline Rng seeded_rng(std::uint64_t seed) { return Rng(seed); }

inline Rng substream(std::uint64_t master, std::string_view label) {
    return Rng(derive_seed(master, label));
}

inline Rng substream(std::uint64_t master, std::string_view label, std::uint64_t index) {
    return Rng(derive_seed(master, label, index));
}

}  // namespace fluxnet
