#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace storybooth::rng {

// Counter-based generator: every draw is a pure hash of a key tuple, so any
// entry of a random matrix can be recomputed independently and runs are
// reproducible regardless of evaluation order.

// SplitMix64 finalizer.
inline constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Order-sensitive hash of a key tuple.
inline std::uint64_t key(std::initializer_list<std::uint64_t> parts) {
    std::uint64_t h = 0x243f6a8885a308d3ull;
    for (std::uint64_t p : parts) {
        h = mix64(h ^ mix64(p));
    }
    return h;
}

// FNV-1a, for folding strings into a key tuple.
inline constexpr std::uint64_t hash_bytes(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h = (h ^ c) * 0x100000001b3ull;
    }
    return h;
}

// Uniform draw strictly inside (0, 1): an odd multiple of 2^-53, so every
// step below is exact in double arithmetic (no rounding can reach 0 or 1).
// The open interval makes the dropout threshold exact at both ends: beta_d = 0
// always allows, beta_d = 1 never allows an off-region entry.
inline constexpr double uniform_open(std::uint64_t k) {
    return static_cast<double>(k >> 12) * (1.0 / 4503599627370496.0) // 2^52
           + (1.0 / 9007199254740992.0);                            // 2^53
}

inline double uniform(std::initializer_list<std::uint64_t> parts) {
    return uniform_open(key(parts));
}

// Approximate standard normal via a 12-term Irwin-Hall sum. Avoids libm in
// the draw itself, which keeps generated weights bit-stable.
inline double gaussian(std::uint64_t k) {
    double s = 0.0;
    for (std::uint64_t i = 0; i < 12; ++i) {
        s += uniform_open(mix64(k ^ (0x5851f42d4c957f2dull * (i + 1))));
    }
    return s - 6.0;
}

inline double gaussian(std::initializer_list<std::uint64_t> parts) {
    return gaussian(key(parts));
}

} // namespace storybooth::rng
