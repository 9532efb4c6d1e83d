#pragma once

#include <cstdint>
#include <random>

namespace cstrata {

using Engine = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based seeding: (seed, i, j) -> stream seed.  Streams for distinct
/// counters are independent, so any execution order yields the same draws.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t i, std::uint64_t j = 0) {
    return mix64(mix64(mix64(seed) ^ (i + 0x632be59bd9b4e019ULL)) ^ (j + 0x8cb92ba72f3d8dd7ULL));
}

inline Engine make_stream(std::uint64_t seed, std::uint64_t i, std::uint64_t j = 0) {
    return Engine(stream_seed(seed, i, j));
}

/// Uniform on [0, 1) with 53 random bits.
inline double uniform01(Engine& eng) { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

}  // namespace cstrata
