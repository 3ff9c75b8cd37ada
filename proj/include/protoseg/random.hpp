#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace protoseg {

/// All randomness flows from a root seed through derive_seed, so results do
/// not depend on call order across components.
using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream)
{
    return splitmix64(seed ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

// Portable draws (std distributions are implementation-defined).
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi)
{
    return lo == hi ? lo : lo + (hi - lo) * uniform01(rng);
}

inline int uniform_int(Rng& rng, int n)  // [0, n)
{
    return static_cast<int>(uniform01(rng) * n) % n;
}

inline double normal(Rng& rng)
{
    double u1 = uniform01(rng);
    while (u1 <= 0) u1 = uniform01(rng);
    const double u2 = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace protoseg
