#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace dsp {

// SplitMix64 finalizer. Used to derive independent stream seeds from
// (run seed, stream tag, index) tuples.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0) {
    return mix64(mix64(mix64(seed) ^ tag) ^ index);
}

// Named stream tags so that unrelated consumers never share a random stream.
namespace stream {
inline constexpr std::uint64_t kInit = 0x494e4954;       // parameter init
inline constexpr std::uint64_t kSampling = 0x53414d50;   // DSP draws
inline constexpr std::uint64_t kAugment = 0x41554721;    // color jitter / blur
inline constexpr std::uint64_t kBatch = 0x42415443;      // source/target item picks
inline constexpr std::uint64_t kGenerate = 0x47454e21;   // scene generator
}  // namespace stream

/// Deterministic random stream. All distributions are computed here from raw
/// 64-bit draws so results do not depend on the standard library's
/// distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>(engine_()) * n) >> 64);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box-Muller (one value per call).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace dsp
