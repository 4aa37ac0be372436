#pragma once

// Seeded RNG utilities. Every random draw in the library flows from an
// explicit seed so runs are reproducible; independent streams are derived
// with splitmix64 so (seed, purpose, index) always gives the same stream.

#include <cstdint>
#include <random>
#include <string_view>

namespace taa {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Stable stream id from a label, mixed into the seed; lets callers derive
// per-purpose substreams ("template", "augment", ...) that do not collide.
inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view label,
                              std::uint64_t index = 0) {
    std::uint64_t h = splitmix64(seed);
    for (char c : label) h = splitmix64(h ^ static_cast<unsigned char>(c));
    return splitmix64(h ^ index);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    static Rng derive(std::uint64_t seed, std::string_view label,
                      std::uint64_t index = 0) {
        return Rng(mix_seed(seed, label, index));
    }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(engine_);
    }

    // Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
    }

    std::mt19937_64& engine() { return engine_; }

  private:
    std::mt19937_64 engine_;
};

} // namespace taa
