#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace resa {

inline constexpr std::uint64_t kSplitMixGolden = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t fnv1a64(std::string_view text) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (const char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    return h;
}

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Element `index` of the SplitMix64 stream keyed by (seed, name). Random access,
/// so any tensor element can be regenerated independently.
constexpr std::uint64_t splitmix64_at(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    const std::uint64_t key = seed ^ fnv1a64(name);
    return splitmix64_mix(key + (index + 1) * kSplitMixGolden);
}

/// Uniform in [0, 1) with 24 random bits (exactly representable in fp32).
constexpr double splitmix_uniform(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return static_cast<double>(splitmix64_at(seed, name, index) >> 40) * 0x1.0p-24;
}

/// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], rounded once to fp32.
inline float splitmix_weight(std::uint64_t seed, std::string_view name, std::uint64_t index, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return static_cast<float>((2.0 * splitmix_uniform(seed, name, index) - 1.0) * bound);
}

/// Sequential SplitMix64 generator for test data and seeded prompts.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        state_ += kSplitMixGolden;
        return splitmix64_mix(state_);
    }

    /// Uniform in [lo, hi).
    float uniform(float lo, float hi) {
        const double u = static_cast<double>(next() >> 40) * 0x1.0p-24;
        return static_cast<float>(lo + (hi - lo) * u);
    }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return next() % n; }

private:
    std::uint64_t state_;
};

} // namespace resa
