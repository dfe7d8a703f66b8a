#pragma once

// Seeded generator used for every random quantity in the project.
//
// The algorithm is SplitMix64 (Steele, Lea & Flood 2014) and the float
// conversions below use only exact integer-to-float steps plus one multiply
// and one add, so a given seed yields the same bits on every IEEE-754
// platform. No <random> distributions are used because their output is
// implementation-defined.

#include <cstdint>

namespace laq {

class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 24 bits of resolution.
    float unit() { return static_cast<float>(next() >> 40) * 0x1.0p-24f; }

    // Uniform in [-bound, bound).
    float symmetric(float bound) { return (unit() * 2.0f - 1.0f) * bound; }

    // Unbiased enough for the small ranges used here (bound << 2^64).
    std::uint64_t below(std::uint64_t bound) { return next() % bound; }

    // Approximately standard normal: centered Irwin-Hall sum of four uniforms,
    // rescaled to unit variance. Avoids libm so results stay bit-exact.
    float approx_normal() {
        float s = unit() + unit() + unit() + unit() - 2.0f;
        return s * 1.7320508f;
    }

private:
    std::uint64_t state_;
};

// Derive an independent stream for a sub-component (layer, head, ...).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    SplitMix64 g(seed ^ (tag * 0xD1B54A32D192ED03ULL));
    return g.next();
}

} // namespace laq
