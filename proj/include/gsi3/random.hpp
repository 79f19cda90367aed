#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

namespace gsi3 {

/// Platform-stable random source. std::mt19937_64 output is fully specified by the
/// standard, but the std distributions are not, so the conversions live here.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Seeds from several words (seed, stream, index, ...) through std::seed_seq.
    Rng(std::initializer_list<std::uint64_t> words) {
        std::vector<std::uint32_t> parts;
        for (auto w : words) {
            parts.push_back(static_cast<std::uint32_t>(w));
            parts.push_back(static_cast<std::uint32_t>(w >> 32));
        }
        std::seed_seq seq(parts.begin(), parts.end());
        engine_.seed(seq);
    }

    std::uint64_t bits() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * n); }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace gsi3
