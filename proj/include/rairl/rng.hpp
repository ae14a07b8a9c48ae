#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>

#include "rairl/error.hpp"

namespace rairl {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Child seed for an independent stream. Streams derived from the same base
/// with different tags do not overlap in practice.
inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) noexcept {
    return splitmix64(base ^ splitmix64(tag + 0x632be59bd9b4e019ULL));
}

inline constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag,
                                           std::uint64_t sub) noexcept {
    return derive_seed(derive_seed(base, tag), sub);
}

/// Deterministic random stream. Only the raw 64-bit engine output is used, so
/// results do not depend on the standard library's distribution classes.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform index in [0, n).
    std::size_t index(std::size_t n) {
        if (n == 0) {
            throw InvalidInput("Rng::index: empty range");
        }
        // Lemire-style multiply-shift on the high bits; bias is below 2^-50 for our sizes.
        const auto hi = static_cast<unsigned __int128>(engine_()) * n;
        return static_cast<std::size_t>(hi >> 64);
    }

    /// Standard normal via Box-Muller (one value per call, no cached spare).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    /// Draw an index with probability proportional to `weights` (non-negative).
    std::size_t categorical(std::span<const double> weights) {
        double total = 0.0;
        for (double w : weights) {
            total += w;
        }
        if (!(total > 0.0)) {
            throw InvalidInput("Rng::categorical: weights must have positive mass");
        }
        const double u = uniform() * total;
        double acc = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            if (weights[i] > 0.0) {
                last_positive = i;
            }
            acc += weights[i];
            if (u < acc) {
                return i;
            }
        }
        return last_positive;
    }

    std::string state() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void restore(const std::string& text) {
        std::istringstream is(text);
        is >> engine_;
        if (is.fail()) {
            throw FormatError("Rng::restore: malformed engine state");
        }
    }

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

}  // namespace rairl
