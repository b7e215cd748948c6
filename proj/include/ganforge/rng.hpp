#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "ganforge/errors.hpp"

namespace ganforge {

// Deterministic random stream. Gaussian draws use an explicit Box-Muller
// transform over raw engine words instead of std::normal_distribution, so
// the sequence depends only on the engine state and serializes cleanly.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(static_cast<std::mt19937_64::result_type>(seed)) {}

    // Uniform in (0, 1].
    double uniform() {
        // 53 usable mantissa bits; +1 keeps the value strictly positive.
        const std::uint64_t word = engine_() >> 11;
        return static_cast<double>(word + 1) * (1.0 / 9007199254740992.0);
    }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * (1.0 - uniform()); }

    // Standard normal via Box-Muller; consumes exactly two engine words.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Uniform integer in [0, n).
    std::uint64_t next_index(std::uint64_t n) {
        if (n == 0) throw ArgumentError("Rng::next_index: n must be positive");
        // Rejection sampling keeps the draw unbiased.
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t word;
        do {
            word = engine_();
        } while (word >= limit);
        return word % n;
    }

    bool bernoulli(double p) { return uniform() <= p; }

    // Fisher-Yates; stable across platforms unlike std::shuffle.
    template <typename Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream; mixing constant is splitmix64's.
    Rng fork(std::uint64_t stream_id) {
        std::uint64_t x = engine_() ^ (0x9E3779B97F4A7C15ULL * (stream_id + 1));
        return Rng(x);
    }

    std::string serialize() const {
        std::ostringstream out;
        out << engine_;
        return out.str();
    }

    static Rng deserialize(const std::string& text) {
        Rng r;
        std::istringstream in(text);
        in >> r.engine_;
        if (in.fail()) throw CheckpointError("Rng::deserialize: malformed engine state");
        return r;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace ganforge
