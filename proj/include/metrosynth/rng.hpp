#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace metrosynth {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
}

} // namespace detail

/// Deterministic xoshiro256++ generator with hand-rolled samplers so that
/// streams are reproducible independently of the standard library
/// implementation. Child streams are derived from (seed, index) pairs, which
/// keeps per-episode randomness independent of the batch size.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = detail::splitmix64(sm);
    }

    /// Derive an independent child stream; used for per-episode streams
    /// (master seed, episode index) and for tagged sub-streams.
    Rng child(std::uint64_t index) const {
        std::uint64_t sm = state_[0] ^ detail::rotl(state_[1], 17) ^
                           (0x9E3779B97F4A7C15ULL * (index + 1));
        return Rng(detail::splitmix64(sm));
    }

    static Rng stream(std::uint64_t master_seed, std::uint64_t index) {
        return Rng(master_seed).child(index);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = detail::rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = detail::rotl(state_[3], 45);
        return result;
    }

    /// Uniform on [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the spare value is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    /// Poisson by inversion (sequential search); adequate for the photon
    /// counting means used here. Falls back to a normal approximation for
    /// very large means to bound the loop.
    std::uint64_t poisson(double mean) {
        if (mean < 0.0) throw std::invalid_argument("Rng::poisson: negative mean");
        if (mean == 0.0) return 0;
        if (mean > 256.0) {
            const double v = mean + std::sqrt(mean) * normal();
            return v <= 0.0 ? 0 : static_cast<std::uint64_t>(std::llround(v));
        }
        const double u = uniform();
        double p = std::exp(-mean);
        double cdf = p;
        std::uint64_t k = 0;
        while (u > cdf && k < 4096) {
            ++k;
            p *= mean / static_cast<double>(k);
            cdf += p;
        }
        return k;
    }

    /// Index sampled from unnormalized nonnegative weights.
    int categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        if (!(total > 0.0)) throw std::invalid_argument("Rng::categorical: zero total weight");
        double u = uniform() * total;
        for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
            u -= weights[i];
            if (u < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

private:
    std::uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool has_spare_ = false;
};

} // namespace metrosynth
