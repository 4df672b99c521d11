#pragma once

#include <cmath>
#include <cstdint>

#include "seqfm/common.hpp"

namespace seqfm {

// 64-bit avalanche mixer (splitmix64 finalizer). Used both as the embedding
// hash and as the engine behind Rng so that every random choice in the
// project is pinned independently of the standard library.
inline u64 mix64(u64 x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Deterministic PRNG with a fixed algorithm (splitmix64 stream).
class Rng {
public:
    explicit Rng(u64 seed = 0) : state_(seed) {}

    u64 next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        u64 x = state_;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    // Uniform in [0, n). Unbiased enough for n << 2^64 (modulo bias < 2^-40
    // for any n below 2^24, which covers every use here).
    u64 uniform_u64(u64 n) {
        SEQFM_CHECK(n > 0, "uniform_u64: n must be positive");
        return next_u64() % n;
    }

    // Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Standard normal via Box-Muller, one value cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // Derive an independent stream (for per-user / per-item decisions).
    Rng fork(u64 tag) const { return Rng(mix64(state_ ^ mix64(tag))); }

private:
    u64 state_ = 0;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

} // namespace seqfm
