#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "slm/common.hpp"

namespace slm {

// splitmix64 finalizer; used to derive independent seed streams.
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Deterministic seed for a named sub-stream, e.g. derive_seed(seed, {kCrop, step, i}).
inline uint64_t derive_seed(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t h = mix64(seed);
    for (uint64_t p : path) h = mix64(h ^ p);
    return h;
}

// mt19937_64 engine with hand-rolled distributions. The stdlib distribution
// objects are implementation-defined, which would break cross-toolchain
// reproducibility of datasets and training runs.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform over [0, n) by rejection; n == 0 is an input error.
    uint64_t uniform_below(uint64_t n) {
        SLM_REQUIRE(n > 0, "Rng::uniform_below: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = engine_();
        while (v >= limit) v = engine_();
        return v % n;
    }

    // Uniform over [lo, hi], inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        SLM_REQUIRE(lo <= hi, "Rng::uniform_int: empty range");
        return lo + static_cast<int64_t>(uniform_below(static_cast<uint64_t>(hi - lo) + 1));
    }

    // Uniform over [0, 1) with 53 random bits.
    double uniform_real() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform_real(double lo, double hi) {
        return lo + (hi - lo) * uniform_real();
    }

    // Box-Muller; one spare value cached.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform_real();
        double u2 = uniform_real();
        while (u1 == 0.0) u1 = uniform_real();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace slm
