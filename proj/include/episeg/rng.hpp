#pragma once

#include <cmath>
#include <cstdint>

namespace episeg {

// Deterministic PRNG with platform-independent draws. std::mt19937_64 seeds
// and steps identically everywhere, but the standard distributions do not,
// so bounded/real draws are implemented here.
class Rng {
public:
    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) { reseed(seed); }

    void reseed(uint64_t seed) {
        // splitmix64 expansion of the seed.
        state_ = seed;
        for (int i = 0; i < 4; ++i) next_u64();
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, n). Multiply-shift; bias is < 2^-64 per draw.
    uint64_t uniform_int(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    bool coin() { return (next_u64() & 1) != 0; }

    // Box-Muller, one value per call (the pair's second half is cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0;
        while (u1 == 0) u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Derive an independent stream, e.g. one per worker or per slide.
    Rng fork(uint64_t stream) {
        Rng r(next_u64() ^ (stream * 0xd1b54a32d192ed03ull + 0x2545f4914f6cdd1dull));
        return r;
    }

private:
    uint64_t state_ = 0;
    double spare_ = 0;
    bool have_spare_ = false;
};

}  // namespace episeg
