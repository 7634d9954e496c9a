// Deterministic random source. xoshiro256++ with splitmix64 seeding; the
// state is four u64 words, so it serializes exactly and restores bitwise.
// All randomness in the project flows through explicit Rng instances.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace ecgan {

inline uint64_t splitmix64(uint64_t& x) {
    uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    using State = std::array<uint64_t, 4>;

    Rng() : Rng(0) {}
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    // Independent substream: same seed + different stream id gives an
    // unrelated deterministic sequence.
    Rng(uint64_t seed, uint64_t stream) {
        uint64_t x = seed ^ (0x6a09e667f3bcc909ULL * (stream + 1));
        for (auto& w : s_) w = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the distribution exact.
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller. Consumes two draws per pair; the spare
    // is cached, so call order stays reproducible.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.28318530717958647692 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    bool bernoulli(double p) { return uniform01() < p; }

    State state() const { return s_; }
    bool spare_valid() const { return has_spare_; }
    double spare_value() const { return spare_; }
    void restore(const State& s, bool has_spare = false, double spare = 0.0) {
        s_ = s;
        has_spare_ = has_spare;
        spare_ = spare;
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    State s_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ecgan
