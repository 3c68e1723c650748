#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace mft {

// Deterministic, platform-independent random stream (splitmix64). Every source
// of randomness in the project goes through this class so that a (seed, stream
// key) pair fully pins the result on any machine.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed), seed_(seed) {}

    // Derives an independent substream from a base seed and up to three keys.
    static Rng stream(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
        uint64_t s = mix(seed + 0x9E3779B97F4A7C15ULL);
        s = mix(s ^ mix(a + 0xBF58476D1CE4E5B9ULL));
        s = mix(s ^ mix(b + 0x94D049BB133111EBULL));
        s = mix(s ^ mix(c + 0xD6E8FEB86659FD93ULL));
        return Rng(s);
    }

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix(state_);
    }

    // Uniform double in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    float uniform_f() { return float(next_u64() >> 40) * 0x1.0p-24f; }

    // Uniform integer in [0, n); rejection sampling keeps it unbiased.
    int uniform_int(int n) {
        if (n <= 1) return 0;
        const uint64_t bound = uint64_t(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return int(v % bound);
    }

    // Standard normal via Box-Muller; second value cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 6.283185307179586 * u2;
        cached_ = r * std::sin(t);
        has_cached_ = true;
        return r * std::cos(t);
    }

    float normal_f(float mean = 0.f, float stddev = 1.f) {
        return mean + stddev * float(normal());
    }

    // Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = int(v.size()) - 1; i > 0; --i) {
            std::swap(v[size_t(i)], v[size_t(uniform_int(i + 1))]);
        }
    }

private:
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    uint64_t state_;
    uint64_t seed_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace mft
