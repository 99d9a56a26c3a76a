#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace dseg {

// All randomness in the project flows through this header. The generators are
// self-contained so that seeded results are bit-identical across platforms and
// standard-library versions (std::normal_distribution is not portable).

// splitmix64: tiny, fast, passes BigCrush as a mixer. Good enough for toy
// encoders, synthetic scenes and noise.
inline uint64_t splitmix64_next(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// FNV-1a over arbitrary bytes; used to derive stable sub-seeds so that adding
// a new consumer never perturbs existing streams.
inline uint64_t fnv1a64(const void* data, std::size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t seed, uint64_t value) {
    uint64_t buf[2] = {seed, value};
    return fnv1a64(buf, sizeof(buf));
}

inline uint64_t hash_combine(uint64_t seed, std::string_view s) {
    uint64_t h = fnv1a64(&seed, sizeof(seed));
    return fnv1a64(s.data(), s.size(), h);
}

// Stateful generator over splitmix64 with uniform/normal draws.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() { return splitmix64_next(state_); }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in (0, 1]; safe as a log() argument.
    double uniform_pos() {
        return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    int range(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
    }

    // Standard normal via Box-Muller (one value per pair of uniforms; the
    // second value is discarded to keep the draw count per call fixed).
    double normal() {
        double u1 = uniform_pos();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

private:
    uint64_t state_;
};

}  // namespace dseg
