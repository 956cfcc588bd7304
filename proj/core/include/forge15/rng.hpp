#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace forge15 {

// Deterministic draws on top of std::mt19937_64. The standard specifies the
// engine bit-exactly but not the distributions, so the mappings from raw
// 64-bit words to bounded ints / unit doubles live here.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform in [0, n). Fixed-point multiply keeps the mapping portable.
    uint64_t bounded(uint64_t n) {
        return static_cast<uint64_t>(
            (static_cast<unsigned __int128>(engine_()) * n) >> 64);
    }

    // Uniform float in [-s, s], exact in binary32: the 25-bit integer mantissa
    // and the power-of-two divisor make the result independent of FP flags.
    float uniform_sym(float s) {
        const auto u = static_cast<int64_t>(engine_() >> 39);  // 25 bits
        const float unit = static_cast<float>(u - (1 << 24)) / 16777216.0f;
        return unit * s;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(bounded(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 engine_;
};

// SplitMix64 step, used to derive independent stream seeds from (seed, tags).
inline uint64_t mix_seed(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t s = mix_seed(seed ^ 0xa0761d6478bd642fULL);
    s = mix_seed(s ^ a);
    s = mix_seed(s ^ b);
    s = mix_seed(s ^ c);
    return s;
}

}  // namespace forge15
