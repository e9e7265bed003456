#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace biasmap {

// SplitMix64 generator. All randomness in the toolkit flows through this so
// that results are bit-reproducible across platforms and independent of the
// standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform float in [0, 1), 24 bits of precision.
    float next_float() { return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f); }

    float uniform(float lo, float hi) { return lo + (hi - lo) * next_float(); }

    // Uniform integer in [0, n). Multiply-shift; bias is O(n / 2^64).
    std::uint64_t next_below(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::swap(v[i - 1], v[next_below(i)]);
        }
    }

private:
    std::uint64_t state_;
};

// Derives an independent stream seed from a base seed and a stream id.
// Used to give every (cell, sample) its own generator so that parallel and
// serial execution orders produce identical results.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t id) {
    std::uint64_t z = base ^ (id + 0x9e3779b97f4a7c15ULL + (base << 6) + (base >> 2));
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
    return mix_seed(mix_seed(base, a), b);
}

}  // namespace biasmap
