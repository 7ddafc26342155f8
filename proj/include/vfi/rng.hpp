#pragma once

#include <cmath>
#include <cstdint>

namespace vfi {

// Deterministic, platform-stable RNG (SplitMix64 core). All randomness in the
// toolkit flows from a single root seed through derive(), so any point of a
// run can be reproduced from (seed, stream, counter) without carrying mutable
// generator state across checkpoints.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Named sub-streams keep independent uses of the root seed decorrelated.
    enum Stream : uint64_t {
        kInit = 0x9e3779b97f4a7c15ULL,
        kShuffle = 0x2545f4914f6cdd1dULL,
        kTime = 0x94d049bb133111ebULL,
        kAugment = 0xbf58476d1ce4e5b9ULL,
        kData = 0x6a09e667f3bcc909ULL,
        kFeature = 0x3c6ef372fe94f82bULL,
    };

    static Rng derive(uint64_t root, uint64_t stream, uint64_t counter) {
        uint64_t s = mix(root ^ mix(stream ^ mix(counter)));
        return Rng(s);
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    // Uniform in [0, 1).
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    int uniform_int(int lo, int hi) { // inclusive bounds
        if (hi <= lo) return lo;
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Standard normal via Box-Muller.
    double normal() {
        double u1 = next_double();
        double u2 = next_double();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = last - first;
        for (decltype(n) i = n - 1; i > 0; --i) {
            auto j = static_cast<decltype(n)>(next_u64() % static_cast<uint64_t>(i + 1));
            std::swap(first[i], first[j]);
        }
    }

private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ULL;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebULL;
        z ^= z >> 31;
        return z;
    }

    uint64_t state_;
};

} // namespace vfi
