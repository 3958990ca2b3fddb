#pragma once

#include <cmath>
#include <cstdint>

#include "droplab/error.hpp"

namespace droplab {

// Counter-based deterministic RNG. Every draw is a pure function of
// (seed, stream, counter), so a value can be replayed from its coordinates
// alone: identical (seed, stream, index) gives an identical output on every
// platform and thread count. Streams are derived, never incremented, which
// keeps parallel consumers (per-layer masks, per-step batches) independent.
class Rng {
public:
    explicit Rng(uint64_t seed, uint64_t stream = 0, uint64_t counter = 0)
        : seed_(seed), stream_(stream), counter_(counter) {}

    // SplitMix64 finalizer; full avalanche on 64 bits.
    static constexpr uint64_t mix64(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    // Stateless draw at an explicit counter position.
    uint64_t at(uint64_t index) const {
        uint64_t h = mix64(seed_);
        h = mix64(h ^ (stream_ * 0xd1342543de82ef95ull + 0x9e3779b97f4a7c15ull));
        return mix64(h ^ (index * 0x2545f4914f6cdd1dull + 0xbf58476d1ce4e5b9ull));
    }

    uint64_t next_u64() { return at(counter_++); }

    // Uniform in [0, 1): top 53 bits scaled, exact in f64.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller; consumes exactly two draws.
    double normal() {
        const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; // (0, 1]
        const double u2 = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // Unbiased-to-2^-64 integer in [0, n).
    uint64_t below(uint64_t n) {
        if (n == 0) throw DomainError("Rng::below: n must be positive");
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Child generator on an independent stream; counter starts at zero.
    Rng derive(uint64_t substream) const {
        return Rng(seed_, mix64(stream_ + 0x9e3779b97f4a7c15ull * (substream + 1)));
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t counter_;
};

// Substream purposes. Each consumer derives its stream from these constants
// plus its own coordinates (layer id, step, ...), so no two consumers ever
// share a counter sequence.
namespace streams {
inline constexpr uint64_t kParamInit = 1;
inline constexpr uint64_t kDropoutMask = 2;
inline constexpr uint64_t kBatchSampling = 3;
inline constexpr uint64_t kEvalBatches = 4;
inline constexpr uint64_t kGdvBatches = 5;
inline constexpr uint64_t kUnitOrder = 6;
inline constexpr uint64_t kSynthText = 7;
} // namespace streams

} // namespace droplab
