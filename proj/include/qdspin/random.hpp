#pragma once

#include <cstdint>
#include <limits>

namespace qdspin {

/// SplitMix64 used as a keyed, counter-style generator: every (seed, stream)
/// pair yields an independent sequence with O(1) setup, so shots can be
/// simulated in any order or on any worker and still reproduce bit-exactly.
class KeyedEngine {
public:
    using result_type = std::uint64_t;

    KeyedEngine(std::uint64_t seed, std::uint64_t stream, std::uint64_t domain = 0)
        : state_(mix(mix(seed ^ 0x6a09e667f3bcc909ULL) ^ mix(stream + 0x9e3779b97f4a7c15ULL) ^
                     mix(domain ^ 0xbb67ae8584caa73bULL))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    /// Uniform double in [0, 1).
    double uniform() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

} // namespace qdspin
