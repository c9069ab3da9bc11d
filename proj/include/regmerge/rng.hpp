#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace regmerge {

/// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
///
/// A counter-based generator: output block n of stream s under key k is a pure
/// function of (k, s, n), so every draw is reproducible on any platform and
/// independent streams never need to be split or jumped. Floating-point
/// conversions below use only integer arithmetic and exact scaling; normal
/// draws go through std::log/std::cos and are therefore libm-dependent in the
/// last bit.
class Philox {
public:
    using Block = std::array<std::uint32_t, 4>;

    explicit Philox(std::uint64_t key, std::uint64_t stream = 0) : key_(key), stream_(stream) {}

    /// The n-th 128-bit output block of this stream.
    Block block(std::uint64_t n) const;

    /// Sequential interface on top of the counter.
    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller.
    double normal();
    /// Uniform integer in [0, n) by rejection; n > 0.
    std::uint64_t below(std::uint64_t n);

    /// Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::uint64_t key_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
    Block buffer_{};
    int buffered_ = 0;  // 32-bit words left in buffer_
    bool has_spare_normal_ = false;
    double spare_normal_ = 0.0;

    std::uint32_t next_u32();
};

/// Derives a child seed from a parent seed and a label, for independent sub-streams.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t label);

}  // namespace regmerge
