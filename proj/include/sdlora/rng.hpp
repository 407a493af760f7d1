#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace sdlora {

/// Deterministic random stream.
///
/// The generator is std::mt19937_64, whose output sequence is pinned by the
/// C++ standard, so identical seeds reproduce identical draws on every
/// platform. Gaussian variates use the Box-Muller transform (cosine branch,
/// two uniforms per draw, nothing cached) rather than
/// std::normal_distribution, whose algorithm is implementation-defined.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform in [0, 1) with 53 significant bits.
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double normal(double mean = 0.0, double stddev = 1.0);

    /// Unbiased uniform integer in [0, n) via rejection.
    std::uint64_t uniform_below(std::uint64_t n);

private:
    std::mt19937_64 gen_;
};

/// Mixes a base seed with a stream tag (splitmix64 finalizer, applied twice)
/// so sub-streams are decorrelated and reproducible.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

/// Fisher-Yates shuffle driven by the stream.
void shuffle_indices(std::vector<int>& idx, RngStream& rng);

} // namespace sdlora
