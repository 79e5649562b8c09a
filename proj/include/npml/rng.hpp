#pragma once

#include <boost/math/special_functions/erf.hpp>

#include <cmath>
#include <cstdint>
#include <limits>

namespace npml {

// SplitMix64 finalizer; used both as a hash to derive substreams and as
// the seeding routine for Xoshiro256.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Stream tags keep simulation, censoring and Monte Carlo draws apart even
/// when the caller reuses a seed.
enum class StreamTag : std::uint64_t {
    simulation = 0x51a1,
    censoring = 0xce45,
    monte_carlo = 0x3c3c,
    experiment = 0xe7e7,
};

/// xoshiro256** with a deterministic, platform-independent output sequence.
/// Substreams are keyed by (seed, tag, index) so that individual i always sees
/// the same draws regardless of N or scheduling.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed) noexcept {
        std::uint64_t x = seed;
        for (auto& s : state_) {
            x = splitmix64(x);
            s = x;
        }
    }

    static Rng substream(std::uint64_t seed, StreamTag tag, std::uint64_t index) noexcept {
        const std::uint64_t key =
            splitmix64(splitmix64(seed) ^ splitmix64(static_cast<std::uint64_t>(tag)) ^
                       splitmix64(index + 0x632be59bd9b4e019ULL));
        return Rng(key);
    }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform on the open interval (0, 1).
    double uniform() noexcept {
        return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Standard normal by inverse-CDF transform.
    double normal() { return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * uniform()); }

    /// Laplace with unit variance (scale 1/sqrt(2)), by inverse CDF.
    double laplace() noexcept {
        const double u = uniform() - 0.5;
        const double b = 1.0 / std::sqrt(2.0);
        return u < 0 ? b * std::log1p(2.0 * u) : -b * std::log1p(-2.0 * u);
    }

private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4]{};
};

} // namespace npml
