#pragma once

#include <cstdint>
#include <random>

namespace qpcnet {

/// SplitMix64 finalizer.
std::uint64_t splitmix64(std::uint64_t x) noexcept;

/// Independent stream seed for item `index` of a run seeded with `master`.
/// Depends only on (master, index), so work can be split across workers freely.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) noexcept;

/// Seeded random stream. The engine is std::mt19937_64 (bit-exact by the
/// standard); the variate transforms are implemented here because the
/// standard library distributions differ between vendors.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1), safe for logarithms.
    double uniform_open() { return (static_cast<double>(engine_() >> 11) + 0.5) * 0x1.0p-53; }

    /// Uniform integer in [0, n). Requires n > 0.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal variate (Marsaglia polar method, pairs cached).
    double normal();

    /// Exponential variate with the given rate (mean 1/rate).
    double exponential(double rate);

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace qpcnet
