#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace elastic {

// Deterministic random source. The engine is mt19937_64 (bit-exact by the
// standard) and all distributions are derived here from raw engine words, so
// the same seed yields the same stream on every platform.
class RngState {
public:
    explicit RngState(std::uint64_t seed);

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64();

    // Uniform in [0, 1).
    double uniform();

    // Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n);

    // Standard normal via Box-Muller.
    double normal();

    // Independent stream for a named sub-component. Deterministic in
    // (seed, label); insensitive to the order forks are taken.
    RngState fork(std::string_view label) const;

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// splitmix64 finalizer, used for seed derivation.
std::uint64_t mix_seed(std::uint64_t x);

// FNV-1a over a string, used to hash parameter names into seed space.
std::uint64_t hash_label(std::string_view label);

}  // namespace elastic
