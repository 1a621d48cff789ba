#pragma once

#include <cstdint>

namespace ecf {

// Counter-based generator: the n-th draw is a pure function of (seed, n), so
// sequences replay identically on every platform and streams can be forked
// without sharing state.
class Rng {
  public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal via Box-Muller; consumes two draws.
    double normal();
    bool bernoulli(double p) { return uniform() < p; }
    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);

    /// Independent stream keyed by (seed, key); does not advance this one.
    Rng fork(std::uint64_t key) const;

  private:
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);
/// FNV-1a, used to key streams by name.
std::uint64_t hash_name(const char* name);

}  // namespace ecf
