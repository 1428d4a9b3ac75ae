#pragma once

#include <cstdint>

namespace aesr {

/// Counter-based generator: output i is splitmix64(seed, i). The full state is
/// (seed, counter), so it checkpoints as two integers and produces the same
/// stream on every platform. All distributions are implemented here rather
/// than via <random>, whose distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0) : seed_(seed), counter_(counter) {}

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double low, double high);

  /// Uniform integer in [low, high], both inclusive.
  std::int64_t uniform_int(std::int64_t low, std::int64_t high);

  /// Standard normal via Box-Muller (one draw consumes two uniforms).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Poisson sample by inversion; lambda is clamped to [0, 700].
  std::int64_t poisson(double lambda);

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace aesr
