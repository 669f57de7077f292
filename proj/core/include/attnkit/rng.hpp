#pragma once

#include <cstdint>

#include "attnkit/matrix.hpp"

namespace attnkit {

/// Deterministic splittable PRNG (splitmix64 core). Identical seeds produce
/// identical draw sequences regardless of platform or standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();

  /// Standard normal via Box-Muller; draws come in deterministic order.
  double normal();
  double normal(double mean, double std);

  bool bernoulli(double p);

  /// Integer in [0, bound). bound must be positive.
  std::uint64_t below(std::uint64_t bound);

  /// Independent stream derived from this one; advances this generator once.
  Rng split();

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// i.i.d. normal entries; std must be nonnegative. std == 0 yields a constant
/// matrix of `mean`.
Matrix gaussian_fill(Rng& rng, int rows, int cols, double mean, double std);

}  // namespace attnkit
