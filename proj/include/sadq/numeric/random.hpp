// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include "sadq/numeric/tensor.hpp"

namespace sadq {

/// Explicitly seeded generator; every random draw in the library goes through one.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  /// Uniform integer in [lo, hi].
  std::size_t uniform_int(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }

  /// Child generator with a seed derived from this one's stream.
  Rng fork() { return Rng(engine_()); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
  auto t = Tensor::zeros(std::move(shape));
  for (double& x : t.data()) x = stddev * rng.normal();
  return t;
}

inline Tensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  auto t = Tensor::zeros(std::move(shape));
  for (double& x : t.data()) x = lo + (hi - lo) * rng.uniform();
  return t;
}

}  // namespace sadq
