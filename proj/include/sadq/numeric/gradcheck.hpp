// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "sadq/numeric/tensor.hpp"

namespace sadq {

/// Denominator floor of the relative error, so coordinates whose gradient is
/// numerically zero are compared in absolute terms.
inline constexpr double kGradCheckFloor = 1e-3;

/// Largest relative error between the reverse-mode gradient of scalar `f` at `x`
/// and its central finite difference with the given step.
///
/// `f` must be deterministic: it is evaluated twice at `x` and any difference
/// in the result is reported as an error.
inline double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                      double step = 1e-5) {
  if (!(step > 0.0)) throw ConfigError("finite_difference_check: step must be positive");

  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw ShapeError("finite_difference_check: f must return a scalar, got " + shape_str(y.shape()));
  const double y0 = y.item();
  std::vector<double> analytic(leaf.numel(), 0.0);
  if (y.requires_grad() && !y.node()->is_leaf()) {
    backward(y);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  }

  NoGradGuard no_grad;
  Tensor probe = x.detach();
  const double again = f(probe).item();
  if (again != y0) throw GraphError("finite_difference_check: f is not deterministic");

  double worst = 0.0;
  for (std::size_t i = 0; i < probe.numel(); ++i) {
    const double orig = probe.data()[i];
    probe.data()[i] = orig + step;
    const double up = f(probe).item();
    probe.data()[i] = orig - step;
    const double down = f(probe).item();
    probe.data()[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), kGradCheckFloor});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace sadq
