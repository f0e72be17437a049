// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sadq/numeric/ops.hpp"
#include "sadq/numeric/random.hpp"

namespace sadq {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline Tensor make_param(Shape shape, Rng& rng, double stddev) {
  auto t = randn(std::move(shape), rng, stddev);
  t.set_requires_grad(true);
  return t;
}

inline Tensor make_param_const(Shape shape, double value) {
  auto t = Tensor::full(std::move(shape), value);
  t.set_requires_grad(true);
  return t;
}

/// y = x W + b, W stored (in, out).
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(make_param({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)))),
        bias(make_param_const({out}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return add_row(matmul(x, weight), bias); }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".weight", weight);
    out.emplace_back(prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width) : gamma(make_param_const({width}, 1.0)), beta(make_param_const({width}, 0.0)) {}

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

inline std::size_t count_params(const NamedParams& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

}  // namespace sadq
