// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sadq/numeric/nn.hpp"
#include "sadq/numeric/ops.hpp"

namespace sadq {

/// Gating weights W_g, one row per expert.
struct GatingNetwork {
  Tensor weight;  // (experts, width)

  GatingNetwork() = default;
  GatingNetwork(std::size_t experts, std::size_t width, Rng& rng)
      : weight(make_param({experts, width}, rng, 1.0 / std::sqrt(static_cast<double>(width)))) {}
  explicit GatingNetwork(Tensor w) : weight(std::move(w)) {}

  std::size_t experts() const { return weight.dim(0); }
  std::size_t width() const { return weight.dim(1); }
};

/// Two-layer GELU feed-forward network width -> hidden -> width.
struct Expert {
  Linear up;
  Linear down;

  Expert() = default;
  Expert(std::size_t width, std::size_t hidden, Rng& rng) : up(width, hidden, rng), down(hidden, width, rng) {}

  Tensor operator()(const Tensor& x) const { return down(gelu(up(x))); }

  void collect(const std::string& prefix, NamedParams& out) const {
    up.collect(prefix + ".up", out);
    down.collect(prefix + ".down", out);
  }

  static std::size_t param_count(std::size_t width, std::size_t hidden) {
    return width * hidden + hidden + hidden * width + width;
  }
};

using ExpertSet = std::vector<Expert>;

struct RoutingDecision {
  std::vector<double> probs;
  std::vector<std::size_t> selected;  // ordered by descending probability
  std::vector<double> weights;        // renormalized, aligned with `selected`
};

inline void validate_top_k(std::size_t k, std::size_t experts) {
  if (k < 1 || k > experts) {
    throw ConfigError("top_k " + std::to_string(k) + " must lie in [1, " + std::to_string(experts) + "]");
  }
}

/// Top-k of one probability row; ties go to the lower expert index.
inline RoutingDecision route(std::vector<double> probs, std::size_t k) {
  validate_top_k(k, probs.size());
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  RoutingDecision d;
  d.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  double total = 0.0;
  for (std::size_t e : d.selected) total += probs[e];
  for (std::size_t e : d.selected) d.weights.push_back(probs[e] / total);
  d.probs = std::move(probs);
  return d;
}

/// G(x) = softmax(W_g x) for a single token, followed by top-k selection.
inline RoutingDecision gate(std::span<const double> x, const GatingNetwork& g, std::size_t k) {
  if (x.size() != g.width()) {
    throw ShapeError("gate: token width " + std::to_string(x.size()) + " does not match W_g width " +
                     std::to_string(g.width()));
  }
  NoGradGuard no_grad;
  const Tensor logits = matmul(g.weight, Tensor({x.size(), 1}, std::vector<double>(x.begin(), x.end())));
  const Tensor probs = softmax(logits.reshaped({g.experts()}), 0);
  return route(probs.values(), k);
}

/// Renormalizes each row of `probs` over the selected entries of `selection`,
/// zeroing the rest. Gradients pass through the weights; the selection is constant.
inline Tensor renormalize_selected(const Tensor& probs, std::vector<std::uint8_t> selection) {
  const std::size_t m = probs.rows(), e = probs.cols();
  if (selection.size() != m * e) throw ShapeError("renormalize_selected: selection shape mismatch");
  std::vector<double> out(m * e, 0.0), totals(m, 0.0);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < e; ++c)
      if (selection[r * e + c]) totals[r] += probs.data()[r * e + c];
    for (std::size_t c = 0; c < e; ++c)
      if (selection[r * e + c]) out[r * e + c] = probs.data()[r * e + c] / totals[r];
  }
  std::vector<double> w = out;
  return detail::make_result(
      probs.shape(), std::move(out), {&probs}, "renormalize_selected",
      [m, e, selection = std::move(selection), totals = std::move(totals), w = std::move(w)](detail::Node& self) {
        double* g = detail::parent_grad(self, 0);
        if (!g) return;
        for (std::size_t r = 0; r < m; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < e; ++c) dot += self.grad[r * e + c] * w[r * e + c];
          for (std::size_t c = 0; c < e; ++c)
            if (selection[r * e + c]) g[r * e + c] += (self.grad[r * e + c] - dot) / totals[r];
        }
      });
}

struct MoeOutput {
  Tensor output;
  Tensor probs;  // (tokens, experts) gate probabilities, differentiable
  std::vector<RoutingDecision> decisions;
};

/// Mixture-of-experts feed-forward over a batch of tokens x (tokens, width).
///
/// Each token is routed to its top-k experts and the expert outputs are combined
/// with the renormalized gate probabilities. Pass `fixed_routing` to reuse a
/// previous selection instead of recomputing it from the gate.
inline MoeOutput moe_forward_batch(const Tensor& x, const ExpertSet& experts, const GatingNetwork& g, std::size_t k,
                                   const std::vector<RoutingDecision>* fixed_routing = nullptr) {
  const std::size_t tokens = x.rows(), e = g.experts();
  if (experts.size() != e) {
    throw ConfigError("gating network has " + std::to_string(e) + " rows but " + std::to_string(experts.size()) +
                      " experts were given");
  }
  validate_top_k(k, e);
  if (x.cols() != g.width()) throw ShapeError("moe: token width does not match W_g " + shape_str(g.weight.shape()));
  if (tokens == 0) throw ShapeError("moe: empty token batch");

  MoeOutput res;
  res.probs = softmax(matmul(x, transpose(g.weight)), 1);
  if (fixed_routing) {
    if (fixed_routing->size() != tokens) throw ShapeError("moe: fixed routing does not cover every token");
    res.decisions = *fixed_routing;
  } else {
    res.decisions.reserve(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      const auto row = res.probs.data().subspan(t * e, e);
      res.decisions.push_back(route(std::vector<double>(row.begin(), row.end()), k));
    }
  }

  std::vector<std::uint8_t> selection(tokens * e, 0);
  std::vector<std::vector<std::size_t>> assigned(e);
  for (std::size_t t = 0; t < tokens; ++t)
    for (std::size_t ex : res.decisions[t].selected) {
      selection[t * e + ex] = 1;
      assigned[ex].push_back(t);
    }
  const Tensor weights = renormalize_selected(res.probs, std::move(selection));

  std::vector<Tensor> parts;
  for (std::size_t ex = 0; ex < e; ++ex) {
    if (assigned[ex].empty()) continue;
    const Tensor y = experts[ex](gather_rows(x, assigned[ex]));
    const Tensor w = gather_column(weights, assigned[ex], ex);
    parts.push_back(scatter_add_rows(mul_col(y, w), assigned[ex], tokens));
  }
  res.output = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) res.output = add(res.output, parts[i]);
  return res;
}

/// MoE(x) for a single token vector.
inline Tensor moe_forward(const Tensor& x, const ExpertSet& experts, const GatingNetwork& g, std::size_t k) {
  return moe_forward_batch(x.reshaped({1, x.numel()}), experts, g, k).output.reshaped({x.numel()});
}

/// Per-expert assignment fractions and mean gate probabilities over a batch of decisions.
struct LoadBalanceStats {
  std::vector<double> assignment_fraction;  // sums to k
  std::vector<double> mean_prob;            // sums to 1
};

inline LoadBalanceStats load_balance_stats(std::span<const RoutingDecision> decisions) {
  if (decisions.empty()) throw ShapeError("load_balance_stats: empty batch");
  const std::size_t e = decisions.front().probs.size();
  LoadBalanceStats s{std::vector<double>(e, 0.0), std::vector<double>(e, 0.0)};
  for (const auto& d : decisions) {
    if (d.probs.size() != e) throw ShapeError("load_balance_stats: inconsistent expert counts");
    for (std::size_t ex : d.selected) s.assignment_fraction[ex] += 1.0;
    for (std::size_t i = 0; i < e; ++i) s.mean_prob[i] += d.probs[i];
  }
  const double n = static_cast<double>(decisions.size());
  for (std::size_t i = 0; i < e; ++i) {
    s.assignment_fraction[i] /= n;
    s.mean_prob[i] /= n;
  }
  return s;
}

/// Switch-style balancing penalty E * Σ_i f_i P_i, with f the (constant) top-1
/// assignment share and P the mean gate probability. Only used when its
/// coefficient is non-zero.
inline Tensor load_balance_loss(const MoeOutput& moe) {
  const std::size_t tokens = moe.probs.rows(), e = moe.probs.cols();
  std::vector<double> share(e, 0.0);
  for (const auto& d : moe.decisions) share[d.selected.front()] += 1.0 / static_cast<double>(tokens);
  const Tensor mean_probs = scale(sum(moe.probs, 0), 1.0 / static_cast<double>(tokens));
  return scale(sum(mul(mean_probs, Tensor::vector(share))), static_cast<double>(e));
}

}  // namespace sadq
