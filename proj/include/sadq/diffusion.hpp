// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sadq/numeric/nn.hpp"
#include "sadq/numeric/ops.hpp"
#include "sadq/numeric/random.hpp"

namespace sadq {

/// Cumulative signal coefficients ᾱ_t for t = 0..T.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  /// Validates monotonicity and range.
  NoiseSchedule(std::string family, std::vector<double> alpha_bar) : family_(std::move(family)), alpha_bar_(std::move(alpha_bar)) {
    if (alpha_bar_.size() < 2) throw ConfigError("noise schedule needs at least two entries");
    for (std::size_t t = 0; t < alpha_bar_.size(); ++t) {
      const double a = alpha_bar_[t];
      const bool last = t + 1 == alpha_bar_.size();
      if (!(a <= 1.0) || !(last ? a >= 0.0 : a > 0.0)) {
        throw ConfigError("noise schedule: alpha_bar[" + std::to_string(t) + "] = " + std::to_string(a) + " out of range");
      }
      if (t > 0 && a > alpha_bar_[t - 1]) throw ConfigError("noise schedule must be non-increasing");
    }
    signal_.resize(alpha_bar_.size());
    noise_.resize(alpha_bar_.size());
    for (std::size_t t = 0; t < alpha_bar_.size(); ++t) {
      signal_[t] = std::sqrt(alpha_bar_[t]);
      noise_[t] = std::sqrt(1.0 - alpha_bar_[t]);
    }
  }

  std::size_t steps() const { return alpha_bar_.size() - 1; }
  const std::string& family() const { return family_; }
  const std::vector<double>& alpha_bar() const { return alpha_bar_; }
  double alpha_bar(std::size_t t) const { return alpha_bar_.at(t); }

  void check_step(std::size_t t) const {
    if (t > steps()) throw ConfigError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
  }

  /// √ᾱ and √(1−ᾱ), linearly interpolated between integer steps.
  double signal(double tau) const { return interp(signal_, tau); }
  double noise(double tau) const { return interp(noise_, tau); }

  /// Slopes of signal/noise on the grid segment that ends at ⌈tau⌉ (the segment
  /// a reverse-time step leaving tau enters first).
  double signal_slope(double tau) const { return slope(signal_, tau); }
  double noise_slope(double tau) const { return slope(noise_, tau); }

  /// Stable identity of the schedule, used to bind samplers to the training schedule.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ull;
    };
    mix(family_.data(), family_.size());
    for (double a : alpha_bar_) mix(&a, sizeof a);
    return h;
  }

  friend bool operator==(const NoiseSchedule& a, const NoiseSchedule& b) {
    return a.family_ == b.family_ && a.alpha_bar_ == b.alpha_bar_;
  }

 private:
  double interp(const std::vector<double>& grid, double tau) const {
    const double T = static_cast<double>(steps());
    if (!(tau >= 0.0 && tau <= T)) throw ConfigError("schedule time " + std::to_string(tau) + " outside [0, T]");
    const auto lo = static_cast<std::size_t>(std::floor(tau));
    if (lo >= steps()) return grid.back();
    const double frac = tau - static_cast<double>(lo);
    return grid[lo] + frac * (grid[lo + 1] - grid[lo]);
  }

  double slope(const std::vector<double>& grid, double tau) const {
    const double T = static_cast<double>(steps());
    if (!(tau > 0.0 && tau <= T)) throw ConfigError("schedule slope time " + std::to_string(tau) + " outside (0, T]");
    const auto hi = static_cast<std::size_t>(std::ceil(tau));
    return grid[hi] - grid[hi - 1];
  }

  std::string family_;
  std::vector<double> alpha_bar_;
  std::vector<double> signal_;
  std::vector<double> noise_;
};

inline constexpr double kSqrtScheduleOffset = 1e-4;

/// ᾱ_t = 1 − √(t/T + s), clipped to [0, 1].
inline NoiseSchedule sqrt_schedule(std::size_t T) {
  if (T < 1) throw ConfigError("diffusion steps T must be >= 1");
  std::vector<double> ab(T + 1);
  for (std::size_t t = 0; t <= T; ++t) {
    const double v = 1.0 - std::sqrt(static_cast<double>(t) / static_cast<double>(T) + kSqrtScheduleOffset);
    ab[t] = std::clamp(v, 0.0, 1.0);
  }
  return NoiseSchedule("sqrt", std::move(ab));
}

/// Token embeddings for a vocabulary of size V plus one trailing absorbing-state row.
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::size_t vocab, std::size_t width, Rng& rng) : vocab_(vocab), weight_(make_param({vocab + 1, width}, rng, 1.0)) {}
  EmbeddingTable(std::size_t vocab, Tensor weight) : vocab_(vocab), weight_(std::move(weight)) {
    if (weight_.rank() != 2 || weight_.rows() != vocab + 1) {
      throw ShapeError("embedding table must have vocab + 1 = " + std::to_string(vocab + 1) + " rows, got " +
                       shape_str(weight_.shape()));
    }
  }

  std::size_t vocab() const { return vocab_; }
  std::size_t width() const { return weight_.cols(); }
  std::size_t absorbing_id() const { return vocab_; }
  const Tensor& weight() const { return weight_; }
  Tensor& weight() { return weight_; }

  /// The absorbing-state embedding m as a (width) vector.
  Tensor absorbing() const { return slice_rows(weight_, vocab_, 1).reshaped({width()}); }
  /// Vocabulary rows only (V, width).
  Tensor vocabulary() const { return slice_rows(weight_, 0, vocab_); }

 private:
  std::size_t vocab_ = 0;
  Tensor weight_;
};

/// EMB(tokens): one embedding row per id.
inline Tensor embed(std::span<const std::size_t> tokens, const EmbeddingTable& table) {
  for (std::size_t id : tokens)
    if (id >= table.vocab()) {
      throw ShapeError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(table.vocab()));
    }
  return embedding(table.weight(), tokens);
}

/// Nearest vocabulary row (Euclidean) per row of z; ties go to the lower id.
inline std::vector<std::size_t> round_to_tokens(const Tensor& z, const EmbeddingTable& table) {
  if (z.rank() != 2 || z.cols() != table.width()) {
    throw ShapeError("round_to_tokens: latent " + shape_str(z.shape()) + " does not match embedding width " +
                     std::to_string(table.width()));
  }
  const std::size_t w = table.width();
  const auto& e = table.weight().values();
  std::vector<std::size_t> ids(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const double* row = z.data().data() + r * w;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < table.vocab(); ++v) {
      double d = 0.0;
      for (std::size_t c = 0; c < w; ++c) d += (row[c] - e[v * w + c]) * (row[c] - e[v * w + c]);
      if (d < best) {
        best = d;
        ids[r] = v;
      }
    }
  }
  return ids;
}

enum class Role : std::uint8_t { kSource = 0, kTarget = 1, kPad = 2 };

/// One training batch laid out as (batch * n) rows.
struct DiffusionBatch {
  std::size_t batch = 0;
  std::size_t n = 0;
  std::vector<std::size_t> tokens;  // batch * n
  std::vector<Role> roles;          // batch * n
  std::vector<std::size_t> t;       // per example
  Tensor z0;                        // EMB(tokens)
  Tensor eps;
  Tensor zt;
  std::vector<std::uint8_t> absorbed;  // rows replaced by the absorbing state

  std::vector<std::uint8_t> target_rows() const {
    std::vector<std::uint8_t> m(roles.size());
    for (std::size_t i = 0; i < roles.size(); ++i) m[i] = roles[i] == Role::kTarget;
    return m;
  }
  std::vector<std::uint8_t> pad_rows() const {
    std::vector<std::uint8_t> m(roles.size());
    for (std::size_t i = 0; i < roles.size(); ++i) m[i] = roles[i] == Role::kPad;
    return m;
  }
  std::vector<double> per_row_time() const {
    std::vector<double> out(batch * n);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(t[i / n]);
    return out;
  }
};

/// z_t = √ᾱ_t z_0 + √(1−ᾱ_t) ε on rows flagged in `noised` (all rows when empty);
/// other rows are copied from z_0 unchanged.
inline Tensor forward_diffuse(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& schedule,
                              std::span<const std::uint8_t> noised = {}) {
  if (eps.shape() != z0.shape()) {
    throw ShapeError("forward_diffuse: noise " + shape_str(eps.shape()) + " does not match latent " + shape_str(z0.shape()));
  }
  schedule.check_step(t);
  const Tensor a = z0.rank() == 2 ? z0 : z0.reshaped({1, z0.numel()});
  const Tensor b = eps.rank() == 2 ? eps : eps.reshaped({1, eps.numel()});
  if (!noised.empty() && noised.size() != a.rows()) throw ShapeError("forward_diffuse: mask length does not match rows");
  const double sa = std::sqrt(schedule.alpha_bar(t)), sb = std::sqrt(1.0 - schedule.alpha_bar(t));
  std::vector<double> ca(a.rows()), cb(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const bool on = noised.empty() || noised[r];
    ca[r] = on ? sa : 1.0;
    cb[r] = on ? sb : 0.0;
  }
  Tensor out = row_affine(a, b, ca, cb);
  return z0.rank() == 2 ? out : out.reshaped(z0.shape());
}

/// Batched variant with one timestep per example of length n.
inline Tensor forward_diffuse_batch(const Tensor& z0, std::span<const std::size_t> t, std::size_t n, const Tensor& eps,
                                    const NoiseSchedule& schedule, std::span<const std::uint8_t> noised) {
  if (eps.shape() != z0.shape()) throw ShapeError("forward_diffuse: noise shape mismatch");
  if (t.size() * n != z0.rows() || noised.size() != z0.rows()) throw ShapeError("forward_diffuse: layout mismatch");
  std::vector<double> ca(z0.rows()), cb(z0.rows());
  for (std::size_t r = 0; r < z0.rows(); ++r) {
    const std::size_t step = t[r / n];
    schedule.check_step(step);
    ca[r] = noised[r] ? std::sqrt(schedule.alpha_bar(step)) : 1.0;
    cb[r] = noised[r] ? std::sqrt(1.0 - schedule.alpha_bar(step)) : 0.0;
  }
  return row_affine(z0, eps, ca, cb);
}

/// Activation probability of the absorbing state at step t.
inline double absorbing_probability(double lambda_abs, std::size_t t, const NoiseSchedule& schedule) {
  if (!(lambda_abs >= 0.0 && lambda_abs <= 1.0)) {
    throw ConfigError("absorbing-state rate " + std::to_string(lambda_abs) + " must lie in [0, 1]");
  }
  return lambda_abs * (1.0 - schedule.alpha_bar(t));
}

struct AbsorbResult {
  Tensor zt;
  std::vector<std::uint8_t> mask;
};

/// Replaces each eligible row by `m` independently with probability λ_abs (1 − ᾱ_t).
/// `row_times` gives the step of each row; `eligible` restricts replacement to target rows.
inline AbsorbResult apply_absorbing_state(const Tensor& zt, std::span<const std::size_t> row_times,
                                          const NoiseSchedule& schedule, const Tensor& m, double lambda_abs, Rng& rng,
                                          std::span<const std::uint8_t> eligible = {}) {
  if (m.numel() != zt.cols()) throw ShapeError("absorbing state width does not match latent " + shape_str(zt.shape()));
  if (row_times.size() != zt.rows()) throw ShapeError("apply_absorbing_state: one time per row required");
  std::vector<std::uint8_t> mask(zt.rows(), 0);
  bool any = false;
  for (std::size_t r = 0; r < zt.rows(); ++r) {
    const double p = absorbing_probability(lambda_abs, row_times[r], schedule);
    const double u = rng.uniform();
    if ((eligible.empty() || eligible[r]) && u < p) {
      mask[r] = 1;
      any = true;
    }
  }
  if (!any) return {zt, std::move(mask)};
  return {replace_rows(zt, m, mask), std::move(mask)};
}

/// Single-step convenience form: every row at step t.
inline AbsorbResult apply_absorbing_state(const Tensor& zt, std::size_t t, const NoiseSchedule& schedule,
                                          const Tensor& m, double lambda_abs, Rng& rng,
                                          std::span<const std::uint8_t> eligible = {}) {
  std::vector<std::size_t> times(zt.rows(), t);
  return apply_absorbing_state(zt, times, schedule, m, lambda_abs, rng, eligible);
}

/// Embeds, noises (target rows only) and absorbs a laid-out token batch.
inline DiffusionBatch corrupt_batch(std::size_t batch, std::size_t n, std::vector<std::size_t> tokens,
                                    std::vector<Role> roles, std::vector<std::size_t> t, const EmbeddingTable& table,
                                    const NoiseSchedule& schedule, double lambda_abs, Rng& rng) {
  DiffusionBatch b;
  b.batch = batch;
  b.n = n;
  b.tokens = std::move(tokens);
  b.roles = std::move(roles);
  b.t = std::move(t);
  if (b.tokens.size() != batch * n || b.roles.size() != batch * n || b.t.size() != batch) {
    throw ShapeError("corrupt_batch: layout does not match batch x n");
  }
  b.z0 = embed(b.tokens, table);
  b.eps = randn(b.z0.shape(), rng);
  const auto targets = b.target_rows();
  b.zt = forward_diffuse_batch(b.z0, b.t, n, b.eps, schedule, targets);
  std::vector<std::size_t> row_t(batch * n);
  for (std::size_t i = 0; i < row_t.size(); ++i) row_t[i] = b.t[i / n];
  auto abs = apply_absorbing_state(b.zt, row_t, schedule, table.absorbing(), lambda_abs, rng, targets);
  b.zt = abs.zt;
  b.absorbed = std::move(abs.mask);
  return b;
}

/// Denoiser: (z_t rows, per-row time) -> ẑ_0 rows.
using Denoiser = std::function<Tensor(const Tensor&, std::span<const double>)>;

struct LossTerms {
  Tensor total;
  double mse = 0.0;
  double reg = 0.0;
  double anchor = 0.0;
};

/// logits_v = −‖z − e_v‖² up to a per-row constant, so the argmax agrees with rounding.
inline Tensor rounding_logits(const Tensor& z, const EmbeddingTable& table) {
  const Tensor vocab = table.vocabulary();
  const Tensor norms = sum(square(vocab), 1);
  return add_row(scale(matmul(z, transpose(vocab)), 2.0), scale(norms, -1.0));
}

/// Denoising objective: mean over target rows of ‖EMB(w) − f(z_t, t)‖², plus
/// λ_reg · mean ‖z_0‖² over target rows, plus `anchor_coef` times the rounding
/// cross-entropy (clean embeddings at source rows, predictions at target rows).
inline LossTerms training_loss(const DiffusionBatch& batch, const Denoiser& denoiser, const EmbeddingTable& table,
                               const NoiseSchedule& schedule, double lambda_reg, double anchor_coef = 0.0) {
  for (std::size_t t : batch.t) {
    if (t < 2 || t > schedule.steps()) {
      throw ConfigError("training timestep " + std::to_string(t) + " outside [2, " + std::to_string(schedule.steps()) + "]");
    }
  }
  const std::size_t rows = batch.batch * batch.n;
  std::vector<double> target_w(rows, 0.0), source_w(rows, 0.0);
  std::size_t n_target = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (batch.roles[r] == Role::kTarget) {
      target_w[r] = 1.0;
      ++n_target;
    } else if (batch.roles[r] == Role::kSource) {
      source_w[r] = 1.0;
    }
  }
  if (n_target == 0) throw ShapeError("training_loss: batch has no target positions");
  const double inv = 1.0 / static_cast<double>(n_target);
  for (double& w : target_w) w *= inv;

  const Tensor pred = denoiser(batch.zt, batch.per_row_time());
  if (pred.shape() != batch.z0.shape()) {
    throw ShapeError("denoiser output " + shape_str(pred.shape()) + " does not match latent " + shape_str(batch.z0.shape()));
  }
  const Tensor mse = row_weighted_sqsum(sub(batch.z0, pred), target_w);
  LossTerms out;
  out.mse = mse.item();
  out.total = mse;
  if (lambda_reg != 0.0) {
    const Tensor reg = scale(row_weighted_sqsum(batch.z0, target_w), lambda_reg);
    out.reg = reg.item();
    out.total = add(out.total, reg);
  }
  if (anchor_coef != 0.0) {
    std::vector<double> w(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) w[r] = (source_w[r] > 0.0 || target_w[r] > 0.0) ? 1.0 : 0.0;
    std::vector<std::uint8_t> use_pred(rows);
    for (std::size_t r = 0; r < rows; ++r) use_pred[r] = target_w[r] > 0.0;
    // Target rows decode the prediction; other rows decode the clean embedding.
    std::vector<double> one(rows), zero(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      one[r] = use_pred[r] ? 0.0 : 1.0;
      zero[r] = use_pred[r] ? 1.0 : 0.0;
    }
    const Tensor decoded = row_affine(batch.z0, pred, one, zero);
    const Tensor anchor = scale(cross_entropy(rounding_logits(decoded, table), batch.tokens, w), anchor_coef);
    out.anchor = anchor.item();
    out.total = add(out.total, anchor);
  }
  return out;
}

}  // namespace sadq
