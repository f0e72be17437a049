// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "sadq/diffusion.hpp"
#include "sadq/model.hpp"
#include "sadq/numeric/fpenv.hpp"
#include "sadq/numeric/ops.hpp"
#include "sadq/numeric/random.hpp"
#include "sadq/tasks.hpp"

namespace sadq {

/// Below this noise level ε̂ is not recovered from z; the state is replaced by √ᾱ ẑ_0.
inline constexpr double kDegenerateNoise = 1e-8;

/// `num_steps` evenly spaced integer times from T down to 1, both ends included.
inline std::vector<std::size_t> make_step_schedule(std::size_t T, std::size_t num_steps) {
  if (T < 1) throw ConfigError("sampler: diffusion steps T must be >= 1");
  if (num_steps < 1 || num_steps > T) {
    throw ConfigError("sampler.steps " + std::to_string(num_steps) + " must lie in [1, T = " + std::to_string(T) + "]");
  }
  if (num_steps == 1) return {T};
  std::vector<std::size_t> out(num_steps);
  const double span = static_cast<double>(T - 1) / static_cast<double>(num_steps - 1);
  for (std::size_t i = 0; i < num_steps; ++i) {
    out[i] = static_cast<std::size_t>(std::lround(static_cast<double>(T) - static_cast<double>(i) * span));
  }
  return out;
}

struct SamplerConfig {
  std::size_t num_steps = 64;
  std::vector<std::size_t> times;  // empty: make_step_schedule(T, num_steps)
  std::uint64_t seed = 1;
  bool clamp = false;  // snap each intermediate ẑ_0 to its nearest embedding
  std::size_t batch_size = 64;

  std::vector<std::size_t> resolved_times(std::size_t T) const {
    auto t = times.empty() ? make_step_schedule(T, num_steps) : times;
    validate_times(t, T);
    return t;
  }

  static void validate_times(std::span<const std::size_t> t, std::size_t T) {
    if (t.empty()) throw ConfigError("sampler: empty step schedule");
    if (t.front() != T) throw ConfigError("sampler: step schedule must start at T = " + std::to_string(T));
    if (t.back() < 1) throw ConfigError("sampler: terminal step must be >= 1");
    for (std::size_t i = 1; i < t.size(); ++i)
      if (t[i] >= t[i - 1]) throw ConfigError("sampler: step times must be strictly decreasing");
  }
};

/// Reverse-time vector field (z, τ) -> dz/dτ.
using DriftFunction = std::function<Tensor(const Tensor&, double)>;

/// ẑ_0 prediction at a single time shared by all rows.
using Predictor = std::function<Tensor(const Tensor&, double)>;

inline Predictor predictor_from(Denoiser denoiser) {
  return [denoiser = std::move(denoiser)](const Tensor& z, double tau) {
    const std::vector<double> times(z.rows(), tau);
    return denoiser(z, times);
  };
}

/// One explicit Euler step z + (to − from) · drift(z, from).
inline Tensor euler_step(const Tensor& z, double time_from, double time_to, const DriftFunction& drift) {
  if (!(time_to < time_from)) {
    throw ConfigError("euler step: target time " + std::to_string(time_to) + " is not below " + std::to_string(time_from));
  }
  const Tensor d = drift(z, time_from);
  if (d.shape() != z.shape()) throw ShapeError("euler step: drift shape " + shape_str(d.shape()) + " vs " + shape_str(z.shape()));
  if (!all_finite(d.data())) {
    throw NumericError("euler step " + std::to_string(time_from) + " -> " + std::to_string(time_to) +
                       ": drift is not finite");
  }
  return add(z, scale(d, time_to - time_from));
}

/// Probability-flow drift given a ẑ_0 prediction:
///   a'(τ) ẑ_0 + b'(τ) ε̂,  ε̂ = (z − a ẑ_0) / b,  a = √ᾱ, b = √(1−ᾱ).
/// Rows flagged in `fixed` get zero drift. In the degenerate regime b < kDegenerateNoise
/// ε̂ is taken as zero.
inline Tensor probability_flow_drift(const Tensor& z, const Tensor& x0, double tau, const NoiseSchedule& schedule,
                                     std::span<const std::uint8_t> fixed = {}) {
  const double a = schedule.signal(tau), b = schedule.noise(tau);
  const double da = schedule.signal_slope(tau), db = schedule.noise_slope(tau);
  const bool degenerate = b < kDegenerateNoise;
  const std::size_t w = z.cols();
  std::vector<double> out(z.numel());
  const auto zd = z.data();
  const auto xd = x0.data();
  for (std::size_t r = 0; r < z.rows(); ++r) {
    if (!fixed.empty() && fixed[r]) continue;
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t i = r * w + c;
      const double eps = degenerate ? 0.0 : (zd[i] - a * xd[i]) / b;
      out[i] = da * xd[i] + db * eps;
    }
  }
  return Tensor(z.shape(), std::move(out));
}

/// ε̂ recovered from z and a ẑ_0 prediction at time τ.
inline Tensor implied_noise(const Tensor& z, const Tensor& x0, double tau, const NoiseSchedule& schedule) {
  const double b = schedule.noise(tau);
  if (b < kDegenerateNoise) return Tensor::zeros(z.shape());
  return scale(sub(z, scale(x0, schedule.signal(tau))), 1.0 / b);
}

inline DriftFunction drift_from_denoiser(Predictor predict, const NoiseSchedule& schedule,
                                         std::vector<std::uint8_t> fixed = {}) {
  return [predict = std::move(predict), schedule, fixed = std::move(fixed)](const Tensor& z, double tau) {
    return probability_flow_drift(z, predict(z, tau), tau, schedule, fixed);
  };
}

inline DriftFunction drift_from_denoiser(Denoiser denoiser, const NoiseSchedule& schedule,
                                         std::vector<std::uint8_t> fixed = {}) {
  return drift_from_denoiser(predictor_from(std::move(denoiser)), schedule, std::move(fixed));
}

/// Replaces each unfixed row of x by its nearest vocabulary embedding.
inline Tensor clamp_to_embeddings(const Tensor& x, const EmbeddingTable& table, std::span<const std::uint8_t> fixed = {}) {
  const auto ids = round_to_tokens(x, table);
  const auto& e = table.weight().values();
  const std::size_t w = x.cols();
  std::vector<double> out = x.values();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    if (!fixed.empty() && fixed[r]) continue;
    std::copy_n(e.begin() + static_cast<std::ptrdiff_t>(ids[r] * w), w, out.begin() + static_cast<std::ptrdiff_t>(r * w));
  }
  return Tensor(x.shape(), std::move(out));
}

struct Trajectory {
  Tensor z;   // state at the terminal time
  Tensor x0;  // ẑ_0 predicted at the terminal time
};

/// Integrates the reverse ODE over `times` starting from z at times.front(), then
/// predicts ẑ_0 at the terminal time. With `clamp_table` set, every ẑ_0 is snapped to
/// the nearest embedding before it enters the drift.
inline Trajectory integrate_reverse(Tensor z, const Predictor& predict, const NoiseSchedule& schedule,
                                    std::span<const std::size_t> times, std::span<const std::uint8_t> fixed = {},
                                    const EmbeddingTable* clamp_table = nullptr) {
  SamplerConfig::validate_times(times, schedule.steps());
  NoGradGuard no_grad;
  FlushSubnormalsGuard flush;
  auto predict_x0 = [&](const Tensor& state, double tau) {
    Tensor x0 = predict(state, tau);
    if (x0.shape() != state.shape()) throw ShapeError("sampler: prediction shape " + shape_str(x0.shape()) + " vs " + shape_str(state.shape()));
    return clamp_table ? clamp_to_embeddings(x0, *clamp_table, fixed) : x0;
  };
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    const auto from = static_cast<double>(times[i]), to = static_cast<double>(times[i + 1]);
    Tensor x0;
    auto drift = [&](const Tensor& state, double tau) {
      x0 = predict_x0(state, tau);
      return probability_flow_drift(state, x0, tau, schedule, fixed);
    };
    if (schedule.noise(from) < kDegenerateNoise) {
      // Direct replacement z := √ᾱ ẑ_0 on the free rows.
      const Tensor x = predict_x0(z, from);
      std::vector<double> keep(z.rows(), 1.0), put(z.rows(), 0.0);
      for (std::size_t r = 0; r < z.rows(); ++r)
        if (fixed.empty() || !fixed[r]) {
          keep[r] = 0.0;
          put[r] = schedule.signal(from);
        }
      z = row_affine(z, x, keep, put);
    }
    z = euler_step(z, from, to, drift);
  }
  Trajectory out;
  out.x0 = predict_x0(z, static_cast<double>(times.back()));
  out.z = std::move(z);
  return out;
}

/// Rejects sampling under a schedule other than the one the model was trained with.
inline void require_matching_schedule(const ModelConfig& cfg, const NoiseSchedule& schedule) {
  const NoiseSchedule trained = sqrt_schedule(cfg.diffusion_steps);
  if (schedule.steps() != trained.steps() || schedule.fingerprint() != trained.fingerprint()) {
    throw ConfigError("sampler: noise schedule " + schedule.family() + "/T=" + std::to_string(schedule.steps()) +
                      " does not match the training schedule " + trained.family() + "/T=" +
                      std::to_string(trained.steps()));
  }
}

/// Generates one target per source. Target rows start from N(0, 1) noise, source rows
/// hold their clean embeddings throughout, and the final ẑ_0 is rounded to tokens.
/// Targets have the length of their source.
inline std::vector<TokenSeq> sample(const SADiffuSeqModel& model, std::span<const TokenSeq> sources,
                                    const SamplerConfig& cfg, const NoiseSchedule& schedule, const SequenceLayout& layout) {
  require_matching_schedule(model.config(), schedule);
  if (cfg.batch_size == 0) throw ConfigError("sampler.batch_size must be positive");
  if (layout.length() > model.config().max_len) {
    throw ConfigError("sampler: layout length " + std::to_string(layout.length()) + " exceeds model.max_len " +
                      std::to_string(model.config().max_len));
  }
  const auto times = cfg.resolved_times(schedule.steps());
  const auto& table = model.table();
  const std::size_t n = layout.length(), w = table.width();
  Rng rng(cfg.seed);
  std::vector<TokenSeq> results;
  results.reserve(sources.size());
  for (std::size_t begin = 0; begin < sources.size(); begin += cfg.batch_size) {
    const std::size_t count = std::min(cfg.batch_size, sources.size() - begin);
    std::vector<std::size_t> tokens;
    std::vector<Role> roles;
    for (std::size_t i = 0; i < count; ++i) {
      const auto& src = sources[begin + i];
      for (std::size_t id : src)
        if (id >= table.vocab()) throw ConfigError("sampler: source token " + std::to_string(id) + " outside vocabulary");
      layout.append(src, {}, src.size(), tokens, roles);
    }
    std::vector<std::uint8_t> fixed(roles.size()), pad(roles.size());
    for (std::size_t r = 0; r < roles.size(); ++r) {
      fixed[r] = roles[r] != Role::kTarget;
      pad[r] = roles[r] == Role::kPad;
    }
    Tensor z = embed(tokens, table).detach();
    {
      auto zd = z.data();
      for (std::size_t r = 0; r < roles.size(); ++r)
        if (!fixed[r])
          for (std::size_t c = 0; c < w; ++c) zd[r * w + c] = rng.normal();
    }
    const Predictor predict = [&model, count, &pad](const Tensor& state, double tau) {
      const std::vector<double> t(state.rows(), tau);
      return model.forward(state, t, count, pad);
    };
    const Trajectory traj = integrate_reverse(z, predict, schedule, times, fixed, cfg.clamp ? &table : nullptr);
    const auto ids = round_to_tokens(traj.x0, table);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t len = sources[begin + i].size();
      const std::size_t off = i * n + layout.target_begin();
      results.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(off), ids.begin() + static_cast<std::ptrdiff_t>(off + len));
    }
  }
  return results;
}

}  // namespace sadq
