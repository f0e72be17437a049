// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "sadq/config.hpp"
#include "sadq/diffusion.hpp"
#include "sadq/model.hpp"
#include "sadq/numeric/fpenv.hpp"
#include "sadq/numeric/ops.hpp"
#include "sadq/numeric/random.hpp"
#include "sadq/tasks.hpp"

namespace sadq {

/// Adaptive-moment optimizer with bias correction.
class Adam {
 public:
  Adam(std::vector<Tensor> params, double beta1, double beta2, double eps)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      const auto g = p.grad();
      auto x = p.data();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < x.size(); ++j) {
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
        x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  double beta1_, beta2_, eps_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Global L2 norm of all present gradients.
inline double grad_norm(const std::vector<Tensor>& params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (double g : p.grad()) s += g * g;
  return std::sqrt(s);
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the norm before clipping.
inline double clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& p : params)
      if (p.has_grad())
        for (double& g : p.grad_mut()) g *= f;
  }
  return norm;
}

/// Linear warmup over the first `warmup` steps, constant afterwards. `step` counts from 0.
inline double learning_rate(const OptimConfig& o, std::size_t step) {
  if (o.warmup == 0) return o.lr;
  return o.lr * std::min(1.0, static_cast<double>(step + 1) / static_cast<double>(o.warmup));
}

struct StepRecord {
  std::size_t step = 0;  // 1-based
  std::size_t stage = 0;
  double loss = 0.0;
  double mse = 0.0;
  double reg = 0.0;
  double anchor = 0.0;
  double lr = 0.0;
};

inline std::string format_step(const StepRecord& r) {
  char buf[192];
  std::snprintf(buf, sizeof buf, "%zu\t%zu\t%.9g\t%.9g\t%.9g\t%.9g\t%.6g", r.step, r.stage, r.loss, r.mse, r.reg, r.anchor, r.lr);
  return buf;
}

inline constexpr const char* kTrainLogHeader = "step\tstage\tloss\tmse\treg\tanchor\tlr";

struct TrainResult {
  std::vector<StepRecord> history;  // every step
  std::vector<std::size_t> stage_starts;
  std::size_t checkpoints_written = 0;
};

struct TrainHooks {
  std::ostream* log = nullptr;
  /// Called at periodic checkpoints and after the final step.
  std::function<void(std::size_t step)> checkpoint;
};

/// Runs the configured stages on `corpus.train`. Aborts with NumericError on a
/// non-finite loss or gradient before any parameter is touched by that step.
inline TrainResult train(SADiffuSeqModel& model, const RunConfig& cfg, const Corpus& corpus, const TrainHooks& hooks = {}) {
  cfg.validate();
  FlushSubnormalsGuard flush;
  const NoiseSchedule schedule = sqrt_schedule(cfg.model.diffusion_steps);
  const auto stages = cfg.resolved_stages();
  auto params = model.parameters();
  Adam opt(params, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps);
  Rng root(cfg.seed);
  Rng shuffle_rng = root.fork();
  Rng noise_rng = root.fork();

  TrainResult result;
  if (hooks.log) *hooks.log << kTrainLogHeader << '\n';
  std::size_t step = 0;
  const std::size_t total = cfg.total_steps();
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const auto& st = stages[si];
    const std::size_t len = st.max_source_len == 0 ? cfg.task.max_len : st.max_source_len;
    model.set_window(st.window);
    std::vector<Example> pool;
    for (const auto& ex : corpus.train)
      if (ex.source.size() <= len && ex.target.size() <= len) pool.push_back(ex);
    if (pool.size() < cfg.optim.batch_size) {
      throw ConfigError("stages[" + std::to_string(si) + "]: only " + std::to_string(pool.size()) +
                        " training examples fit max_source_len " + std::to_string(len));
    }
    BatchIterator it(pool, cfg.optim.batch_size, shuffle_rng.engine()(), SequenceLayout{len});
    result.stage_starts.push_back(step + 1);
    if (hooks.log) {
      *hooks.log << "# stage " << si << " begins at step " << step + 1 << " window=" << st.window
                 << " max_source_len=" << len << '\n';
    }
    for (std::size_t k = 0; k < st.steps; ++k) {
      const TokenBatch tb = it.next();
      std::vector<std::size_t> times(tb.batch);
      for (auto& t : times) t = noise_rng.uniform_int(RunConfig::diffusion_min_step(), cfg.model.diffusion_steps);
      const DiffusionBatch batch =
          corrupt_batch(tb.batch, tb.n, tb.tokens, tb.roles, times, model.table(), schedule, cfg.model.lambda_abs, noise_rng);
      ForwardExtras extras;
      LossTerms terms = training_loss(batch, model.denoiser(batch.batch, batch.pad_rows(), &extras), model.table(),
                                      schedule, cfg.model.lambda_reg, cfg.model.anchor_coef);
      Tensor loss = terms.total;
      if (extras.aux_loss.defined()) loss = add(loss, scale(extras.aux_loss, cfg.model.moe_aux_coef));

      StepRecord rec{step + 1, si, loss.item(), terms.mse, terms.reg, terms.anchor, learning_rate(cfg.optim, step)};
      if (!std::isfinite(rec.loss)) {
        throw NumericError("training loss became non-finite at step " + std::to_string(rec.step));
      }
      opt.zero_grad();
      backward(loss);
      const double norm = clip_grad_norm(params, cfg.optim.grad_clip);
      if (!std::isfinite(norm)) throw NumericError("gradient became non-finite at step " + std::to_string(rec.step));
      opt.step(rec.lr);
      ++step;
      result.history.push_back(rec);
      if (hooks.log && (rec.step == 1 || rec.step % cfg.optim.log_every == 0 || rec.step == total)) {
        *hooks.log << format_step(rec) << '\n';
      }
      const bool periodic = cfg.optim.checkpoint_every > 0 && rec.step % cfg.optim.checkpoint_every == 0;
      if (hooks.checkpoint && (periodic || rec.step == total)) {
        hooks.checkpoint(rec.step);
        ++result.checkpoints_written;
      }
    }
  }
  if (hooks.log) hooks.log->flush();
  return result;
}

/// Trailing moving average of the per-step loss.
inline std::vector<double> moving_average(const std::vector<StepRecord>& history, std::size_t window) {
  std::vector<double> out;
  if (window == 0 || history.size() < window) return out;
  double s = 0.0;
  for (std::size_t i = 0; i < history.size(); ++i) {
    s += history[i].loss;
    if (i >= window) s -= history[i - window].loss;
    if (i + 1 >= window) out.push_back(s / static_cast<double>(window));
  }
  return out;
}

}  // namespace sadq
