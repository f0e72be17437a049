// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "sadq/sampler.hpp"
#include "test_util.hpp"

namespace sadq {
namespace {

TEST(StepSchedule, EveryStep) {
  const auto t = make_step_schedule(2048, 2048);
  ASSERT_EQ(t.size(), 2048u);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(t[i], 2048 - i);
}

TEST(StepSchedule, Endpoints) {
  EXPECT_EQ(make_step_schedule(2048, 2), (std::vector<std::size_t>{2048, 1}));
  EXPECT_EQ(make_step_schedule(10, 1), (std::vector<std::size_t>{10}));
}

TEST(StepSchedule, UniformSpacingWithinRounding) {
  for (std::size_t k : {3u, 7u, 64u, 100u}) {
    const auto t = make_step_schedule(256, k);
    EXPECT_EQ(t.front(), 256u);
    EXPECT_EQ(t.back(), 1u);
    const double ideal = 255.0 / static_cast<double>(k - 1);
    for (std::size_t i = 1; i < t.size(); ++i) {
      const double gap = static_cast<double>(t[i - 1] - t[i]);
      EXPECT_LE(std::abs(gap - ideal), 1.0);
    }
  }
}

TEST(StepSchedule, Errors) {
  EXPECT_THROW(make_step_schedule(16, 17), ConfigError);
  EXPECT_THROW(make_step_schedule(16, 0), ConfigError);
  EXPECT_THROW(SamplerConfig::validate_times(std::vector<std::size_t>{16, 16, 1}, 16), ConfigError);
  EXPECT_THROW(SamplerConfig::validate_times(std::vector<std::size_t>{15, 1}, 16), ConfigError);
  EXPECT_THROW(SamplerConfig::validate_times(std::vector<std::size_t>{16, 0}, 16), ConfigError);
  SamplerConfig cfg;
  cfg.times = {8, 5, 2};
  EXPECT_EQ(cfg.resolved_times(8), cfg.times);
}

TEST(Euler, ZeroDriftKeepsState) {
  Rng rng(61);
  const Tensor z = randn({3, 2}, rng);
  const auto zero = [](const Tensor& s, double) { return Tensor::zeros(s.shape()); };
  EXPECT_EQ(euler_step(z, 5.0, 2.0, zero).values(), z.values());
}

TEST(Euler, ConstantDriftIsExact) {
  const Tensor z = Tensor::vector({1.0, -2.0});
  const auto c = [](const Tensor&, double) { return Tensor::vector({0.5, 4.0}); };
  const Tensor out = euler_step(z, 3.0, 1.0, c);
  EXPECT_EQ(out.values(), (std::vector<double>{1.0 - 2.0 * 0.5, -2.0 - 2.0 * 4.0}));
}

TEST(Euler, RejectsForwardStepAndNonFiniteDrift) {
  const Tensor z = Tensor::vector({1.0});
  const auto zero = [](const Tensor& s, double) { return Tensor::zeros(s.shape()); };
  EXPECT_THROW(euler_step(z, 1.0, 1.0, zero), ConfigError);
  const auto bad = [](const Tensor&, double) { return Tensor::vector({NAN}); };
  try {
    euler_step(z, 7.0, 6.0, bad);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("7.0"), std::string::npos) << e.what();
  }
}

// Global error at τ = 0 integrating dz/dτ = a z backwards from τ = 1.
double linear_ode_error(std::size_t steps) {
  const double a = 1.3, z1 = 0.8;
  const auto drift = [a](const Tensor& z, double) { return scale(z, a); };
  Tensor z = Tensor::vector({z1});
  for (std::size_t i = 0; i < steps; ++i) {
    const double from = 1.0 - static_cast<double>(i) / steps, to = 1.0 - static_cast<double>(i + 1) / steps;
    z = euler_step(z, from, to, drift);
  }
  return std::abs(z.item() - z1 * std::exp(-a));
}

TEST(Euler, ErrorHalvesWhenStepsDouble) {
  for (std::size_t n : {32u, 64u, 128u, 256u}) {
    const double ratio = linear_ode_error(n) / linear_ode_error(2 * n);
    EXPECT_GE(ratio, 1.8) << n;
    EXPECT_LE(ratio, 2.2) << n;
  }
}

TEST(Euler, FirstOrderLogLogSlope) {
  std::vector<double> lx, ly;
  for (std::size_t n = 16; n <= 1024; n *= 2) {
    lx.push_back(std::log(1.0 / n));
    ly.push_back(std::log(linear_ode_error(n)));
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / lx.size();
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / ly.size();
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  const double slope = sxy / sxx;
  EXPECT_GE(slope, 0.8);
  EXPECT_LE(slope, 1.2);
}

TEST(Drift, VanishesAsSignalApproachesOne) {
  Rng rng(62);
  const Tensor x = randn({2, 3}, rng);
  for (double delta : {1e-2, 1e-4, 1e-6}) {
    const NoiseSchedule s("x", {1.0, 1.0 - delta, 0.5, 0.0});
    const Tensor d = probability_flow_drift(x, x, 1.0, s);
    double norm = 0.0;
    for (double v : d.data()) norm = std::max(norm, std::abs(v));
    EXPECT_LE(norm, 1e-12);
  }
}

TEST(Drift, ImpliedNoiseReconstructsState) {
  Rng rng(63);
  const NoiseSchedule s = sqrt_schedule(64);
  for (double tau : {1.0, 17.5, 40.0, 64.0}) {
    const Tensor z = randn({4, 3}, rng), x0 = randn({4, 3}, rng);
    const Tensor eps = implied_noise(z, x0, tau, s);
    const Tensor back = add(scale(x0, s.signal(tau)), scale(eps, s.noise(tau)));
    EXPECT_LT(testing::max_abs_diff(back.data(), z.data()), 1e-12);
  }
}

TEST(Drift, FixedRowsDoNotMove) {
  Rng rng(64);
  const NoiseSchedule s = sqrt_schedule(16);
  const Tensor z = randn({3, 2}, rng), x0 = randn({3, 2}, rng);
  const std::vector<std::uint8_t> fixed{1, 0, 1};
  const Tensor d = probability_flow_drift(z, x0, 9.0, s, fixed);
  for (std::size_t c = 0; c < 2; ++c) {
    EXPECT_EQ(d.at(0, c), 0.0);
    EXPECT_NE(d.at(1, c), 0.0);
    EXPECT_EQ(d.at(2, c), 0.0);
  }
}

TEST(Drift, UnitEulerStepEqualsDeterministicJump) {
  // With unit steps the Euler update lands on a_{t-1} ẑ_0 + b_{t-1} ε̂.
  Rng rng(65);
  const NoiseSchedule s = sqrt_schedule(32);
  const Tensor w = randn({3, 3}, rng);
  const Predictor predict = [&](const Tensor& z, double) {
    std::vector<double> out(z.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(z.data()[i] * w.data()[i % 9]);
    return Tensor(z.shape(), out);
  };
  const Tensor z = randn({3, 3}, rng);
  for (std::size_t t : {32u, 20u, 2u}) {
    const Tensor stepped = euler_step(z, t, t - 1.0, drift_from_denoiser(predict, s));
    const Tensor x0 = predict(z, t);
    const Tensor eps = implied_noise(z, x0, t, s);
    const Tensor jump = add(scale(x0, std::sqrt(s.alpha_bar(t - 1))), scale(eps, std::sqrt(1.0 - s.alpha_bar(t - 1))));
    EXPECT_LT(testing::max_abs_diff(stepped.data(), jump.data()), 1e-12) << t;
  }
}

TEST(Reverse, PerfectDenoiserFollowsExactPath) {
  // With ẑ_0 fixed at the true z_0 the exact flow is z(τ) = a(τ) z_0 + b(τ) ε. Unit steps
  // reproduce it; coarser grids converge toward it as the step count grows.
  const std::size_t T = 256;
  const NoiseSchedule s = sqrt_schedule(T);
  Rng rng(66);
  const Tensor z0 = Tensor::matrix(1, 2, {0.6, -1.1});
  const Predictor perfect = [&](const Tensor&, double) { return z0; };
  auto rms_error = [&](std::size_t steps) {
    Rng draws(67);
    double sq = 0.0;
    for (int i = 0; i < 20; ++i) {
      const Tensor eps = randn({1, 2}, draws);
      const Tensor start = add(scale(z0, s.signal(T)), scale(eps, s.noise(T)));
      const Trajectory tr = integrate_reverse(start, perfect, s, make_step_schedule(T, steps));
      const Tensor exact = add(scale(z0, s.signal(1)), scale(eps, s.noise(1)));
      for (std::size_t c = 0; c < 2; ++c) sq += std::pow(tr.z.at(0, c) - exact.at(0, c), 2);
      EXPECT_EQ(tr.x0.values(), z0.values());
    }
    return std::sqrt(sq / 40);
  };
  EXPECT_LT(rms_error(T), 1e-10);
  const double e16 = rms_error(16), e64 = rms_error(64), e128 = rms_error(128);
  EXPECT_GT(e16, e64);
  EXPECT_GT(e64, e128);
}

TEST(Reverse, GaussianPosteriorMeanDenoiserRecoversData) {
  // Data z_0 ~ N(μ, σ² I); the optimal denoiser is the posterior mean.
  const std::size_t T = 256;
  const NoiseSchedule s = sqrt_schedule(T);
  const double sigma = 0.02;
  const Tensor mu = Tensor::matrix(1, 2, {1.5, -0.5});
  const Predictor posterior = [&](const Tensor& z, double tau) {
    const double a = s.signal(tau), b = s.noise(tau);
    const double gain = a * sigma * sigma / (a * a * sigma * sigma + b * b);
    std::vector<double> out(z.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = mu.data()[i % 2] + gain * (z.data()[i] - a * mu.data()[i % 2]);
    return Tensor(z.shape(), out);
  };
  Rng rng(67);
  double sq = 0.0;
  const std::size_t trials = 100;
  for (std::size_t i = 0; i < trials; ++i) {
    const Trajectory tr = integrate_reverse(randn({1, 2}, rng), posterior, s, make_step_schedule(T, 64));
    for (std::size_t c = 0; c < 2; ++c) sq += std::pow(tr.x0.at(0, c) - mu.at(0, c), 2);
  }
  EXPECT_LE(std::sqrt(sq / (2 * trials)), 0.05);
}

TEST(Reverse, CopyOracleReproducesSource) {
  // A denoiser that reads the answer off the clean source rows copies exactly.
  Rng rng(68);
  const EmbeddingTable table(10, 6, rng);
  const NoiseSchedule s = sqrt_schedule(64);
  const SequenceLayout layout{5};
  const TokenSeq src{3, 7, 2, 9};
  std::vector<std::size_t> tokens;
  std::vector<Role> roles;
  layout.append(src, {}, src.size(), tokens, roles);
  std::vector<std::uint8_t> fixed(roles.size());
  for (std::size_t r = 0; r < roles.size(); ++r) fixed[r] = roles[r] != Role::kTarget;
  Tensor z = embed(tokens, table).detach();
  for (std::size_t r = 0; r < roles.size(); ++r)
    if (!fixed[r])
      for (std::size_t c = 0; c < 6; ++c) z.data()[r * 6 + c] = rng.normal();
  const Predictor oracle = [&](const Tensor& state, double) {
    std::vector<double> out = state.values();
    for (std::size_t i = 0; i < src.size(); ++i)
      for (std::size_t c = 0; c < 6; ++c) out[(layout.target_begin() + i) * 6 + c] = state.at(i, c);
    return Tensor(state.shape(), out);
  };
  for (std::size_t steps : {64u, 8u}) {
    const Trajectory tr = integrate_reverse(z, oracle, s, make_step_schedule(64, steps), fixed);
    const auto ids = round_to_tokens(tr.x0, table);
    EXPECT_EQ(TokenSeq(ids.begin() + layout.target_begin(), ids.begin() + layout.target_begin() + 4), src);
    for (std::size_t r = 0; r < roles.size(); ++r) {
      if (!fixed[r]) continue;
      for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(tr.z.at(r, c), z.at(r, c));
    }
  }
}

TEST(Reverse, DegenerateNoiseUsesDirectReplacement) {
  const NoiseSchedule s("x", {1.0, 1.0, 0.5});
  const Tensor x0 = Tensor::matrix(1, 2, {2.0, 3.0});
  const Predictor p = [&](const Tensor&, double) { return x0; };
  const std::vector<std::size_t> times{2, 1};
  const Trajectory tr = integrate_reverse(Tensor::matrix(1, 2, {0.1, 0.2}), p, s, times);
  for (double v : tr.z.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(tr.x0.values(), x0.values());
  EXPECT_EQ(implied_noise(x0, x0, 1.0, s).values(), (std::vector<double>{0.0, 0.0}));
}

TEST(Reverse, ClampSnapsPredictionsToEmbeddings) {
  Rng rng(69);
  const EmbeddingTable table(4, 3, rng);
  const NoiseSchedule s = sqrt_schedule(16);
  std::vector<Tensor> seen;
  const Predictor p = [&](const Tensor& z, double) { return scale(z, 0.5); };
  const Tensor z = randn({2, 3}, rng);
  const Trajectory tr = integrate_reverse(z, p, s, make_step_schedule(16, 4), {}, &table);
  const auto ids = round_to_tokens(tr.x0, table);
  EXPECT_LT(testing::max_abs_diff(tr.x0.data(), embed(ids, table).data()), 1e-15);
}

TEST(Sample, DeterministicAndScheduleChecked) {
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.width = 16;
  mc.embed_dim = 8;
  mc.ffn_hidden = 16;
  mc.window = 4;
  mc.vocab = 8;
  mc.diffusion_steps = 32;
  mc.max_len = 16;
  const SADiffuSeqModel model(mc);
  const std::vector<TokenSeq> sources{{2, 3, 4}, {5, 6}, {7}};
  SamplerConfig sc;
  sc.num_steps = 8;
  sc.seed = 5;
  sc.batch_size = 2;
  const SequenceLayout layout{4};
  const auto a = sample(model, sources, sc, sqrt_schedule(32), layout);
  const auto b = sample(model, sources, sc, sqrt_schedule(32), layout);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a[i].size(), sources[i].size());
    for (auto id : a[i]) EXPECT_LT(id, mc.vocab);
  }
  EXPECT_THROW(sample(model, sources, sc, sqrt_schedule(64), layout), ConfigError);
  EXPECT_THROW(sample(model, sources, sc, NoiseSchedule("x", std::vector<double>(33, 0.5)), layout), ConfigError);
  sc.num_steps = 33;
  EXPECT_THROW(sample(model, sources, sc, sqrt_schedule(32), layout), ConfigError);
  sc.num_steps = 8;
  EXPECT_THROW(sample(model, std::vector<TokenSeq>{{8}}, sc, sqrt_schedule(32), layout), ConfigError);
}

TEST(Sample, BatchSizeDoesNotChangeSingleBatchResults) {
  ModelConfig mc;
  mc.layers = 1;
  mc.heads = 2;
  mc.width = 16;
  mc.embed_dim = 8;
  mc.ffn_hidden = 16;
  mc.window = 4;
  mc.vocab = 8;
  mc.diffusion_steps = 16;
  mc.max_len = 16;
  const SADiffuSeqModel model(mc);
  SamplerConfig sc;
  sc.num_steps = 4;
  const std::vector<TokenSeq> one{{2, 3, 4, 5}};
  const auto a = sample(model, one, sc, sqrt_schedule(16), SequenceLayout{5});
  sc.clamp = true;
  const auto b = sample(model, one, sc, sqrt_schedule(16), SequenceLayout{5});
  EXPECT_EQ(a.front().size(), 4u);
  EXPECT_EQ(b.front().size(), 4u);
}

}  // namespace
}  // namespace sadq
