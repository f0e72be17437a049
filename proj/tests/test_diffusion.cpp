// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "sadq/diffusion.hpp"
#include "sadq/numeric/gradcheck.hpp"
#include "sadq/numeric/nn.hpp"
#include "test_util.hpp"

namespace sadq {
namespace {

TEST(Schedule, StartAndEndValues) {
  const NoiseSchedule s = sqrt_schedule(2048);
  EXPECT_EQ(s.steps(), 2048u);
  EXPECT_NEAR(s.alpha_bar(0), 0.99, 1e-15);
  EXPECT_LE(s.alpha_bar(2048), 0.01);
  EXPECT_GE(s.alpha_bar(2048), 0.0);
  EXPECT_EQ(s.family(), "sqrt");
}

TEST(Schedule, MatchesClosedFormAtEveryStep) {
  const NoiseSchedule s = sqrt_schedule(64);
  for (std::size_t t = 0; t <= 64; ++t) {
    const double want = std::max(0.0, 1.0 - std::sqrt(static_cast<double>(t) / 64.0 + 1e-4));
    EXPECT_DOUBLE_EQ(s.alpha_bar(t), want);
  }
}

class ScheduleLengths : public ::testing::TestWithParam<std::size_t> {};

TEST_P(ScheduleLengths, StrictlyDecreasingWithinRange) {
  const NoiseSchedule s = sqrt_schedule(GetParam());
  for (std::size_t t = 0; t <= s.steps(); ++t) {
    if (t < s.steps()) {
      EXPECT_GT(s.alpha_bar(t), 0.0);
      EXPECT_GT(s.alpha_bar(t), s.alpha_bar(t + 1));
    }
    EXPECT_LE(s.alpha_bar(t), 1.0);
  }
  EXPECT_GE(s.alpha_bar(s.steps()), 0.0);
}

INSTANTIATE_TEST_SUITE_P(Lengths, ScheduleLengths, ::testing::Values(8, 64, 1024, 2048, 4096));

TEST(Schedule, InvalidInputsAreConfigErrors) {
  EXPECT_THROW(sqrt_schedule(0), ConfigError);
  EXPECT_THROW(NoiseSchedule("x", {1.0, 0.5, 0.7}), ConfigError);
  EXPECT_THROW(NoiseSchedule("x", {1.2, 0.5}), ConfigError);
  EXPECT_THROW(NoiseSchedule("x", {1.0, 0.0, 0.0}), ConfigError);
  EXPECT_THROW(sqrt_schedule(8).check_step(9), ConfigError);
}

TEST(Schedule, InterpolationAndSlopes) {
  const NoiseSchedule s("x", {1.0, 0.64, 0.36, 0.0});
  EXPECT_DOUBLE_EQ(s.signal(1.0), 0.8);
  EXPECT_DOUBLE_EQ(s.signal(1.5), 0.7);
  EXPECT_DOUBLE_EQ(s.noise(2.0), 0.8);
  EXPECT_DOUBLE_EQ(s.signal_slope(1.5), 0.6 - 0.8);
  EXPECT_DOUBLE_EQ(s.signal_slope(2.0), 0.6 - 0.8);
  EXPECT_DOUBLE_EQ(s.noise_slope(3.0), 1.0 - 0.8);
  EXPECT_THROW(s.signal(3.5), ConfigError);
  EXPECT_THROW(s.signal_slope(0.0), ConfigError);
  EXPECT_NE(s.fingerprint(), NoiseSchedule("x", {1.0, 0.64, 0.36, 0.01}).fingerprint());
}

TEST(ForwardDiffuse, EndpointCoefficients) {
  Rng rng(41);
  const Tensor z0 = randn({3, 4}, rng), eps = randn({3, 4}, rng);
  const NoiseSchedule s("x", {1.0, 0.0});
  EXPECT_EQ(forward_diffuse(z0, 0, eps, s).values(), z0.values());
  EXPECT_EQ(forward_diffuse(z0, 1, eps, s).values(), eps.values());
}

TEST(ForwardDiffuse, AffineCombinationOnNoisedRowsOnly) {
  Rng rng(42);
  const NoiseSchedule s = sqrt_schedule(32);
  const Tensor z0 = randn({4, 3}, rng), eps = randn({4, 3}, rng);
  const std::vector<std::uint8_t> noised{0, 1, 1, 0};
  const Tensor zt = forward_diffuse(z0, 20, eps, s, noised);
  const double a = std::sqrt(s.alpha_bar(20)), b = std::sqrt(1.0 - s.alpha_bar(20));
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      if (noised[r]) {
        EXPECT_NEAR(zt.at(r, c), a * z0.at(r, c) + b * eps.at(r, c), 1e-15);
      } else {
        EXPECT_EQ(zt.at(r, c), z0.at(r, c));
      }
    }
}

TEST(ForwardDiffuse, Errors) {
  Rng rng(43);
  const NoiseSchedule s = sqrt_schedule(8);
  EXPECT_THROW(forward_diffuse(randn({2, 2}, rng), 9, randn({2, 2}, rng), s), ConfigError);
  EXPECT_THROW(forward_diffuse(randn({2, 2}, rng), 1, randn({2, 3}, rng), s), ShapeError);
}

TEST(ForwardDiffuse, MonteCarloMomentsFollowTheAffineLaw) {
  const std::size_t T = 2048, draws = 100000;
  const NoiseSchedule s = sqrt_schedule(T);
  const Tensor z0 = Tensor::vector({0.7, -1.3});
  Rng rng(44);
  for (std::size_t t : {T / 4, T / 2, T}) {
    const double ab = s.alpha_bar(t);
    for (std::size_t c = 0; c < 2; ++c) {
      double m = 0.0, m2 = 0.0;
      for (std::size_t i = 0; i < draws; ++i) {
        const double v = forward_diffuse(z0, t, randn({2}, rng), s).at(c);
        m += v;
        m2 += v * v;
      }
      m /= draws;
      const double var = m2 / draws - m * m;
      const double want_mean = std::sqrt(ab) * z0.at(c), want_var = 1.0 - ab;
      EXPECT_NEAR(m, want_mean, 3.0 * std::sqrt(want_var / draws)) << "t=" << t;
      EXPECT_NEAR(var, want_var, 3.0 * want_var * std::sqrt(2.0 / (draws - 1))) << "t=" << t;
    }
  }
}

TEST(Absorbing, ZeroRateLeavesLatentsAlone) {
  Rng rng(45);
  const NoiseSchedule s = sqrt_schedule(16);
  const Tensor zt = randn({6, 3}, rng), m = randn({3}, rng);
  const auto r = apply_absorbing_state(zt, 16, s, m, 0.0, rng);
  EXPECT_EQ(r.zt.values(), zt.values());
  EXPECT_EQ(r.mask, std::vector<std::uint8_t>(6, 0));
}

TEST(Absorbing, CleanStepNeverAbsorbs) {
  Rng rng(46);
  const NoiseSchedule s("x", {1.0, 0.5});
  const Tensor zt = randn({6, 3}, rng), m = randn({3}, rng);
  EXPECT_EQ(apply_absorbing_state(zt, 0, s, m, 1.0, rng).zt.values(), zt.values());
  EXPECT_DOUBLE_EQ(absorbing_probability(0.1, 1, s), 0.05);
}

TEST(Absorbing, FullRateAtPureNoiseReplacesEveryEligibleRow) {
  Rng rng(47);
  const NoiseSchedule s("x", {1.0, 0.0});
  const Tensor zt = randn({4, 3}, rng), m = Tensor::vector({9, 8, 7});
  const std::vector<std::uint8_t> eligible{1, 0, 1, 1};
  const auto r = apply_absorbing_state(zt, 1, s, m, 1.0, rng, eligible);
  EXPECT_EQ(r.mask, eligible);
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(r.zt.at(0, c), m.at(c));
    EXPECT_EQ(r.zt.at(1, c), zt.at(1, c));
  }
}

TEST(Absorbing, EmpiricalRateMatchesProbability) {
  Rng rng(48);
  const NoiseSchedule s = sqrt_schedule(64);
  const std::size_t rows = 20000;
  const auto r = apply_absorbing_state(Tensor::zeros({rows, 1}), 40, s, Tensor::vector({1}), 0.3, rng);
  const double p = absorbing_probability(0.3, 40, s);
  double hits = 0;
  for (auto b : r.mask) hits += b;
  EXPECT_NEAR(hits / rows, p, 3.0 * std::sqrt(p * (1 - p) / rows));
}

TEST(Absorbing, InvalidRateIsConfigError) {
  Rng rng(49);
  const NoiseSchedule s = sqrt_schedule(8);
  EXPECT_THROW(apply_absorbing_state(Tensor::zeros({1, 2}), 3, s, Tensor::zeros({2}), 1.5, rng), ConfigError);
  EXPECT_THROW(apply_absorbing_state(Tensor::zeros({1, 2}), 3, s, Tensor::zeros({3}), 0.5, rng), ShapeError);
}

TEST(Embedding, LookupAndErrors) {
  Rng rng(50);
  const EmbeddingTable table(5, 3, rng);
  EXPECT_EQ(table.weight().rows(), 6u);
  EXPECT_EQ(table.absorbing_id(), 5u);
  const std::vector<std::size_t> ids{0, 3, 3};
  const Tensor z = embed(ids, table);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(z.at(r, c), table.weight().at(ids[r], c));
  EXPECT_THROW(embed(std::vector<std::size_t>{5}, table), ShapeError);
}

TEST(Embedding, GradientIsOneHotRows) {
  Rng rng(51);
  const EmbeddingTable table(4, 3, rng);
  const std::vector<std::size_t> ids{2};
  auto f = [&](const Tensor& w) { return sum(embed(ids, EmbeddingTable(4, w))); };
  EXPECT_LT(finite_difference_check(f, table.weight()), 1e-8);
  Tensor w = table.weight().detach();
  w.set_requires_grad(true);
  backward(f(w));
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(w.grad()[r * 3 + c], r == 2 ? 1.0 : 0.0);
}

TEST(Rounding, ExactRowsRoundTrip) {
  Rng rng(52);
  const EmbeddingTable table(7, 4, rng);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::size_t> ids(10);
    for (auto& id : ids) id = rng.uniform_int(0, 6);
    EXPECT_EQ(round_to_tokens(embed(ids, table), table), ids);
  }
}

TEST(Rounding, SmallPerturbationKeepsToken) {
  Rng rng(53);
  const EmbeddingTable table(6, 5, rng);
  double gap = INFINITY;
  for (std::size_t a = 0; a < 6; ++a)
    for (std::size_t b = a + 1; b < 6; ++b) {
      double d = 0.0;
      for (std::size_t c = 0; c < 5; ++c) d += std::pow(table.weight().at(a, c) - table.weight().at(b, c), 2);
      gap = std::min(gap, std::sqrt(d));
    }
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t j = rng.uniform_int(0, 5);
    Tensor dir = randn({1, 5}, rng);
    double norm = 0.0;
    for (double v : dir.data()) norm += v * v;
    const double radius = 0.49 * gap * rng.uniform() / std::sqrt(norm);
    std::vector<double> z(5);
    for (std::size_t c = 0; c < 5; ++c) z[c] = table.weight().at(j, c) + radius * dir.at(c);
    EXPECT_EQ(round_to_tokens(Tensor::matrix(1, 5, z), table)[0], j);
  }
}

TEST(Rounding, IgnoresAbsorbingRowAndBreaksTiesLow) {
  const EmbeddingTable table(2, Tensor::matrix(3, 1, {-1.0, 1.0, 0.0}));
  EXPECT_EQ(round_to_tokens(Tensor::matrix(2, 1, {0.0, 0.01}), table), (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(round_to_tokens(Tensor::zeros({1, 2}), table), ShapeError);
}

TEST(RoundingLogits, ArgmaxAgreesWithNearestRow) {
  Rng rng(54);
  const EmbeddingTable table(9, 4, rng);
  const Tensor z = randn({30, 4}, rng);
  const Tensor logits = rounding_logits(z, table);
  const auto ids = round_to_tokens(z, table);
  for (std::size_t r = 0; r < 30; ++r) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < 9; ++v)
      if (logits.at(r, v) > logits.at(r, best)) best = v;
    EXPECT_EQ(best, ids[r]);
  }
}

DiffusionBatch one_position_batch(double e0, double e1) {
  DiffusionBatch b;
  b.batch = 1;
  b.n = 1;
  b.tokens = {0};
  b.roles = {Role::kTarget};
  b.t = {2};
  b.z0 = Tensor::matrix(1, 2, {e0, e1});
  b.eps = Tensor::zeros({1, 2});
  b.zt = b.z0;
  return b;
}

TEST(TrainingLoss, PerfectDenoiserHasZeroLoss) {
  Rng rng(55);
  const EmbeddingTable table(4, 3, rng);
  const NoiseSchedule s = sqrt_schedule(16);
  const DiffusionBatch b = corrupt_batch(2, 3, {0, 1, 2, 3, 2, 1}, {Role::kSource, Role::kTarget, Role::kTarget,
                                                                    Role::kSource, Role::kTarget, Role::kPad},
                                         {5, 16}, table, s, 0.1, rng);
  const Tensor clean = b.z0;
  const LossTerms l = training_loss(b, [&](const Tensor&, std::span<const double>) { return clean; }, table, s, 0.0);
  EXPECT_EQ(l.total.item(), 0.0);
}

TEST(TrainingLoss, HandCase) {
  Rng rng(56);
  const EmbeddingTable table(1, Tensor::matrix(2, 2, {1, 0, 0, 0}));
  const DiffusionBatch b = one_position_batch(1, 0);
  const auto zero = [](const Tensor& z, std::span<const double>) { return Tensor::zeros(z.shape()); };
  EXPECT_DOUBLE_EQ(training_loss(b, zero, table, sqrt_schedule(8), 0.0).total.item(), 1.0);
  const LossTerms reg = training_loss(b, zero, table, sqrt_schedule(8), 0.5);
  EXPECT_DOUBLE_EQ(reg.reg, 0.5);
  EXPECT_DOUBLE_EQ(reg.total.item(), 1.5);
}

TEST(TrainingLoss, RejectsStepBelowTwo) {
  const EmbeddingTable table(1, Tensor::matrix(2, 2, {1, 0, 0, 0}));
  DiffusionBatch b = one_position_batch(1, 0);
  b.t = {1};
  const auto id = [](const Tensor& z, std::span<const double>) { return z; };
  EXPECT_THROW(training_loss(b, id, table, sqrt_schedule(8), 0.0), ConfigError);
}

TEST(TrainingLoss, NonNegativeAndIgnoresNonTargetPredictions) {
  Rng rng(57);
  const EmbeddingTable table(5, 3, rng);
  const NoiseSchedule s = sqrt_schedule(32);
  for (int trial = 0; trial < 10; ++trial) {
    const DiffusionBatch b = corrupt_batch(1, 4, {1, 2, 3, 0}, {Role::kSource, Role::kTarget, Role::kTarget, Role::kPad},
                                           {rng.uniform_int(2, 32)}, table, s, 0.5, rng);
    const Tensor pred = randn({4, 3}, rng);
    Tensor altered = pred.detach();
    for (std::size_t c = 0; c < 3; ++c) {
      altered.data()[c] += 5.0;
      altered.data()[9 + c] -= 3.0;
    }
    const auto f = [](const Tensor& p) { return [p](const Tensor&, std::span<const double>) { return p; }; };
    const double a = training_loss(b, f(pred), table, s, 1e-3).total.item();
    EXPECT_GE(a, 0.0);
    EXPECT_EQ(a, training_loss(b, f(altered), table, s, 1e-3).total.item());
  }
}

TEST(CorruptBatch, SourceRowsStayCleanAndAbsorptionHitsTargetsOnly) {
  Rng rng(58);
  const EmbeddingTable table(6, 4, rng);
  const NoiseSchedule s = sqrt_schedule(16);
  std::vector<std::size_t> tokens;
  std::vector<Role> roles;
  for (int i = 0; i < 40; ++i) {
    tokens.push_back(static_cast<std::size_t>(i % 6));
    roles.push_back(i % 3 == 0 ? Role::kSource : (i % 3 == 1 ? Role::kTarget : Role::kPad));
  }
  const DiffusionBatch b = corrupt_batch(4, 10, tokens, roles, {16, 16, 9, 2}, table, s, 1.0, rng);
  std::size_t absorbed = 0;
  for (std::size_t r = 0; r < 40; ++r) {
    if (roles[r] != Role::kTarget) {
      EXPECT_EQ(b.absorbed[r], 0);
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(b.zt.at(r, c), b.z0.at(r, c));
    }
    absorbed += b.absorbed[r];
  }
  EXPECT_GT(absorbed, 0u);
}

TEST(TrainingLoss, GradientsThroughToyDenoiser) {
  Rng rng(59);
  EmbeddingTable table(5, 3, rng);
  const NoiseSchedule s = sqrt_schedule(16);
  const Linear l1(3, 6, rng), l2(6, 3, rng);
  const auto denoiser = [&](const Tensor& z, std::span<const double>) { return l2(gelu(l1(z))); };
  const std::vector<std::size_t> tokens{1, 4, 2, 0, 3, 3};
  const std::vector<Role> roles{Role::kSource, Role::kTarget, Role::kTarget, Role::kSource, Role::kTarget, Role::kPad};
  auto loss = [&] {
    Rng noise(7);
    const DiffusionBatch b = corrupt_batch(2, 3, tokens, roles, {4, 12}, table, s, 0.2, noise);
    return training_loss(b, denoiser, table, s, 1e-3, 1.0).total;
  };
  std::vector<Tensor> params{l1.weight, l1.bias, l2.weight, l2.bias, table.weight()};
  EXPECT_LT(testing::param_gradcheck(loss, params), 1e-4);
}

}  // namespace
}  // namespace sadq
