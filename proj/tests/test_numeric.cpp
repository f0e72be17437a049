// Copyright 2026 The sadq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "sadq/numeric/checkpoint.hpp"
#include "sadq/numeric/gradcheck.hpp"
#include "sadq/numeric/nn.hpp"
#include "sadq/numeric/ops.hpp"
#include "sadq/numeric/random.hpp"
#include "test_util.hpp"

namespace sadq {
namespace {

constexpr double kGradTol = 1e-4;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Rng rng(1);
  const Tensor m = randn({3, 4}, rng);
  EXPECT_EQ(matmul(Tensor::identity(3), m).values(), m.values());
}

TEST(Matmul, HandComputed) {
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor b = Tensor::matrix(2, 1, {1, 1});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(c.values(), (std::vector<double>{3, 7}));
}

TEST(Matmul, MatchesTripleLoop) {
  Rng rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor a = randn({4, 5}, rng), b = randn({5, 2}, rng);
    EXPECT_LT(testing::max_abs_diff(matmul(a, b).data(), testing::naive_matmul(a, b)), 1e-12);
  }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("(2,3) x (2,3)"), std::string::npos) << e.what();
  }
}

TEST(Softmax, UniformOnEqualInputs) {
  const Tensor s = softmax(Tensor::vector({0, 0, 0}), 0);
  for (double v : s.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Softmax, LargeInputsStayFinite) {
  const Tensor s = softmax(Tensor::vector({1000, 0}), 0);
  for (double v : s.data()) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(s.at(0), 1.0, 1e-12);
  EXPECT_LT(s.at(1), 1e-300);
}

TEST(Softmax, MatchesDirectFormula) {
  Rng rng(3);
  const Tensor x = randn({7}, rng);
  const Tensor s = softmax(x, 0);
  long double z = 0.0L;
  for (double v : x.data()) z += std::exp(static_cast<long double>(v));
  for (std::size_t i = 0; i < 7; ++i) {
    EXPECT_NEAR(s.at(i), static_cast<double>(std::exp(static_cast<long double>(x.at(i))) / z), 1e-12);
  }
}

TEST(Softmax, RowsSumToOneAlongEveryAxis) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = randn({3, 4, 5}, rng, 10.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      const Tensor s = softmax(x, axis);
      const Tensor total = sum(s);
      EXPECT_NEAR(total.item(), static_cast<double>(x.numel() / x.dim(axis)), 1e-9);
      for (double v : s.data()) EXPECT_GE(v, 0.0);
    }
  }
  const Tensor s = softmax(randn({6, 9}, rng, 30.0), 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double row = 0.0;
    for (std::size_t c = 0; c < 9; ++c) row += s.at(r, c);
    EXPECT_NEAR(row, 1.0, 1e-9);
  }
}

TEST(Softmax, RejectsInvalidAxis) { EXPECT_THROW(softmax(Tensor::zeros({2, 2}), 2), ShapeError); }

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::vector({1, -2, 3});
  x.set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SumOfSquaresGivesTwiceInput) {
  Tensor x = Tensor::vector({1.5, -2, 0.25});
  x.set_requires_grad(true);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x.at(i));
}

TEST(Backward, RejectsNonScalarLoss) {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  EXPECT_THROW(backward(scale(x, 2.0)), GraphError);
}

TEST(Backward, RejectsDetachedLoss) {
  const Tensor x = Tensor::vector({1, 2});
  EXPECT_THROW(backward(sum(x)), GraphError);
}

TEST(Backward, SecondCallWithoutForwardIsAnError) {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  const Tensor loss = sum(square(x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::vector({3});
  x.set_requires_grad(true);
  const Tensor y = scale(x, 2.0);
  backward(sum(add(mul(y, y), y)));  // 4x² + 2x
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0 * 3.0 + 2.0);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::vector({1, 2});
  x.set_requires_grad(true);
  Tensor y;
  {
    NoGradGuard guard;
    y = sum(square(x));
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_THROW(backward(y), GraphError);
}

TEST(GradCheck, QuadraticIsExact) {
  const double err = finite_difference_check([](const Tensor& x) { return sum(square(x)); }, Tensor::vector({1, 2}));
  EXPECT_LT(err, 1e-8);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
  Rng rng(5);
  const std::vector<std::size_t> target{3};
  const std::vector<double> w{1.0};
  auto f = [&](const Tensor& x) { return cross_entropy(x.reshaped({1, 5}), target, w); };
  EXPECT_LT(finite_difference_check(f, randn({5}, rng)), kGradTol);
}

TEST(GradCheck, RandomnessInsideFunctionIsRejected) {
  Rng rng(6);
  auto f = [&](const Tensor& x) { return sum(mul(x, randn(x.shape(), rng))); };
  EXPECT_THROW(finite_difference_check(f, Tensor::vector({1, 2, 3})), GraphError);
}

TEST(GradCheck, NonScalarFunctionIsRejected) {
  EXPECT_THROW(finite_difference_check([](const Tensor& x) { return scale(x, 2.0); }, Tensor::vector({1, 2})),
               ShapeError);
}

TEST(GradCheck, ComposedMlp) {
  Rng rng(7);
  const Linear l1(4, 6, rng), l2(6, 3, rng);
  const LayerNorm ln(6);
  auto f = [&](const Tensor& x) { return mean(square(l2(gelu(ln(l1(x.reshaped({2, 4}))))))); };
  EXPECT_LT(finite_difference_check(f, randn({8}, rng)), kGradTol);
  auto loss = [&] { return mean(square(l2(gelu(ln(l1(Tensor::ones({2, 4}))))))); };
  std::vector<Tensor> params{l1.weight, l1.bias, ln.gamma, ln.beta, l2.weight, l2.bias};
  EXPECT_LT(testing::param_gradcheck(loss, params), kGradTol);
}

// Every differentiable op on small random inputs.
class OpGradient : public ::testing::TestWithParam<int> {};

TEST_P(OpGradient, EveryOpPassesFiniteDifferences) {
  Rng rng(100 + static_cast<std::uint64_t>(GetParam()));
  const Tensor other = randn({3, 4}, rng);
  const Tensor row = randn({4}, rng);
  const Tensor col = randn({3}, rng);
  const std::vector<std::size_t> idx{2, 0, 2};
  const std::vector<double> weights{0.5, 0.0, 2.0};
  const std::vector<std::uint8_t> mask{1, 0, 1};
  const std::vector<std::size_t> targets{1, 3, 0};
  const Tensor probe = randn({3, 4}, rng);
  const Tensor scatter_probe = randn({4, 4}, rng);
  auto dot = [&](const Tensor& y) { return sum(mul(y, probe.reshaped(y.shape()))); };

  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> cases{
      {"add", [&](const Tensor& x) { return dot(add(x, other)); }},
      {"sub", [&](const Tensor& x) { return dot(sub(other, x)); }},
      {"mul", [&](const Tensor& x) { return dot(mul(x, x)); }},
      {"scale", [&](const Tensor& x) { return dot(scale(x, -1.7)); }},
      {"gelu", [&](const Tensor& x) { return dot(gelu(x)); }},
      {"add_row", [&](const Tensor& x) { return dot(add_row(x, row)); }},
      {"add_row_bias", [&](const Tensor& x) { return dot(add_row(other, slice_rows(x, 0, 1).reshaped({4}))); }},
      {"mul_col", [&](const Tensor& x) { return dot(mul_col(x, col)); }},
      {"mul_col_w", [&](const Tensor& x) { return dot(mul_col(other, slice_cols(x, 0, 1).reshaped({3}))); }},
      {"matmul", [&](const Tensor& x) { return sum(square(matmul(x, transpose(other)))); }},
      {"transpose", [&](const Tensor& x) { return sum(mul(transpose(x), transpose(probe))); }},
      {"mean", [&](const Tensor& x) { return mean(square(x)); }},
      {"sum_axis0", [&](const Tensor& x) { return sum(square(sum(x, 0))); }},
      {"sum_axis1", [&](const Tensor& x) { return sum(square(sum(x, 1))); }},
      {"row_weighted_sqsum", [&](const Tensor& x) { return row_weighted_sqsum(x, weights); }},
      {"softmax0", [&](const Tensor& x) { return dot(softmax(x, 0)); }},
      {"softmax1", [&](const Tensor& x) { return dot(softmax(x, 1)); }},
      {"cross_entropy", [&](const Tensor& x) { return cross_entropy(x, targets, weights); }},
      {"layer_norm", [&](const Tensor& x) { return dot(layer_norm(x, Tensor::full({4}, 1.3), row)); }},
      {"layer_norm_affine", [&](const Tensor& x) {
         return dot(layer_norm(other, slice_rows(x, 0, 1).reshaped({4}), slice_rows(x, 1, 1).reshaped({4})));
       }},
      {"gather_rows", [&](const Tensor& x) { return sum(square(gather_rows(x, idx))); }},
      {"scatter_add_rows", [&](const Tensor& x) { return sum(mul(scatter_add_rows(x, idx, 4), scatter_probe)); }},
      {"gather_column", [&](const Tensor& x) { return sum(square(gather_column(x, idx, 1))); }},
      {"row_affine", [&](const Tensor& x) { return dot(row_affine(x, other, weights, col.values())); }},
      {"row_affine_b", [&](const Tensor& x) { return dot(row_affine(other, x, weights, col.values())); }},
      {"replace_rows", [&](const Tensor& x) { return dot(replace_rows(x, row, mask)); }},
      {"replace_rows_fill", [&](const Tensor& x) {
         return dot(replace_rows(other, slice_rows(x, 2, 1).reshaped({4}), mask));
       }},
      {"slice_cols", [&](const Tensor& x) { return sum(square(slice_cols(x, 1, 2))); }},
      {"slice_rows", [&](const Tensor& x) { return sum(square(slice_rows(x, 1, 2))); }},
      {"concat_cols", [&](const Tensor& x) { return sum(square(concat_cols({x, other, x}))); }},
      {"concat_rows", [&](const Tensor& x) { return sum(square(concat_rows({other, x}))); }},
      {"reshape", [&](const Tensor& x) { return dot(x.reshaped({12}).reshaped({3, 4})); }},
  };
  const Tensor x = randn({3, 4}, rng);
  for (const auto& [name, f] : cases) {
    EXPECT_LT(finite_difference_check(f, x), kGradTol) << name;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradient, ::testing::Range(0, 5));

TEST(LayerNorm, NormalizesRows) {
  Rng rng(8);
  const Tensor y = layer_norm(randn({5, 16}, rng, 3.0), Tensor::ones({16}), Tensor::zeros({16}));
  for (std::size_t r = 0; r < 5; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t c = 0; c < 16; ++c) m += y.at(r, c) / 16.0;
    for (std::size_t c = 0; c < 16; ++c) v += (y.at(r, c) - m) * (y.at(r, c) - m) / 16.0;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
}

TEST(Indexing, EmbeddingAndScatter) {
  const Tensor table = Tensor::matrix(3, 2, {0, 1, 10, 11, 20, 21});
  const std::vector<std::size_t> ids{2, 0, 2};
  EXPECT_EQ(embedding(table, ids).values(), (std::vector<double>{20, 21, 0, 1, 20, 21}));
  const Tensor s = scatter_add_rows(Tensor::ones({3, 2}), ids, 3);
  EXPECT_EQ(s.values(), (std::vector<double>{1, 1, 0, 0, 2, 2}));
  EXPECT_THROW(gather_rows(table, std::vector<std::size_t>{3}), ShapeError);
}

TEST(Random, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  const Tensor x = randn({100}, a), y = randn({100}, b), z = randn({100}, c);
  EXPECT_EQ(x.values(), y.values());
  EXPECT_NE(x.values(), z.values());
  const Tensor u = rand_uniform({1000}, a, -2.0, 3.0);
  for (double v : u.data()) {
    EXPECT_GE(v, -2.0);
    EXPECT_LT(v, 3.0);
  }
}

TEST(Checkpoint, RoundTripsBitExactly) {
  Rng rng(9);
  NamedTensors state{{"a.weight", randn({3, 4}, rng)}, {"b", Tensor::scalar(-0.0)}, {"c", randn({2, 1, 3}, rng)}};
  const auto dir = testing::temp_dir("checkpoint_roundtrip");
  save_checkpoint(dir / "x.sadq", state);
  const NamedTensors back = load_checkpoint(dir / "x.sadq");
  ASSERT_EQ(back.size(), state.size());
  for (const auto& [name, t] : state) {
    ASSERT_TRUE(back.count(name)) << name;
    EXPECT_EQ(back.at(name).shape(), t.shape());
    EXPECT_EQ(std::memcmp(back.at(name).data().data(), t.data().data(), t.numel() * sizeof(double)), 0);
  }
}

TEST(Checkpoint, LayoutIsLittleEndianWithHeader) {
  const std::string buf = encode_checkpoint({{"w", Tensor::vector({1.0})}});
  ASSERT_EQ(buf.size(), 4u + 4u + 4u + 1u + 4u + 8u + 8u);
  EXPECT_EQ(buf.substr(0, 4), "SADQ");
  EXPECT_EQ(static_cast<unsigned char>(buf[4]), 1u);  // version, low byte first
  EXPECT_EQ(static_cast<unsigned char>(buf[8]), 1u);  // name length
  EXPECT_EQ(buf[12], 'w');
  EXPECT_EQ(static_cast<unsigned char>(buf[13]), 1u);  // rank
  EXPECT_EQ(static_cast<unsigned char>(buf[17]), 1u);  // dim 0
  double v = 0.0;
  std::memcpy(&v, buf.data() + 25, 8);
  EXPECT_EQ(v, 1.0);
}

TEST(Checkpoint, RejectsCorruptInput) {
  EXPECT_THROW(decode_checkpoint("NOPE\x01\x00\x00\x00"), FormatError);
  std::string buf = encode_checkpoint({{"w", Tensor::vector({1.0, 2.0})}});
  EXPECT_THROW(decode_checkpoint(buf.substr(0, buf.size() - 3)), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.sadq"), FormatError);
}

}  // namespace
}  // namespace sadq
