// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "dpatd/gradcheck.hpp"
#include "dpatd/gru.hpp"
#include "dpatd/rng.hpp"

using namespace dpatd;

namespace {

void expect_values(const Tensor& t, std::initializer_list<double> want, double tol = 1e-12) {
  ASSERT_EQ(t.numel(), want.size());
  std::size_t i = 0;
  for (double w : want) EXPECT_NEAR(t.at(i++), w, tol) << "index " << i - 1;
}

Tensor weighted(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(t, randn(t.shape(), rng)));
}

}  // namespace

// --- matmul ----------------------------------------------------------------

TEST(Matmul, IdentityLeavesInput) {
  Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  Tensor x = Tensor::matrix({{3, -1}, {2.5, 7}});
  expect_values(matmul(eye, x), {3, -1, 2.5, 7}, 0.0);
}

TEST(Matmul, HandComputed) {
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor b = Tensor::matrix({{5, 6}, {7, 8}});
  expect_values(matmul(a, b), {19, 22, 43, 50}, 0.0);
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor a = randn({3, 4}, rng, 1.0, true), b = randn({4, 2}, rng, 1.0, true);
  auto r = grad_check([&] { return sum(matmul(a, b)); }, {a, b});
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Matmul, ShapeMismatch) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST(Linear, AppliesOverLastAxisWithBias) {
  Tensor x({2, 1, 2}, {1, 2, 3, 4});
  Tensor w = Tensor::matrix({{1, 0, 1}, {0, 1, 1}});
  Tensor b = Tensor::vector({10, 20, 30});
  Tensor y = linear(x, w, b);
  EXPECT_EQ(y.shape(), (Shape{2, 1, 3}));
  expect_values(y, {11, 22, 33, 13, 24, 37}, 0.0);
  EXPECT_THROW(linear(x, w, Tensor::vector({1, 2})), DimensionError);
}

TEST(Bmm, TransposedWithScale) {
  Tensor a({1, 1, 2}, {1, 2});
  Tensor b({1, 2, 2}, {3, 4, 5, 6});
  expect_values(bmm(a, b, true, 0.5), {5.5, 8.5});
  expect_values(bmm(a, b), {13, 16});
  EXPECT_THROW(bmm(a, Tensor::zeros({2, 2, 2})), DimensionError);
}

// --- elementwise -------------------------------------------------------------

TEST(Elementwise, AddSubMulScale) {
  Tensor a = Tensor::vector({1, 2}), b = Tensor::vector({3, 5});
  expect_values(add(a, b), {4, 7});
  expect_values(sub(a, b), {-2, -3});
  expect_values(mul(a, b), {3, 10});
  expect_values(scale(a, -2), {-2, -4});
  EXPECT_THROW(add(a, Tensor::vector({1, 2, 3})), DimensionError);
}

TEST(Elementwise, AddBroadcastAlongMiddleAxis) {
  Tensor x = Tensor::zeros({2, 3, 1});
  Tensor y = add_broadcast(x, Tensor::vector({1, 2, 3}), 1);
  expect_values(y, {1, 2, 3, 1, 2, 3});
  EXPECT_THROW(add_broadcast(x, Tensor::vector({1, 2}), 1), DimensionError);
}

TEST(Reduce, SumAndMean) {
  Tensor x = Tensor::vector({1, 2, 3, 6});
  EXPECT_DOUBLE_EQ(sum(x).item(), 12.0);
  EXPECT_DOUBLE_EQ(mean(x).item(), 3.0);
}

// --- mse -------------------------------------------------------------------

TEST(MseLoss, IdenticalInputsGiveZero) {
  Tensor x = Tensor::vector({0.3, -2, 7});
  EXPECT_EQ(mse_loss(x, x).item(), 0.0);
}

TEST(MseLoss, UnitOffset) {
  EXPECT_DOUBLE_EQ(mse_loss(Tensor::vector({1, 1}), Tensor::vector({0, 0})).item(), 1.0);
}

TEST(MseLoss, AnalyticGradient) {
  Tensor pred = Tensor::vector({0.5, -1.0, 2.0}, true);
  Tensor target = Tensor::vector({0.0, 1.0, 1.5});
  auto r = grad_check([&] { return mse_loss(pred, target); }, {pred});
  EXPECT_LT(r.max_rel_error, 1e-8);
  pred.zero_grad();
  mse_loss(pred, target).backward();
  expect_values(Tensor({3}, std::vector<double>(pred.grad().begin(), pred.grad().end())),
                {2 * 0.5 / 3, 2 * -2.0 / 3, 2 * 0.5 / 3});
  EXPECT_THROW(mse_loss(pred, Tensor::vector({1, 2})), DimensionError);
}

TEST(MseLoss, NonNegativeOverRandomDraws) {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    Tensor a = randn({5}, rng), b = randn({5}, rng);
    EXPECT_GE(mse_loss(a, b).item(), 0.0);
  }
}

// --- activations -------------------------------------------------------------

TEST(Activation, Relu) { expect_values(activation(Tensor::vector({-1, 0, 2}), Activation::relu), {0, 0, 2}, 0.0); }

TEST(Activation, GeluAtZero) { EXPECT_EQ(activation(Tensor::scalar(0.0), Activation::gelu).item(), 0.0); }

TEST(Activation, GeluMatchesTanhForm) {
  for (double x : {-5.0, -1.3, -0.2, 0.4, 1.0, 3.7}) {
    const double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
    EXPECT_NEAR(gelu(Tensor::scalar(x)).item(), 0.5 * x * (1.0 + std::tanh(u)), 1e-14);
  }
}

TEST(Activation, GradChecksAwayFromKink) {
  Rng rng(5);
  Tensor x = rand_uniform({12}, rng, 0.1, 2.0, true);
  auto v = x.mutable_data();
  for (std::size_t i = 0; i < v.size(); i += 2) v[i] = -v[i];
  for (Activation kind : {Activation::relu, Activation::gelu}) {
    auto r = grad_check([&] { return weighted(activation(x, kind), 9); }, {x});
    EXPECT_LT(r.max_rel_error, 1e-6);
  }
}

// --- softmax -----------------------------------------------------------------

TEST(Softmax, Symmetric) { expect_values(softmax(Tensor::vector({0, 0}), 0), {0.5, 0.5}); }

TEST(Softmax, LogThree) { expect_values(softmax(Tensor::vector({0, std::log(3.0)}), 0), {0.25, 0.75}); }

TEST(Softmax, LargeLogitsStayFinite) {
  Tensor y = softmax(Tensor::vector({1000, 1000, -1000}), 0);
  expect_values(y, {0.5, 0.5, 0.0});
}

TEST(Softmax, SlicesSumToOneOverRandomDraws) {
  Rng rng(99);
  for (int draw = 0; draw < 1000; ++draw) {
    const std::size_t axis = draw % 3;
    Tensor x = randn({2, 3, 4}, rng, 5.0);
    Tensor y = softmax(x, axis);
    const std::size_t n = x.dim(axis);
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < 3; ++i) inner *= x.dim(i);
    const std::size_t outer = x.numel() / (n * inner);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double v = y.at((o * n + j) * inner + i);
          EXPECT_GT(v, 0.0);
          EXPECT_LT(v, 1.0);
          s += v;
        }
        ASSERT_NEAR(s, 1.0, 1e-12);
      }
  }
}

TEST(Softmax, BadAxis) { EXPECT_THROW(softmax(Tensor::zeros({2, 2}), 2), DimensionError); }

// --- layer norm --------------------------------------------------------------

TEST(LayerNorm, ConstantVectorGoesToZero) {
  Tensor y = layer_norm(Tensor::full({1, 4}, 3.7), Tensor::full({4}, 1.0), Tensor::zeros({4}));
  expect_values(y, {0, 0, 0, 0}, 0.0);
}

TEST(LayerNorm, AlreadyNormalized) {
  Tensor y = layer_norm(Tensor::matrix({{1, -1}}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0);
  expect_values(y, {1, -1}, 1e-15);
}

TEST(LayerNorm, IdempotentWithIdentityAffine) {
  Rng rng(4);
  const Tensor g = Tensor::full({6}, 1.0), b = Tensor::zeros({6});
  for (int draw = 0; draw < 200; ++draw) {
    Tensor x = randn({3, 6}, rng, 4.0);
    Tensor once = layer_norm(x, g, b, 1e-12);
    Tensor twice = layer_norm(once, g, b, 1e-12);
    for (std::size_t i = 0; i < x.numel(); ++i) ASSERT_NEAR(once.at(i), twice.at(i), 1e-9);
  }
}

TEST(LayerNorm, RowMomentsPreAffine) {
  Rng rng(6);
  Tensor x = randn({10, 16}, rng, 3.0);
  Tensor y = layer_norm(x, Tensor::full({16}, 1.0), Tensor::zeros({16}), 1e-10);
  for (std::size_t r = 0; r < 10; ++r) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < 16; ++i) mu += y.at(r * 16 + i) / 16;
    for (std::size_t i = 0; i < 16; ++i) var += (y.at(r * 16 + i) - mu) * (y.at(r * 16 + i) - mu) / 16;
    EXPECT_LT(std::abs(mu), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(LayerNorm, AffineWidthMismatch) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

// --- group norm --------------------------------------------------------------

TEST(GroupNorm, ConstantInputGoesToZero) {
  Tensor y = group_norm(Tensor::full({4, 5}, -2.0), 2, Tensor::full({4}, 1.0), Tensor::zeros({4}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(GroupNorm, OneGroupNormalizesJointly) {
  Rng rng(8);
  Tensor x = randn({3, 4, 2}, rng, 2.0);
  Tensor y = group_norm(x, 1, Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-9);
  double mu = 0, var = 0;
  for (double v : x.data()) mu += v / 24.0;
  for (double v : x.data()) var += (v - mu) * (v - mu) / 24.0;
  for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(y.at(i), (x.at(i) - mu) / std::sqrt(var + 1e-9), 1e-12);
}

TEST(GroupNorm, GroupMomentsPreAffine) {
  Rng rng(10);
  Tensor x = randn({6, 7}, rng, 5.0);
  Tensor y = group_norm(x, 3, Tensor::full({6}, 1.0), Tensor::zeros({6}), 1e-10);
  for (std::size_t g = 0; g < 3; ++g) {
    double mu = 0, var = 0;
    for (std::size_t i = 0; i < 14; ++i) mu += y.at(g * 14 + i) / 14;
    for (std::size_t i = 0; i < 14; ++i) var += (y.at(g * 14 + i) - mu) * (y.at(g * 14 + i) - mu) / 14;
    EXPECT_LT(std::abs(mu), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(GroupNorm, GradCheck) {
  Rng rng(12);
  Tensor x = randn({4, 3}, rng, 1.0, true), g = randn({4}, rng, 1.0, true), b = randn({4}, rng, 1.0, true);
  auto r = grad_check([&] { return weighted(group_norm(x, 2, g, b), 1); }, {x, g, b});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(GroupNorm, IndivisibleGroups) {
  EXPECT_THROW(group_norm(Tensor::zeros({4, 2}), 3, Tensor::zeros({4}), Tensor::zeros({4})), ConfigError);
}

// --- frobenius clamp ---------------------------------------------------------

TEST(FrobeniusClamp, ShrinksOnlyLargeMatrices) {
  Tensor x({2, 1, 2}, {3, 4, 0.3, 0.4});
  expect_values(frobenius_clamp(x), {0.6, 0.8, 0.3, 0.4});
  EXPECT_THROW(frobenius_clamp(Tensor::vector({1, 2})), DimensionError);
}

// --- shape ops ---------------------------------------------------------------

TEST(ShapeOps, PermuteMovesAxes) {
  Tensor x({2, 3}, {0, 1, 2, 3, 4, 5});
  Tensor y = permute(x, {1, 0});
  EXPECT_EQ(y.shape(), (Shape{3, 2}));
  expect_values(y, {0, 3, 1, 4, 2, 5}, 0.0);
  EXPECT_THROW(permute(x, {0, 0}), DimensionError);
}

TEST(ShapeOps, NarrowAndReshape) {
  Tensor x({2, 3}, {0, 1, 2, 3, 4, 5});
  expect_values(narrow(x, 1, 1, 2), {1, 2, 4, 5}, 0.0);
  EXPECT_THROW(narrow(x, 1, 2, 2), DimensionError);
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4}), DimensionError);
}

TEST(ShapeOps, SliceRowsCapacity) {
  Tensor t = Tensor::zeros({4});
  EXPECT_EQ(slice_rows(t, 2).numel(), 2u);
  EXPECT_THROW(slice_rows(t, 5), CapacityError);
}

// --- conv1d ------------------------------------------------------------------

TEST(Conv1d, LengthExample) { EXPECT_EQ(conv1d_output_length(9, 3, 3, Padding::valid), 3u); }

TEST(Conv1d, FrameSums) {
  Tensor x({1, 9}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  expect_values(conv1d(x, Tensor::full({1, 1, 3}, 1.0), 3), {6, 15, 24}, 0.0);
}

TEST(Conv1d, ValidLengthFormulaHoldsEverywhere) {
  Rng rng(2);
  for (std::size_t n = 1; n <= 20; ++n)
    for (std::size_t w = 1; w <= n; ++w)
      for (std::size_t s = 1; s <= 5; ++s) {
        Tensor y = conv1d(Tensor::zeros({1, n}), Tensor::zeros({2, 1, w}), s);
        ASSERT_EQ(y.dim(1), (n - w) / s + 1);
      }
}

TEST(Conv1d, SamePaddingKeepsLength) {
  Rng rng(2);
  for (std::size_t w : {1u, 2u, 5u, 31u}) {
    Tensor y = conv1d(randn({1, 37}, rng), randn({3, 1, w}, rng), 1, Padding::same);
    EXPECT_EQ(y.shape(), (Shape{3, 37}));
  }
}

TEST(Conv1d, GradCheckInputAndKernels) {
  Rng rng(21);
  Tensor x = randn({2, 11}, rng, 1.0, true), k = randn({3, 2, 3}, rng, 1.0, true);
  auto r = grad_check([&] { return weighted(conv1d(x, k, 2), 4); }, {x, k});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Conv1d, Errors) {
  EXPECT_THROW(conv1d(Tensor::zeros({1, 2}), Tensor::zeros({1, 1, 3}), 1), SequenceTooShortError);
  EXPECT_THROW(conv1d(Tensor::zeros({2, 5}), Tensor::zeros({1, 1, 3}), 1), DimensionError);
  EXPECT_THROW(conv1d(Tensor::zeros({1, 5}), Tensor::zeros({1, 1, 3}), 0), ConfigError);
}

// --- GRU ---------------------------------------------------------------------

namespace {

GruParams random_gru(std::size_t d_in, std::size_t h, Rng& rng, double s = 0.6) {
  return {randn({d_in, 3 * h}, rng, s, true), randn({h, 3 * h}, rng, s, true), randn({3 * h}, rng, s, true)};
}

// Loop-based single step in the (z, r, n) convention.
std::vector<double> gru_cell(const std::vector<double>& x, const std::vector<double>& h, const GruParams& p) {
  const std::size_t H = h.size(), D = x.size();
  auto W = p.w_input.data();
  auto U = p.w_recurrent.data();
  auto b = p.bias.data();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> z(H), r(H), out(H);
  for (std::size_t j = 0; j < H; ++j) {
    double az = b[j], ar = b[H + j];
    for (std::size_t i = 0; i < D; ++i) {
      az += x[i] * W[i * 3 * H + j];
      ar += x[i] * W[i * 3 * H + H + j];
    }
    for (std::size_t i = 0; i < H; ++i) {
      az += h[i] * U[i * 3 * H + j];
      ar += h[i] * U[i * 3 * H + H + j];
    }
    z[j] = sig(az);
    r[j] = sig(ar);
  }
  for (std::size_t j = 0; j < H; ++j) {
    double an = b[2 * H + j];
    for (std::size_t i = 0; i < D; ++i) an += x[i] * W[i * 3 * H + 2 * H + j];
    for (std::size_t i = 0; i < H; ++i) an += r[i] * h[i] * U[i * 3 * H + 2 * H + j];
    out[j] = (1 - z[j]) * h[j] + z[j] * std::tanh(an);
  }
  return out;
}

}  // namespace

TEST(Gru, ZeroParametersGiveZeroOutputs) {
  GruParams p{Tensor::zeros({3, 6}), Tensor::zeros({2, 6}), Tensor::zeros({6})};
  Tensor y = gru_sequence(Tensor::full({4, 3}, 0.7), p, Tensor::zeros({2}));
  EXPECT_EQ(y.shape(), (Shape{4, 2}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, SingleStepMatchesCell) {
  Rng rng(31);
  GruParams p = random_gru(3, 4, rng);
  Tensor x = randn({1, 3}, rng), h0 = randn({4}, rng);
  Tensor y = gru_sequence(x, p, h0);
  auto want = gru_cell({x.data().begin(), x.data().end()}, {h0.data().begin(), h0.data().end()}, p);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y.at(j), want[j], 1e-14);
}

TEST(Gru, SequenceMatchesUnrolledCells) {
  Rng rng(32);
  GruParams p = random_gru(2, 3, rng);
  Tensor x = randn({2, 5, 2}, rng), h0 = randn({2, 3}, rng);
  Tensor y = gru_sequence(x, p, h0);
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> h(h0.data().begin() + b * 3, h0.data().begin() + b * 3 + 3);
    for (std::size_t t = 0; t < 5; ++t) {
      std::vector<double> xt(x.data().begin() + (b * 5 + t) * 2, x.data().begin() + (b * 5 + t) * 2 + 2);
      h = gru_cell(xt, h, p);
      for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(y.at((b * 5 + t) * 3 + j), h[j], 1e-13);
    }
  }
}

TEST(Gru, BackpropThroughTime) {
  Rng rng(33);
  GruParams p = random_gru(3, 3, rng);
  Tensor x = randn({4, 3}, rng, 1.0, true), h0 = randn({3}, rng, 0.5, true);
  auto r = grad_check([&] { return weighted(gru_sequence(x, p, h0), 2); }, {x, h0, p.w_input, p.w_recurrent, p.bias});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(Gru, ShapeErrors) {
  Rng rng(34);
  GruParams p = random_gru(3, 2, rng);
  EXPECT_THROW(gru_sequence(Tensor::zeros({4, 2}), p, Tensor::zeros({2})), DimensionError);
  EXPECT_THROW(gru_sequence(Tensor::zeros({4, 3}), p, Tensor::zeros({3})), DimensionError);
}
