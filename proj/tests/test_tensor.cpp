// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstdint>

#include "dpatd/ops.hpp"

using namespace dpatd;

TEST(Tensor, ShapeAndData) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_DOUBLE_EQ(t.at(4), 5.0);
  EXPECT_FALSE(t.requires_grad());
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, RejectsLengthMismatch) { EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError); }

TEST(Tensor, RejectsZeroDimension) { EXPECT_THROW(Tensor::zeros({3, 0}), DimensionError); }

TEST(Tensor, RaggedLiteralRejected) { EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), DimensionError); }

TEST(Tensor, ItemNeedsOneElement) {
  EXPECT_DOUBLE_EQ(Tensor::scalar(2.5).item(), 2.5);
  EXPECT_THROW(Tensor::vector({1, 2}).item(), RankError);
}

TEST(Tensor, StorageIsCacheLineAligned) {
  for (std::size_t n : {1u, 3u, 17u, 1000u}) {
    Tensor t = Tensor::zeros({n});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data().data()) % 64, 0u);
  }
}

TEST(Backward, SquareAtThree) {
  Tensor x = Tensor::scalar(3.0, true);
  mul(x, x).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, TwoCallsDoubleTheGradient) {
  Tensor x = Tensor::scalar(3.0, true);
  Tensor y = mul(x, x);
  y.backward();
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Backward, ZeroGradResets) {
  Tensor x = Tensor::scalar(3.0, true);
  mul(x, x).backward();
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
  scale(x, 2.0).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Backward, NonScalarRejected) {
  Tensor x = Tensor::vector({1, 2}, true);
  EXPECT_THROW(scale(x, 2.0).backward(), RankError);
}

TEST(Backward, SharedSubexpressionAccumulates) {
  // f = (x·y) + (x·y)·x, df/dx = y + 2xy
  Tensor x = Tensor::scalar(2.0, true), y = Tensor::scalar(5.0, true);
  Tensor p = mul(x, y);
  add(p, mul(p, x)).backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0 + 2 * 2.0 * 5.0);
  EXPECT_DOUBLE_EQ(y.grad()[0], 2.0 + 4.0);
}

TEST(Backward, ConstantsGetNoGradient) {
  Tensor x = Tensor::scalar(2.0, true), c = Tensor::scalar(7.0);
  mul(x, c).backward();
  EXPECT_FALSE(c.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Backward, IntermediateGradientsReleased) {
  Tensor x = Tensor::vector({1, 2, 3}, true);
  Tensor h = mul(x, x);
  sum(h).backward();
  EXPECT_FALSE(h.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Tape, ReverseTopologicalOrder) {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor a = scale(x, 2.0);
  Tensor b = scale(a, 3.0);
  Tensor c = add(a, b);
  EXPECT_EQ(Tape::record(c).size(), 4u);
}

TEST(Tape, LongChainDoesNotRecurse) {
  Tensor x = Tensor::scalar(1.0, true);
  Tensor y = x;
  for (int i = 0; i < 200000; ++i) y = scale(y, 1.0);
  y.backward();
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(NoGrad, GuardSuppressesRecording) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = mul(x, x);
  }
  EXPECT_FALSE(y.requires_grad());
  Tensor z = mul(x, x);
  EXPECT_TRUE(z.requires_grad());
}

TEST(NoGrad, GuardsNest) {
  {
    NoGradGuard outer;
    {
      NoGradGuard inner;
    }
    EXPECT_FALSE(detail::grad_mode());
  }
  EXPECT_TRUE(detail::grad_mode());
}

TEST(Detach, CutsHistory) {
  Tensor x = Tensor::scalar(2.0, true);
  Tensor d = mul(x, x).detach();
  EXPECT_FALSE(d.requires_grad());
  EXPECT_DOUBLE_EQ(d.item(), 4.0);
}
