// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "dpatd/block.hpp"
#include "dpatd/gradsuite.hpp"

using namespace dpatd;

namespace {

BlockConfig small_block(std::size_t d = 8, std::size_t heads = 2) {
  BlockConfig c;
  c.attention = AttentionConfig{d, heads, 3, 3};
  return c;
}

BlockWeights random_block(const BlockConfig& cfg, Rng& rng) {
  BlockWeights w = BlockWeights::init(cfg, 8, rng, 0.3);
  NamedTensors all = w.parameters("");
  detail::scramble(all, rng, 0.3);
  return w;
}

// Reorders the last axis of x[d × K × M].
Tensor permute_chunks(const Tensor& x, const std::vector<std::size_t>& order) {
  const std::size_t d = x.dim(0), K = x.dim(1), M = x.dim(2);
  Buffer out(x.numel());
  for (std::size_t i = 0; i < d * K; ++i)
    for (std::size_t m = 0; m < M; ++m) out[i * M + m] = x.at(i * M + order[m]);
  return Tensor({d, K, M}, std::move(out));
}

}  // namespace

TEST(Ffn, ZeroWeightsGiveZero) {
  BlockConfig cfg = small_block();
  Rng rng(1);
  PhaseWeights w = PhaseWeights::init(cfg, 4, rng);
  for (Tensor t : {w.gru.w_input, w.gru.w_recurrent, w.w1, w.w2})
    for (auto& v : t.mutable_data()) v = 0.0;
  const Tensor y = ffn(randn({5, 8}, rng), w, cfg.activation);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Ffn, InnerWidthIsFourTimesModelWidth) {
  BlockConfig cfg = small_block();
  Rng rng(2);
  PhaseWeights w = PhaseWeights::init(cfg, 4, rng);
  EXPECT_EQ(w.w1.shape(), (Shape{8, 32}));
  EXPECT_EQ(w.w2.shape(), (Shape{32, 8}));
}

TEST(Sublayers, ShapesPreserved) {
  BlockConfig cfg = small_block();
  Rng rng(3);
  PhaseWeights w = PhaseWeights::init(cfg, 8, rng, 0.3);
  EXPECT_EQ(transformer_sublayers(randn({7, 8}, rng), w, cfg).shape(), (Shape{7, 8}));
  BlockConfig c6 = small_block(6, 3);
  PhaseWeights w6 = PhaseWeights::init(c6, 8, rng, 0.3);
  EXPECT_EQ(transformer_sublayers(randn({4, 10, 6}, rng), w6, c6).shape(), (Shape{4, 10, 6}));
}

TEST(Sublayers, OutputRowsAreNormalized) {
  BlockConfig cfg = small_block();
  Rng rng(4);
  PhaseWeights w = random_block(cfg, rng).local;
  for (auto& v : w.ln2_gamma.mutable_data()) v = 1.0;
  for (auto& v : w.ln2_beta.mutable_data()) v = 0.0;
  Tensor y = transformer_sublayers(randn({6, 8}, rng, 3.0), w, cfg);
  for (std::size_t r = 0; r < 6; ++r) {
    double mu = 0;
    for (std::size_t i = 0; i < 8; ++i) mu += y.at(r * 8 + i) / 8;
    EXPECT_LT(std::abs(mu), 1e-12);
  }
}

TEST(DualPhase, ShapeAndSingleChunk) {
  BlockConfig cfg = small_block();
  Rng rng(5);
  BlockWeights w = random_block(cfg, rng);
  EXPECT_EQ(dual_phase(randn({8, 5, 4}, rng), w, cfg).shape(), (Shape{8, 5, 4}));
  EXPECT_EQ(dual_phase(randn({8, 5, 1}, rng), w, cfg).shape(), (Shape{8, 5, 1}));
  EXPECT_THROW(dual_phase(randn({6, 5, 4}, rng), w, cfg), DimensionError);
}

TEST(DualPhase, ChunkPermutationEquivariantWithoutGlobalMixing) {
  // The local pass treats chunks independently. With the global phase
  // reduced to its residual, permuting chunks permutes the output.
  BlockConfig cfg = small_block();
  Rng rng(6);
  BlockWeights w = random_block(cfg, rng);
  for (Tensor t : {w.global.gn_gamma, w.global.gn_beta})
    for (auto& v : t.mutable_data()) v = 0.0;
  Tensor x = randn({8, 4, 5}, rng);
  Tensor y = dual_phase(x, w, cfg);
  std::vector<std::size_t> order(5);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffler(7);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), shuffler);
    Tensor yp = dual_phase(permute_chunks(x, order), w, cfg);
    Tensor want = permute_chunks(y, order);
    for (std::size_t i = 0; i < y.numel(); ++i) ASSERT_NEAR(yp.at(i), want.at(i), 1e-12);
  }
}

TEST(DualPhase, NoDeadParameters) {
  BlockConfig cfg = small_block();
  Rng rng(8);
  BlockWeights w = random_block(cfg, rng);
  Tensor x = randn({8, 6, 7}, rng);
  Tensor r = randn({8, 6, 7}, rng);
  sum(mul(dual_phase(x, w, cfg), r)).backward();
  for (const auto& [name, t] : w.parameters("")) {
    ASSERT_TRUE(t.has_grad()) << name;
    double mag = 0;
    for (double g : t.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0) << name;
  }
}

TEST(DualPhase, Deterministic) {
  BlockConfig cfg = small_block();
  Rng rng(9);
  BlockWeights w = random_block(cfg, rng);
  Tensor x = randn({8, 4, 4}, rng);
  Tensor a = dual_phase(x, w, cfg), b = dual_phase(x, w, cfg);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}
