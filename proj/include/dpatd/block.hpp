// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "dpatd/attention.hpp"
#include "dpatd/gru.hpp"

namespace dpatd {

struct BlockConfig {
  AttentionConfig attention;
  Activation activation = Activation::gelu;
  std::size_t norm_groups = 1;
  double layer_norm_eps = 1e-5;
  double group_norm_eps = 1e-5;

  std::size_t d() const { return attention.d; }
  std::size_t d_ff() const { return 4 * attention.d; }
};

/// One transformer pass (local or global): attention, GRU feed-forward,
/// the two LayerNorms, and the GroupNorm that closes the phase.
struct PhaseWeights {
  AttentionWeights attention;
  GruParams gru;
  Tensor w1, b1;  // [d × d_ff], [d_ff]
  Tensor w2, b2;  // [d_ff × d], [d]
  Tensor ln1_gamma, ln1_beta;
  Tensor ln2_gamma, ln2_beta;
  Tensor gn_gamma, gn_beta;

  static PhaseWeights init(const BlockConfig& cfg, std::size_t bias_capacity, Rng& rng,
                           double stddev = 0.02) {
    const std::size_t d = cfg.d(), ff = cfg.d_ff();
    PhaseWeights w;
    w.attention = AttentionWeights::init(cfg.attention, bias_capacity, rng, stddev);
    w.gru.w_input = randn({d, 3 * d}, rng, stddev, true);
    w.gru.w_recurrent = randn({d, 3 * d}, rng, stddev, true);
    w.gru.bias = Tensor::zeros({3 * d}, true);
    w.w1 = randn({d, ff}, rng, stddev, true);
    w.b1 = Tensor::zeros({ff}, true);
    w.w2 = randn({ff, d}, rng, stddev, true);
    w.b2 = Tensor::zeros({d}, true);
    w.ln1_gamma = Tensor::full({d}, 1.0, true);
    w.ln1_beta = Tensor::zeros({d}, true);
    w.ln2_gamma = Tensor::full({d}, 1.0, true);
    w.ln2_beta = Tensor::zeros({d}, true);
    w.gn_gamma = Tensor::full({d}, 1.0, true);
    w.gn_beta = Tensor::zeros({d}, true);
    return w;
  }

  NamedTensors parameters(const std::string& prefix) const {
    NamedTensors out = attention.parameters(prefix + "attn.");
    out.insert(out.end(), {{prefix + "gru.w_input", gru.w_input},
                           {prefix + "gru.w_recurrent", gru.w_recurrent},
                           {prefix + "gru.bias", gru.bias},
                           {prefix + "ffn.w1", w1},
                           {prefix + "ffn.b1", b1},
                           {prefix + "ffn.w2", w2},
                           {prefix + "ffn.b2", b2},
                           {prefix + "ln1.gamma", ln1_gamma},
                           {prefix + "ln1.beta", ln1_beta},
                           {prefix + "ln2.gamma", ln2_gamma},
                           {prefix + "ln2.beta", ln2_beta},
                           {prefix + "gn.gamma", gn_gamma},
                           {prefix + "gn.beta", gn_beta}});
    return out;
  }
};

struct BlockWeights {
  PhaseWeights local;
  PhaseWeights global;

  static BlockWeights init(const BlockConfig& cfg, std::size_t bias_capacity, Rng& rng,
                           double stddev = 0.02) {
    BlockWeights w;
    w.local = PhaseWeights::init(cfg, bias_capacity, rng, stddev);
    w.global = PhaseWeights::init(cfg, bias_capacity, rng, stddev);
    return w;
  }

  NamedTensors parameters(const std::string& prefix) const {
    NamedTensors out = local.parameters(prefix + "local.");
    auto g = global.parameters(prefix + "global.");
    out.insert(out.end(), g.begin(), g.end());
    return out;
  }
};

/// act(GRU(Z)·W₁ + b₁)·W₂ + b₂, the GRU running along the sequence axis from
/// a zero state. Z is [l × d] or [B × l × d].
inline Tensor ffn(const Tensor& z, const PhaseWeights& w, Activation act) {
  const std::size_t hidden = w.gru.hidden();
  Tensor h0 = z.rank() == 3 ? Tensor::zeros({z.dim(0), hidden}) : Tensor::zeros({hidden});
  Tensor g = gru_sequence(z, w.gru, h0);
  return linear(activation(linear(g, w.w1, w.b1), act), w.w2, w.b2);
}

/// S = MCE-MSA(Z); Z' = LN(Z + S); out = LN(Z' + FFN(Z')).
inline Tensor transformer_sublayers(const Tensor& z, const PhaseWeights& w, const BlockConfig& cfg) {
  Tensor s = mce_msa(z, w.attention, cfg.attention);
  Tensor mid = layer_norm(add(z, s), w.ln1_gamma, w.ln1_beta, cfg.layer_norm_eps);
  return layer_norm(add(mid, ffn(mid, w, cfg.activation)), w.ln2_gamma, w.ln2_beta, cfg.layer_norm_eps);
}

/// Local pass over each chunk (sequence axis K), then global pass across
/// chunks (sequence axis M). Each pass is followed by GroupNorm and a
/// residual to its input. x is [d × K × M].
inline Tensor dual_phase(const Tensor& x, const BlockWeights& w, const BlockConfig& cfg) {
  if (x.rank() != 3 || x.dim(0) != cfg.d()) {
    throw DimensionError("dual_phase: expected [" + std::to_string(cfg.d()) + " x K x M], got " +
                         shape_str(x.shape()));
  }
  // [d,K,M] -> [M,K,d]: batch of M chunks, sequence K.
  Tensor local = permute(transformer_sublayers(permute(x, {2, 1, 0}), w.local, cfg), {2, 1, 0});
  Tensor after_local =
      add(group_norm(local, cfg.norm_groups, w.local.gn_gamma, w.local.gn_beta, cfg.group_norm_eps), x);
  // [d,K,M] -> [K,M,d]: batch of K positions, sequence M.
  Tensor global =
      permute(transformer_sublayers(permute(after_local, {1, 2, 0}), w.global, cfg), {2, 0, 1});
  return add(group_norm(global, cfg.norm_groups, w.global.gn_gamma, w.global.gn_beta, cfg.group_norm_eps),
             after_local);
}

}  // namespace dpatd
