// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dpatd/gradcheck.hpp"
#include "dpatd/model.hpp"

namespace dpatd {

/// One differentiable operation under test. `run` builds a random instance
/// from the seed and returns its grad_check result.
struct GradSuiteCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed)> run;
};

struct GradSuiteResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coords = 0;
  std::size_t instances = 0;
};

namespace detail {

// Scalar loss Σ t ⊙ R for a fixed random R, so every output coordinate
// carries a distinct weight.
inline Tensor project(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  return sum(mul(t, randn(t.shape(), rng)));
}

inline GradCheckResult check(const std::function<Tensor()>& f, std::vector<Tensor> params, std::uint64_t seed,
                             std::size_t max_coords = 0) {
  GradCheckOptions opts;
  opts.seed = seed;
  opts.max_coords_per_tensor = max_coords;
  return grad_check(f, std::move(params), opts);
}

inline Tensor param(Shape shape, Rng& rng, double stddev = 1.0) { return randn(std::move(shape), rng, stddev, true); }

// Values bounded away from the ReLU kink.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = randn(std::move(shape), rng, 1.0, true);
  for (auto& v : t.mutable_data()) v = (v < 0 ? -0.1 : 0.1) + v;
  return t;
}

/// Redraws every named tensor: gains around one, everything else N(0, σ²).
inline void scramble(const NamedTensors& params, Rng& rng, double stddev) {
  for (const auto& [name, t] : params) {
    const bool gain = name.find("gamma") != std::string::npos;
    Tensor target = t;
    for (auto& v : target.mutable_data()) v = gain ? 1.0 + 0.2 * rng.normal() : stddev * rng.normal();
  }
}

inline std::vector<Tensor> tensors_of(const NamedTensors& params) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : params) out.push_back(t);
  return out;
}

inline BlockConfig micro_block(std::size_t d, std::size_t heads) {
  BlockConfig c;
  c.attention = AttentionConfig{d, heads, 3, 3};
  c.layer_norm_eps = 1e-5;
  return c;
}

}  // namespace detail

/// Micro configuration used for the whole-model gradient check.
inline ModelConfig micro_model_config() {
  ModelConfig c;
  c.d = 8;
  c.heads = 2;
  c.n_blocks = 2;
  c.chunk = 6;
  c.encoder_kernel = 5;
  c.max_positions = 8;
  c.init_std = 0.3;
  return c;
}

/// Every differentiable op, the composite layers, and the full micro-model
/// loss. With `exhaustive`, the model loss is checked on every coordinate
/// rather than a per-tensor sample.
inline std::vector<GradSuiteCase> gradient_suite(bool exhaustive = false) {
  using detail::check;
  using detail::param;
  using detail::project;
  std::vector<GradSuiteCase> s;
  auto add_case = [&s](std::string name, std::function<GradCheckResult(std::uint64_t)> fn) {
    s.push_back({std::move(name), std::move(fn)});
  };

  add_case("matmul", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({3, 4}, rng), b = param({4, 5}, rng);
    return check([=] { return project(matmul(a, b), seed); }, {a, b}, seed);
  });
  add_case("linear", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 3, 4}, rng), w = param({4, 5}, rng), b = param({5}, rng);
    return check([=] { return project(linear(x, w, b), seed); }, {x, w, b}, seed);
  });
  add_case("bmm", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({2, 3, 4}, rng), b = param({2, 4, 5}, rng);
    return check([=] { return project(bmm(a, b), seed); }, {a, b}, seed);
  });
  add_case("bmm_transposed", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({2, 3, 4}, rng), b = param({2, 5, 4}, rng);
    return check([=] { return project(bmm(a, b, true, 0.7), seed); }, {a, b}, seed);
  });
  add_case("add", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({3, 4}, rng), b = param({3, 4}, rng);
    return check([=] { return project(add(a, b), seed); }, {a, b}, seed);
  });
  add_case("sub", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({3, 4}, rng), b = param({3, 4}, rng);
    return check([=] { return project(sub(a, b), seed); }, {a, b}, seed);
  });
  add_case("mul", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({3, 4}, rng), b = param({3, 4}, rng);
    return check([=] { return project(mul(a, b), seed); }, {a, b}, seed);
  });
  add_case("scale", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({3, 4}, rng);
    return check([=] { return project(scale(a, -1.7), seed); }, {a}, seed);
  });
  add_case("add_broadcast", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 3, 4}, rng), b0 = param({2}, rng), b1 = param({3}, rng), b2 = param({4}, rng);
    return check([=] { return project(add_broadcast(add_broadcast(add_broadcast(x, b0, 0), b1, 1), b2, 2), seed); },
                 {x, b0, b1, b2}, seed);
  });
  add_case("sum_mean", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor a = param({3, 4}, rng);
    return check([=] { return add(sum(mul(a, a)), mean(a)); }, {a}, seed);
  });
  add_case("mse_loss", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor p = param({3, 4}, rng), t = randn({3, 4}, rng);
    return check([=] { return mse_loss(p, t); }, {p}, seed);
  });
  add_case("relu", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = detail::away_from_zero({3, 5}, rng);
    return check([=] { return project(relu(x), seed); }, {x}, seed);
  });
  add_case("gelu", [](std::uint64_t seed) {
    Rng rng(seed);
    // Far tails have gradients below the central-difference noise floor.
    Tensor x = rand_uniform({3, 5}, rng, -3.0, 3.0, true);
    return check([=] { return project(gelu(x), seed); }, {x}, seed);
  });
  add_case("reshape_permute", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 3, 4}, rng);
    return check([=] { return project(permute(reshape(x, {4, 3, 2}), {2, 0, 1}), seed); }, {x}, seed);
  });
  add_case("transpose", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({3, 4}, rng);
    return check([=] { return project(transpose(x), seed); }, {x}, seed);
  });
  add_case("narrow", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({3, 5, 2}, rng);
    return check([=] { return project(narrow(x, 1, 1, 3), seed); }, {x}, seed);
  });
  add_case("softmax", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 3, 4}, rng);
    return check([=] { return add(project(softmax(x, 2), seed), project(softmax(x, 1), seed + 1)); }, {x}, seed);
  });
  add_case("layer_norm", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({3, 5}, rng), g = param({5}, rng), b = param({5}, rng);
    return check([=] { return project(layer_norm(x, g, b), seed); }, {x, g, b}, seed);
  });
  add_case("group_norm", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({4, 3, 2}, rng), g = param({4}, rng), b = param({4}, rng);
    return check([=] { return project(group_norm(x, 2, g, b), seed); }, {x, g, b}, seed);
  });
  add_case("frobenius_clamp", [](std::uint64_t seed) {
    Rng rng(seed);
    // One slab well above unit norm, one well below.
    Tensor x = param({2, 3, 3}, rng);
    auto v = x.mutable_data();
    for (std::size_t i = 0; i < 9; ++i) v[i] = 1.0 + 0.5 * v[i];
    for (std::size_t i = 9; i < 18; ++i) v[i] *= 0.1;
    return check([=] { return project(frobenius_clamp(x), seed); }, {x}, seed);
  });
  add_case("conv1d_valid", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 9}, rng), k = param({3, 2, 3}, rng);
    return check([=] { return project(conv1d(x, k, 2, Padding::valid), seed); }, {x, k}, seed);
  });
  add_case("conv1d_same", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 8}, rng), k = param({3, 2, 4}, rng);
    return check([=] { return project(conv1d(x, k, 1, Padding::same), seed); }, {x, k}, seed);
  });
  add_case("gru_sequence", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 4, 3}, rng);
    GruParams p{param({3, 6}, rng, 0.7), param({2, 6}, rng, 0.7), param({6}, rng, 0.5)};
    Tensor h0 = param({2, 2}, rng, 0.5);
    return check([=] { return project(gru_sequence(x, p, h0), seed); }, {x, p.w_input, p.w_recurrent, p.bias, h0},
                 seed);
  });
  add_case("segment", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({3, 10}, rng);
    const ChunkConfig cc{4, 3, 0.0};
    return check([=] { return project(segment(x, cc).data, seed); }, {x}, seed);
  });
  add_case("overlap_add", [](std::uint64_t seed) {
    Rng rng(seed);
    const ChunkConfig cc{4, 3, 0.0};
    SegmentedTensor meta = segment(Tensor::zeros({3, 10}), cc);
    Tensor x = param(meta.data.shape(), rng);
    return check(
        [=] { return project(overlap_add(SegmentedTensor{x, meta.original_length, meta.pad_length}, cc), seed); },
        {x}, seed);
  });
  add_case("add_positions", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({3, 4, 2}, rng);
    PositionalEmbedding emb{param({5, 3}, rng), param({4, 3}, rng)};
    return check([=] { return project(add_positions(SegmentedTensor{x, 8, 0}, emb).data, seed); },
                 {x, emb.intra, emb.inter}, seed);
  });
  add_case("compress_sequence", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = param({2, 7, 2}, rng), k = param({2, 2, 3}, rng);
    const AttentionConfig cfg{4, 2, 3, 3};
    return check([=] { return project(compress_sequence(x, k, cfg), seed); }, {x, k}, seed);
  });
  add_case("explainable_attention", [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor q = param({2, 5, 3}, rng), k = param({2, 4, 3}, rng), v = param({2, 4, 3}, rng);
    Tensor b = param({6}, rng, 0.3);
    return check([=] { return project(explainable_attention(q, k, v, b), seed); }, {q, k, v, b}, seed);
  });
  add_case("mce_msa", [](std::uint64_t seed) {
    Rng rng(seed);
    const AttentionConfig cfg{4, 2, 3, 3};
    AttentionWeights w = AttentionWeights::init(cfg, 4, rng);
    detail::scramble(w.parameters(""), rng, 0.5);
    Tensor y = param({2, 7, 4}, rng);
    auto params = detail::tensors_of(w.parameters(""));
    params.push_back(y);
    return check([=] { return project(mce_msa(y, w, cfg), seed); }, params, seed);
  });
  add_case("ffn", [](std::uint64_t seed) {
    Rng rng(seed);
    const BlockConfig cfg = detail::micro_block(4, 2);
    PhaseWeights w = PhaseWeights::init(cfg, 4, rng);
    detail::scramble(w.parameters(""), rng, 0.5);
    Tensor z = param({2, 4, 4}, rng);
    std::vector<Tensor> params{z, w.gru.w_input, w.gru.w_recurrent, w.gru.bias, w.w1, w.b1, w.w2, w.b2};
    return check([=] { return project(ffn(z, w, cfg.activation), seed); }, params, seed);
  });
  add_case("transformer_sublayers", [](std::uint64_t seed) {
    Rng rng(seed);
    const BlockConfig cfg = detail::micro_block(4, 2);
    PhaseWeights w = PhaseWeights::init(cfg, 4, rng);
    detail::scramble(w.parameters(""), rng, 0.5);
    Tensor z = param({2, 6, 4}, rng);
    auto params = detail::tensors_of(w.parameters(""));
    params.push_back(z);
    return check([=] { return project(transformer_sublayers(z, w, cfg), seed); }, params, seed);
  });
  add_case("dual_phase", [](std::uint64_t seed) {
    Rng rng(seed);
    BlockConfig cfg = detail::micro_block(4, 2);
    cfg.norm_groups = 2;
    BlockWeights w = BlockWeights::init(cfg, 4, rng);
    detail::scramble(w.parameters(""), rng, 0.5);
    Tensor x = param({4, 6, 7}, rng);  // both phases keep two compressed keys
    auto params = detail::tensors_of(w.parameters(""));
    params.push_back(x);
    return check([=] { return project(dual_phase(x, w, cfg), seed); }, params, seed, 6);
  });
  add_case("encode_decode", [](std::uint64_t seed) {
    Rng rng(seed);
    ModelConfig cfg = micro_model_config();
    ModelWeights w = init_weights(cfg, seed);
    detail::scramble(w.parameters(), rng, 0.3);
    Tensor audio = param({1, 14}, rng);
    const ChunkConfig cc = cfg.chunking(14);
    std::vector<Tensor> params{audio,           w.encoder_kernel, w.encoder_bias, w.expand_weight,
                               w.expand_bias,   w.output_weight,  w.output_bias};
    return check([=] { return project(decode(segment(encode(audio, w), cc), w, cc), seed); }, params, seed);
  });
  add_case("model_loss", [exhaustive](std::uint64_t seed) {
    Rng rng(seed);
    ModelConfig cfg = micro_model_config();
    ModelWeights w = init_weights(cfg, seed);
    detail::scramble(w.parameters(), rng, cfg.init_std);
    Tensor audio = randn({1, 40}, rng, 0.5);
    Tensor target = randn({1, 40}, rng, 0.5);
    return check([=] { return mse_loss(forward(audio, w, cfg), target); }, detail::tensors_of(w.parameters()), seed,
                 exhaustive ? 0 : 6);
  });
  return s;
}

/// Runs every case on `instances` seeds and keeps the worst error per case.
inline std::vector<GradSuiteResult> run_gradient_suite(bool exhaustive, std::size_t instances = 10,
                                                       const std::function<void(const GradSuiteResult&)>& report = {}) {
  std::vector<GradSuiteResult> out;
  for (const auto& c : gradient_suite(exhaustive)) {
    GradSuiteResult r{c.name, 0.0, 0, instances};
    for (std::size_t i = 0; i < instances; ++i) {
      const GradCheckResult g = c.run(1000 + i);
      r.max_rel_error = std::max(r.max_rel_error, g.max_rel_error);
      r.coords += g.coords_checked;
    }
    if (report) report(r);
    out.push_back(r);
  }
  return out;
}

}  // namespace dpatd
