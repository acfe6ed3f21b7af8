// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpatd/block.hpp"
#include "dpatd/segmentation.hpp"

namespace dpatd {

struct ModelConfig {
  std::size_t d = 32;
  std::size_t heads = 4;
  std::size_t n_blocks = 2;
  std::size_t chunk = 16;  // 0 selects choose_chunk_size(L) per input
  std::size_t hop = 0;     // 0 means hop = chunk
  std::size_t encoder_kernel = 31;
  std::size_t max_positions = 2048;  // rows in each positional table
  std::size_t compress_kernel = 3;
  std::size_t compress_stride = 3;
  std::size_t norm_groups = 1;
  Activation activation = Activation::gelu;
  double init_std = 0.02;
  std::uint64_t seed = 1;
  double sample_rate = 16000.0;  // inputs must match; no resampling

  /// Small preset used by tests and the end-to-end run.
  static ModelConfig desk() { return {}; }

  /// The full-size configuration: 1000-dim states, 12 blocks, chunk 1000,
  /// 4000-dim feed-forward. 12 heads would not divide 1000, so 8.
  static ModelConfig full_size() {
    ModelConfig c;
    c.d = 1000;
    c.heads = 8;
    c.n_blocks = 12;
    c.chunk = 1000;
    return c;
  }

  std::size_t d_ff() const { return 4 * d; }

  AttentionConfig attention() const { return {d, heads, compress_kernel, compress_stride}; }

  BlockConfig block() const {
    BlockConfig b;
    b.attention = attention();
    b.activation = activation;
    b.norm_groups = norm_groups;
    return b;
  }

  /// Capacity of each attention bias vector.
  std::size_t bias_capacity() const { return attention().compressed_length(max_positions); }

  ChunkConfig chunking(std::size_t length) const {
    return ChunkConfig{chunk == 0 ? choose_chunk_size(length) : chunk, hop, 0.0};
  }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) {
      throw ConfigError("heads=" + std::to_string(heads) + " must divide d=" + std::to_string(d));
    }
    if (n_blocks == 0) throw ConfigError("n_blocks must be >= 1");
    if (encoder_kernel == 0) throw ConfigError("encoder_kernel must be >= 1");
    if (max_positions == 0) throw ConfigError("max_positions must be >= 1");
    if (hop != 0 && chunk != 0 && hop > chunk) throw ConfigError("hop must not exceed chunk");
    if (norm_groups == 0 || d % norm_groups != 0) throw ConfigError("norm_groups must divide d");
    if (chunk > max_positions) throw ConfigError("chunk exceeds max_positions");
    if (!(sample_rate > 0.0)) throw ConfigError("sample_rate must be positive");
    attention().validate();
  }
};

/// Sequence lengths the two attention phases see for an input of length L.
struct AttentionLengths {
  std::size_t local = 0;   // K
  std::size_t global = 0;  // M
  std::size_t longest() const { return std::max(local, global); }
};

inline AttentionLengths attention_lengths(std::size_t length, const ModelConfig& cfg) {
  const ChunkConfig cc = cfg.chunking(length);
  return {cc.chunk, num_chunks(length, cc)};
}

struct ModelWeights {
  Tensor encoder_kernel;  // [d × 1 × w]
  Tensor encoder_bias;    // [d]
  PositionalEmbedding positions;
  std::vector<BlockWeights> blocks;
  Tensor expand_weight;  // [d × d]
  Tensor expand_bias;    // [d]
  Tensor output_weight;  // [1 × d]
  Tensor output_bias;    // [1]

  /// Every learnable tensor with a stable name, in initialization order.
  NamedTensors parameters() const {
    NamedTensors out{{"encoder.kernel", encoder_kernel},
                     {"encoder.bias", encoder_bias},
                     {"positions.intra", positions.intra},
                     {"positions.inter", positions.inter}};
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      auto p = blocks[i].parameters("block" + std::to_string(i) + ".");
      out.insert(out.end(), p.begin(), p.end());
    }
    out.insert(out.end(), {{"decoder.expand_weight", expand_weight},
                           {"decoder.expand_bias", expand_bias},
                           {"decoder.output_weight", output_weight},
                           {"decoder.output_bias", output_bias}});
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : parameters()) n += t.numel();
    return n;
  }
};

using NamedShapes = std::vector<std::pair<std::string, Shape>>;

/// Names and shapes of every parameter init_weights(cfg) would create, in
/// the same order, without allocating them.
inline NamedShapes parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d, dk = cfg.attention().head_dim(), ff = cfg.d_ff();
  const std::size_t cap = cfg.bias_capacity(), w = cfg.compress_kernel;
  NamedShapes out{{"encoder.kernel", {d, 1, cfg.encoder_kernel}},
                  {"encoder.bias", {d}},
                  {"positions.intra", {cfg.max_positions, d}},
                  {"positions.inter", {cfg.max_positions, d}}};
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    for (const char* phase : {"local.", "global."}) {
      const std::string p = "block" + std::to_string(i) + "." + phase;
      out.insert(out.end(), {{p + "attn.w_query", {d, d}},
                             {p + "attn.w_key", {d, d}},
                             {p + "attn.w_value", {d, d}},
                             {p + "attn.w_out", {d, d}},
                             {p + "attn.b_out", {d}},
                             {p + "attn.compress_key", {dk, dk, w}},
                             {p + "attn.compress_value", {dk, dk, w}},
                             {p + "attn.bias", {cap}},
                             {p + "gru.w_input", {d, 3 * d}},
                             {p + "gru.w_recurrent", {d, 3 * d}},
                             {p + "gru.bias", {3 * d}},
                             {p + "ffn.w1", {d, ff}},
                             {p + "ffn.b1", {ff}},
                             {p + "ffn.w2", {ff, d}},
                             {p + "ffn.b2", {d}},
                             {p + "ln1.gamma", {d}},
                             {p + "ln1.beta", {d}},
                             {p + "ln2.gamma", {d}},
                             {p + "ln2.beta", {d}},
                             {p + "gn.gamma", {d}},
                             {p + "gn.beta", {d}}});
    }
  }
  out.insert(out.end(), {{"decoder.expand_weight", {d, d}},
                         {"decoder.expand_bias", {d}},
                         {"decoder.output_weight", {1, d}},
                         {"decoder.output_bias", {1}}});
  return out;
}

/// Draws every weight matrix, kernel and positional table from N(0, σ²)
/// (σ = cfg.init_std) with Rng(seed), in the order listed by parameters().
/// Biases and attention biases start at zero; norm gains at one.
inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double s = cfg.init_std;
  const std::size_t d = cfg.d;
  ModelWeights w;
  w.encoder_kernel = randn({d, 1, cfg.encoder_kernel}, rng, s, true);
  w.encoder_bias = Tensor::zeros({d}, true);
  w.positions.intra = randn({cfg.max_positions, d}, rng, s, true);
  w.positions.inter = randn({cfg.max_positions, d}, rng, s, true);
  const BlockConfig bc = cfg.block();
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    w.blocks.push_back(BlockWeights::init(bc, cfg.bias_capacity(), rng, s));
  }
  w.expand_weight = randn({d, d}, rng, s, true);
  w.expand_bias = Tensor::zeros({d}, true);
  w.output_weight = randn({1, d}, rng, s, true);
  w.output_bias = Tensor::zeros({1}, true);
  return w;
}

/// Same-padded stride-1 convolution from one channel to d features.
inline Tensor encode(const Tensor& audio, const ModelWeights& w) {
  if (audio.rank() != 2 || audio.dim(0) != 1) {
    throw InputError("encode: expected audio [1 x L], got " + shape_str(audio.shape()));
  }
  return add_broadcast(conv1d(audio, w.encoder_kernel, 1, Padding::same), w.encoder_bias, 0);
}

/// Patch-expanding projection on the feature axis, overlap-add back to
/// [d × L], then a 1×1 projection to one output channel.
inline Tensor decode(const SegmentedTensor& out, const ModelWeights& w, const ChunkConfig& chunking) {
  const std::size_t d = out.channels(), K = out.chunk(), M = out.num_chunks();
  Tensor flat = reshape(out.data, {d, K * M});
  Tensor expanded = add_broadcast(matmul(w.expand_weight, flat), w.expand_bias, 0);
  SegmentedTensor restored{reshape(expanded, {w.expand_weight.dim(0), K, M}), out.original_length,
                           out.pad_length};
  Tensor features = overlap_add(restored, chunking);
  return add_broadcast(matmul(w.output_weight, features), w.output_bias, 0);
}

/// encode → segment → positions → N dual-phase blocks → decode. Audio is
/// [1 × L]; the estimate has the same shape.
inline Tensor forward(const Tensor& audio, const ModelWeights& w, const ModelConfig& cfg) {
  if (audio.rank() != 2 || audio.dim(0) != 1) {
    throw InputError("forward: expected audio [1 x L], got " + shape_str(audio.shape()));
  }
  const ChunkConfig chunking = cfg.chunking(audio.dim(1));
  const BlockConfig bc = cfg.block();
  SegmentedTensor seg = add_positions(segment(encode(audio, w), chunking), w.positions);
  Tensor x = seg.data;
  for (const auto& block : w.blocks) x = dual_phase(x, block, bc);
  return decode(SegmentedTensor{x, seg.original_length, seg.pad_length}, w, chunking);
}

inline Tensor forward(std::span<const double> audio, const ModelWeights& w, const ModelConfig& cfg) {
  if (audio.empty()) throw InputError("forward: empty audio");
  return forward(Tensor({1, audio.size()}, Buffer(audio.begin(), audio.end())), w, cfg);
}

}  // namespace dpatd
