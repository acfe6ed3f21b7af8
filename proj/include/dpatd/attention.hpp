// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dpatd/ops.hpp"
#include "dpatd/rng.hpp"

namespace dpatd {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct AttentionConfig {
  std::size_t d = 32;
  std::size_t heads = 8;
  std::size_t compress_kernel = 3;
  std::size_t compress_stride = 3;

  std::size_t head_dim() const { return d / heads; }

  void validate() const {
    if (d == 0 || heads == 0 || d % heads != 0) {
      throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide d=" +
                        std::to_string(d));
    }
    if (compress_kernel == 0 || compress_stride == 0) {
      throw ConfigError("attention: compression kernel and stride must be >= 1");
    }
  }

  /// Key/value length after compression; sequences shorter than the kernel
  /// bypass compression.
  std::size_t compressed_length(std::size_t l) const {
    if (l < compress_kernel) return l;
    return (l - compress_kernel) / compress_stride + 1;
  }
};

/// Projections are stored as [d × d]; columns [i·d_k, (i+1)·d_k) form head
/// i's W^Q_i / W^K_i / W^V_i. Compression kernels are [d_k × d_k × width],
/// one for keys and one for values, shared across heads.
struct AttentionWeights {
  Tensor w_query;
  Tensor w_key;
  Tensor w_value;
  Tensor w_out;
  Tensor b_out;
  Tensor compress_key;
  Tensor compress_value;
  Tensor bias;  // [capacity], added per compressed key position

  static AttentionWeights init(const AttentionConfig& cfg, std::size_t bias_capacity, Rng& rng,
                               double stddev = 0.02) {
    cfg.validate();
    const std::size_t d = cfg.d, dk = cfg.head_dim();
    AttentionWeights w;
    w.w_query = randn({d, d}, rng, stddev, true);
    w.w_key = randn({d, d}, rng, stddev, true);
    w.w_value = randn({d, d}, rng, stddev, true);
    w.w_out = randn({d, d}, rng, stddev, true);
    w.b_out = Tensor::zeros({d}, true);
    w.compress_key = randn({dk, dk, cfg.compress_kernel}, rng, stddev, true);
    w.compress_value = randn({dk, dk, cfg.compress_kernel}, rng, stddev, true);
    w.bias = Tensor::zeros({bias_capacity}, true);
    return w;
  }

  NamedTensors parameters(const std::string& prefix) const {
    return {{prefix + "w_query", w_query},         {prefix + "w_key", w_key},
            {prefix + "w_value", w_value},         {prefix + "w_out", w_out},
            {prefix + "b_out", b_out},             {prefix + "compress_key", compress_key},
            {prefix + "compress_value", compress_value}, {prefix + "bias", bias}};
  }
};

/// Batched per-head intermediates: logits W_raw, softmax W, clamped
/// (W + b) which is Aᵀ, compressed values V_c, and features P. Leading axis
/// is batch·heads, head-minor.
struct AttentionTrace {
  std::size_t heads = 0;
  Tensor logits;
  Tensor weights;
  Tensor scaled;
  Tensor values;
  Tensor features;

  std::size_t count() const { return logits.dim(0); }

  /// A for head slot i, shape [l' × l].
  Tensor explain(std::size_t i) const { return transpose(slot(scaled, i)); }
  Tensor feature(std::size_t i) const { return slot(features, i); }
  Tensor compressed_values(std::size_t i) const { return slot(values, i); }
  Tensor softmax_weights(std::size_t i) const { return slot(weights, i); }

 private:
  static Tensor slot(const Tensor& t, std::size_t i) {
    NoGradGuard guard;
    return reshape(narrow(t, 0, i, 1), {t.dim(1), t.dim(2)});
  }
};

namespace detail {

// out[b, t, j·c + ci] = x[b, t·stride + j, ci] for t < l'.
inline Tensor frames(const Tensor& x, std::size_t width, std::size_t stride) {
  const std::size_t B = x.dim(0), l = x.dim(1), c = x.dim(2);
  const std::size_t lc = (l - width) / stride + 1;
  Buffer out(B * lc * width * c);
  const double* in = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < lc; ++t)
      std::copy_n(in + (b * l + t * stride) * c, width * c, out.data() + (b * lc + t) * width * c);
  return make_op_result({B, lc, width * c}, std::move(out), "frames", {x},
                        [x, B, l, c, lc, width, stride](detail::Node& self) {
                          double* g = grad_sink(x);
                          if (!g) return;
                          for (std::size_t b = 0; b < B; ++b)
                            for (std::size_t t = 0; t < lc; ++t) {
                              const double* src = self.grad.data() + (b * lc + t) * width * c;
                              double* dst = g + (b * l + t * stride) * c;
                              for (std::size_t i = 0; i < width * c; ++i) dst[i] += src[i];
                            }
                        });
}

inline Tensor as_batch(const Tensor& t) {
  return t.rank() == 2 ? reshape(t, {1, t.dim(0), t.dim(1)}) : t;
}

// [B × l × d] -> [B·h × l × d_k]
inline Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0), l = x.dim(1), dk = x.dim(2) / heads;
  return reshape(permute(reshape(x, {B, l, heads, dk}), {0, 2, 1, 3}), {B * heads, l, dk});
}

// [B·h × l × d_k] -> [B × l × d]
inline Tensor merge_heads(const Tensor& x, std::size_t heads) {
  const std::size_t B = x.dim(0) / heads, l = x.dim(1), dk = x.dim(2);
  return reshape(permute(reshape(x, {B, heads, l, dk}), {0, 2, 1, 3}), {B, l, heads * dk});
}

}  // namespace detail

struct HeadProjections {
  Tensor query;  // [B·h × l × d_k]
  Tensor key;
  Tensor value;
};

/// Q_i = Y·W^Q_i, K_i = Y·W^K_i, V_i = Y·W^V_i for every head, stacked on the
/// leading axis (batch-major, head-minor). Y is [l × d] or [B × l × d].
inline HeadProjections project_heads(const Tensor& y, const AttentionWeights& w, const AttentionConfig& cfg) {
  cfg.validate();
  if (y.shape().back() != cfg.d) {
    throw DimensionError("project_heads: input " + shape_str(y.shape()) + " for model width " +
                         std::to_string(cfg.d));
  }
  const Tensor yb = detail::as_batch(y);
  return {detail::split_heads(linear(yb, w.w_query), cfg.heads),
          detail::split_heads(linear(yb, w.w_key), cfg.heads),
          detail::split_heads(linear(yb, w.w_value), cfg.heads)};
}

/// Valid strided convolution along the sequence axis of x[B × l × d_k] with
/// kernel[d_k × d_k × width]; identity when l is shorter than the kernel.
inline Tensor compress_sequence(const Tensor& x, const Tensor& kernel, const AttentionConfig& cfg) {
  const Tensor xb = detail::as_batch(x);
  if (xb.dim(1) < cfg.compress_kernel) return x;
  const std::size_t c_out = kernel.dim(0), c_in = kernel.dim(1), width = kernel.dim(2);
  if (c_in != xb.dim(2) || width != cfg.compress_kernel) {
    throw DimensionError("compress: kernel " + shape_str(kernel.shape()) + " for input " +
                         shape_str(x.shape()));
  }
  // Kernel as a [width·c_in × c_out] matrix matching the frame layout.
  const Tensor kmat = reshape(permute(kernel, {2, 1, 0}), {width * c_in, c_out});
  Tensor out = linear(detail::frames(xb, width, cfg.compress_stride), kmat);
  return x.rank() == 2 ? reshape(out, {out.dim(1), out.dim(2)}) : out;
}

inline std::pair<Tensor, Tensor> compress_kv(const Tensor& keys, const Tensor& values,
                                             const AttentionWeights& w, const AttentionConfig& cfg) {
  return {compress_sequence(keys, w.compress_key, cfg), compress_sequence(values, w.compress_value, cfg)};
}

/// W = softmax(Q·K_cᵀ/√d_k); Aᵀ = L(W + b) with L(X) = X / max(1, ‖X‖_F);
/// P = Aᵀ·V_c. Inputs are [l × d_k] or batched [B × l × d_k]; b is the
/// per-key bias, at least l' long.
inline Tensor explainable_attention(const Tensor& q, const Tensor& k_c, const Tensor& v_c,
                                    const Tensor& bias, AttentionTrace* trace = nullptr) {
  const Tensor qb = detail::as_batch(q), kb = detail::as_batch(k_c), vb = detail::as_batch(v_c);
  if (kb.dim(1) != vb.dim(1) || qb.dim(2) != kb.dim(2)) {
    throw DimensionError("explainable_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k_c.shape()) + ", v " + shape_str(v_c.shape()));
  }
  const std::size_t lc = kb.dim(1);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(qb.dim(2)));
  Tensor logits = bmm(qb, kb, /*transpose_b=*/true, inv_sqrt_dk);
  Tensor weights = softmax(logits, 2);
  Tensor scaled = frobenius_clamp(add_broadcast(weights, slice_rows(bias, lc), 2));
  Tensor p = bmm(scaled, vb);
  if (trace) {
    trace->logits = logits;
    trace->weights = weights;
    trace->scaled = scaled;
    trace->values = vb;
    trace->features = p;
  }
  return q.rank() == 2 ? reshape(p, {p.dim(1), p.dim(2)}) : p;
}

/// Memory-compressed explainable multi-head self-attention. Y is [l × d]
/// or [B × l × d]; output has the same shape.
inline Tensor mce_msa(const Tensor& y, const AttentionWeights& w, const AttentionConfig& cfg,
                      AttentionTrace* trace = nullptr) {
  HeadProjections heads = project_heads(y, w, cfg);
  auto [k_c, v_c] = compress_kv(heads.key, heads.value, w, cfg);
  Tensor p = explainable_attention(heads.query, k_c, v_c, w.bias, trace);
  if (trace) trace->heads = cfg.heads;
  Tensor out = linear(detail::merge_heads(p, cfg.heads), w.w_out, w.b_out);
  return y.rank() == 2 ? reshape(out, y.shape()) : out;
}

}  // namespace dpatd
