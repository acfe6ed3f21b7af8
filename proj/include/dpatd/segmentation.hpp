// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <string>

#include "dpatd/ops.hpp"

namespace dpatd {

struct ChunkConfig {
  std::size_t chunk = 0;  // K
  std::size_t hop = 0;    // P; 0 means P = K
  double pad_value = 0.0;

  std::size_t hop_size() const { return hop == 0 ? chunk : hop; }

  void validate() const {
    if (chunk == 0) throw ConfigError("chunk length must be >= 1");
    if (hop_size() > chunk) {
      throw ConfigError("hop size " + std::to_string(hop_size()) + " exceeds chunk length " +
                        std::to_string(chunk));
    }
  }
};

/// Chunked features [d × K × M] plus what the decoder needs to trim.
struct SegmentedTensor {
  Tensor data;
  std::size_t original_length = 0;
  std::size_t pad_length = 0;

  std::size_t channels() const { return data.dim(0); }
  std::size_t chunk() const { return data.dim(1); }
  std::size_t num_chunks() const { return data.dim(2); }
};

/// K = max(1, round(√(5L))). The total attended length is then K + ⌈L/K⌉,
/// which grows as O(√L).
inline std::size_t choose_chunk_size(std::size_t length) {
  const auto k = static_cast<std::size_t>(std::llround(std::sqrt(5.0 * static_cast<double>(length))));
  return std::max<std::size_t>(1, k);
}

/// M = ⌈max(0, L - K) / P⌉ + 1.
inline std::size_t num_chunks(std::size_t length, const ChunkConfig& cfg) {
  const std::size_t k = cfg.chunk, p = cfg.hop_size();
  const std::size_t rest = length > k ? length - k : 0;
  return (rest + p - 1) / p + 1;
}

/// Splits features[d × L] into M chunks of length K at hop P, zero-padding
/// the tail. Chunk m covers frames [m·P, m·P + K).
inline SegmentedTensor segment(const Tensor& features, const ChunkConfig& cfg) {
  cfg.validate();
  if (features.rank() != 2) throw DimensionError("segment: expected [d × L], got " + shape_str(features.shape()));
  const std::size_t d = features.dim(0), L = features.dim(1);
  const std::size_t K = cfg.chunk, P = cfg.hop_size();
  const std::size_t M = num_chunks(L, cfg);
  const std::size_t padded = (M - 1) * P + K;

  Buffer out(d * K * M);
  const double* in = features.data().data();
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t src = m * P + k;
        out[(c * K + k) * M + m] = src < L ? in[c * L + src] : cfg.pad_value;
      }
  Tensor data = make_op_result({d, K, M}, std::move(out), "segment", {features},
                               [features, d, L, K, M, P](detail::Node& self) {
                                 double* g = grad_sink(features);
                                 if (!g) return;
                                 for (std::size_t c = 0; c < d; ++c)
                                   for (std::size_t k = 0; k < K; ++k)
                                     for (std::size_t m = 0; m < M; ++m) {
                                       const std::size_t src = m * P + k;
                                       if (src < L) g[c * L + src] += self.grad[(c * K + k) * M + m];
                                     }
                               });
  return SegmentedTensor{std::move(data), L, padded - L};
}

/// Sums every chunk back into a [d × L] sequence and trims the padding.
inline Tensor overlap_add(const SegmentedTensor& seg, const ChunkConfig& cfg) {
  cfg.validate();
  if (seg.data.rank() != 3) throw ReconstructionError("overlap_add: expected [d × K × M]");
  const std::size_t d = seg.channels(), K = seg.chunk(), M = seg.num_chunks();
  const std::size_t P = cfg.hop_size(), L = seg.original_length;
  if (K != cfg.chunk || L == 0 || (M - 1) * P + K != L + seg.pad_length ||
      num_chunks(L, cfg) != M) {
    throw ReconstructionError("overlap_add: metadata (L=" + std::to_string(L) + ", pad=" +
                              std::to_string(seg.pad_length) + ") inconsistent with chunks " +
                              shape_str(seg.data.shape()) + " at hop " + std::to_string(P));
  }
  Buffer out(d * L, 0.0);
  const double* in = seg.data.data().data();
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t dst = m * P + k;
        if (dst < L) out[c * L + dst] += in[(c * K + k) * M + m];
      }
  const Tensor& src = seg.data;
  return make_op_result({d, L}, std::move(out), "overlap_add", {src},
                        [src, d, L, K, M, P](detail::Node& self) {
                          double* g = grad_sink(src);
                          if (!g) return;
                          for (std::size_t c = 0; c < d; ++c)
                            for (std::size_t k = 0; k < K; ++k)
                              for (std::size_t m = 0; m < M; ++m) {
                                const std::size_t dst = m * P + k;
                                if (dst < L) g[(c * K + k) * M + m] += self.grad[c * L + dst];
                              }
                        });
}

/// Learnable intra-chunk (over k) and inter-chunk (over m) position tables,
/// each [capacity × d].
struct PositionalEmbedding {
  Tensor intra;
  Tensor inter;
};

/// out[c,k,m] = x[c,k,m] + intra[k,c] + inter[m,c].
inline SegmentedTensor add_positions(const SegmentedTensor& seg, const PositionalEmbedding& emb) {
  const std::size_t d = seg.channels(), K = seg.chunk(), M = seg.num_chunks();
  if (emb.intra.rank() != 2 || emb.inter.rank() != 2 || emb.intra.dim(1) != d || emb.inter.dim(1) != d) {
    throw DimensionError("add_positions: tables " + shape_str(emb.intra.shape()) + ", " +
                         shape_str(emb.inter.shape()) + " do not match width " + std::to_string(d));
  }
  if (K > emb.intra.dim(0)) {
    throw CapacityError("intra-chunk position " + std::to_string(K - 1) + " beyond table of " +
                        std::to_string(emb.intra.dim(0)));
  }
  if (M > emb.inter.dim(0)) {
    throw CapacityError("chunk index " + std::to_string(M - 1) + " beyond table of " +
                        std::to_string(emb.inter.dim(0)));
  }
  const Tensor x = seg.data;
  const Tensor intra = emb.intra;
  const Tensor inter = emb.inter;
  Buffer out(x.data().begin(), x.data().end());
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t m = 0; m < M; ++m)
        out[(c * K + k) * M + m] += intra.data()[k * d + c] + inter.data()[m * d + c];
  Tensor data = make_op_result(x.shape(), std::move(out), "add_positions", {x, intra, inter},
                               [x, intra, inter, d, K, M](detail::Node& self) {
                                 if (double* g = grad_sink(x)) {
                                   for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
                                 }
                                 double* gi = grad_sink(intra);
                                 double* ge = grad_sink(inter);
                                 for (std::size_t c = 0; c < d; ++c)
                                   for (std::size_t k = 0; k < K; ++k)
                                     for (std::size_t m = 0; m < M; ++m) {
                                       const double v = self.grad[(c * K + k) * M + m];
                                       if (gi) gi[k * d + c] += v;
                                       if (ge) ge[m * d + c] += v;
                                     }
                               });
  return SegmentedTensor{std::move(data), seg.original_length, seg.pad_length};
}

}  // namespace dpatd
