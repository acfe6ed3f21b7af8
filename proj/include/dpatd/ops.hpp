// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "dpatd/tensor.hpp"

namespace dpatd {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline ConstMatMap cmat(const double* p, std::size_t r, std::size_t c) {
  return ConstMatMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MatMap mat(double* p, std::size_t r, std::size_t c) {
  return MatMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

inline ArrMap arr(double* p, std::size_t n) { return ArrMap(p, static_cast<Eigen::Index>(n)); }
inline ConstArrMap carr(const double* p, std::size_t n) {
  return ConstArrMap(p, static_cast<Eigen::Index>(n));
}

// In-place vectorized transcendental kernels (Eigen's packet exp).
inline void tanh_inplace(double* p, std::size_t n) {
  auto a = arr(p, n);
  a = 1.0 - 2.0 / ((2.0 * a).exp() + 1.0);
}

inline void sigmoid_inplace(double* p, std::size_t n) {
  auto a = arr(p, n);
  a = 1.0 / (1.0 + (-a).exp());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

inline std::size_t leading_rows(const Shape& s) {
  std::size_t rows = 1;
  for (std::size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return rows;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  detail::mat(out.data(), m, n).noalias() =
      detail::cmat(a.data().data(), m, k) * detail::cmat(b.data().data(), k, n);
  return make_op_result({m, n}, std::move(out), "matmul", {a, b},
                        [a, b, m, k, n](detail::Node& self) {
                          auto g = detail::cmat(self.grad.data(), m, n);
                          if (double* ga = grad_sink(a)) {
                            detail::mat(ga, m, k).noalias() +=
                                g * detail::cmat(b.data().data(), k, n).transpose();
                          }
                          if (double* gb = grad_sink(b)) {
                            detail::mat(gb, k, n).noalias() +=
                                detail::cmat(a.data().data(), m, k).transpose() * g;
                          }
                        });
}

/// x[..., k] · w[k × n] (+ bias[n]) over the last axis.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = detail::leading_rows(x.shape());
  const std::size_t k = w.dim(0), n = w.dim(1);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != n)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for output width " +
                         std::to_string(n));
  }
  Buffer out(rows * n);
  auto o = detail::mat(out.data(), rows, n);
  o.noalias() = detail::cmat(x.data().data(), rows, k) * detail::cmat(w.data().data(), k, n);
  if (has_bias) o.rowwise() += detail::cmat(bias.data().data(), 1, n).row(0);
  Shape shape = x.shape();
  shape.back() = n;
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_op_result(std::move(shape), std::move(out), "linear", std::move(inputs),
                        [x, w, bias, rows, k, n, has_bias](detail::Node& self) {
                          auto g = detail::cmat(self.grad.data(), rows, n);
                          if (double* gx = grad_sink(x)) {
                            detail::mat(gx, rows, k).noalias() +=
                                g * detail::cmat(w.data().data(), k, n).transpose();
                          }
                          if (double* gw = grad_sink(w)) {
                            detail::mat(gw, k, n).noalias() +=
                                detail::cmat(x.data().data(), rows, k).transpose() * g;
                          }
                          if (has_bias) {
                            if (double* gb = grad_sink(bias)) {
                              detail::mat(gb, 1, n) += g.colwise().sum();
                            }
                          }
                        });
}

/// Batched product alpha · a[B×m×k] · b[B×k×n], or alpha · a · bᵀ with
/// b[B×n×k] when `transpose_b` is set.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false, double alpha = 1.0) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
    throw DimensionError("bmm: cannot multiply " + shape_str(a.shape()) + " by " +
                         shape_str(b.shape()) + (transpose_b ? "^T" : ""));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  Buffer out(batch * m * n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    auto am = detail::cmat(pa + i * m * k, m, k);
    auto o = detail::mat(out.data() + i * m * n, m, n);
    if (transpose_b) {
      o.noalias() = alpha * am * detail::cmat(pb + i * n * k, n, k).transpose();
    } else {
      o.noalias() = alpha * am * detail::cmat(pb + i * k * n, k, n);
    }
  }
  return make_op_result(
      {batch, m, n}, std::move(out), "bmm", {a, b},
      [a, b, batch, m, k, n, transpose_b, alpha](detail::Node& self) {
        double* ga = grad_sink(a);
        double* gb = grad_sink(b);
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < batch; ++i) {
          auto g = alpha * detail::cmat(self.grad.data() + i * m * n, m, n);
          if (ga) {
            auto gam = detail::mat(ga + i * m * k, m, k);
            if (transpose_b) {
              gam.noalias() += g * detail::cmat(pb + i * n * k, n, k);
            } else {
              gam.noalias() += g * detail::cmat(pb + i * k * n, k, n).transpose();
            }
          }
          if (gb) {
            auto am = detail::cmat(pa + i * m * k, m, k);
            if (transpose_b) {
              detail::mat(gb + i * n * k, n, k).noalias() += g.transpose() * am;
            } else {
              detail::mat(gb + i * k * n, k, n).noalias() += am.transpose() * g;
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_op_result(a.shape(), std::move(out), "add", {a, b}, [a, b](detail::Node& self) {
    if (double* g = grad_sink(b)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    accumulate_grad(a, self.grad);
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_op_result(a.shape(), std::move(out), "sub", {a, b}, [a, b](detail::Node& self) {
    if (double* g = grad_sink(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = grad_sink(b)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Buffer out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_op_result(a.shape(), std::move(out), "mul", {a, b}, [a, b](detail::Node& self) {
    if (double* g = grad_sink(a)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * b.data()[i];
    }
    if (double* g = grad_sink(b)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * a.data()[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * s;
  return make_op_result(x.shape(), std::move(out), "scale", {x}, [x, s](detail::Node& self) {
    for (auto& v : self.grad) v *= s;
    accumulate_grad(x, self.grad);
  });
}

/// x + b broadcast along `axis`, where b is 1-D with length x.shape[axis].
inline Tensor add_broadcast(const Tensor& x, const Tensor& b, std::size_t axis) {
  if (axis >= x.rank() || b.rank() != 1 || b.dim(0) != x.dim(axis)) {
    throw DimensionError("add_broadcast: bias " + shape_str(b.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Buffer out(x.data().begin(), x.data().end());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j) {
      const double bj = b.data()[j];
      double* row = out.data() + (o * n + j) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bj;
    }
  return make_op_result(x.shape(), std::move(out), "add_broadcast", {x, b},
                        [x, b, outer, inner, n](detail::Node& self) {
                          if (double* g = grad_sink(b)) {
                            for (std::size_t o = 0; o < outer; ++o)
                              for (std::size_t j = 0; j < n; ++j) {
                                const double* row = self.grad.data() + (o * n + j) * inner;
                                double s = 0.0;
                                for (std::size_t i = 0; i < inner; ++i) s += row[i];
                                g[j] += s;
                              }
                          }
                          accumulate_grad(x, self.grad);
                        });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_op_result({1}, {s}, "sum", {x}, [x](detail::Node& self) {
    if (double* g = grad_sink(x)) {
      for (std::size_t i = 0; i < x.numel(); ++i) g[i] += self.grad[0];
    }
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// (1/N)·Σ(pred − target)²; the target is treated as a constant.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  detail::require_same_shape(pred, target, "mse_loss");
  const double n = static_cast<double>(pred.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred.data()[i] - target.data()[i];
    s += d * d;
  }
  return make_op_result({1}, {s / n}, "mse_loss", {pred},
                        [pred, target, n](detail::Node& self) {
                          if (double* g = grad_sink(pred)) {
                            const double c = 2.0 * self.grad[0] / n;
                            for (std::size_t i = 0; i < pred.numel(); ++i)
                              g[i] += c * (pred.data()[i] - target.data()[i]);
                          }
                        });
}

enum class Activation { relu, gelu };

inline Tensor relu(const Tensor& x) {
  Buffer out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return make_op_result(x.shape(), std::move(out), "relu", {x}, [x](detail::Node& self) {
    if (double* g = grad_sink(x)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (x.data()[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

/// GELU, tanh approximation: 0.5·x·(1 + tanh(u)), u = √(2/π)·(x + 0.044715·x³).
/// Evaluated as x·σ(2u), which equals it and stays accurate in the far
/// negative tail where 1 + tanh(u) cancels.
inline Tensor gelu(const Tensor& x) {
  static constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double a = 0.044715;
  const std::size_t n = x.numel();
  auto s = std::make_shared<Buffer>(n);
  auto xa = detail::carr(x.data().data(), n);
  detail::arr(s->data(), n) = 2.0 * c * (xa + a * xa.cube());
  detail::sigmoid_inplace(s->data(), n);
  Buffer out(n);
  detail::arr(out.data(), n) = xa * detail::carr(s->data(), n);
  return make_op_result(x.shape(), std::move(out), "gelu", {x}, [x, s, n](detail::Node& self) {
    if (double* g = grad_sink(x)) {
      auto xa = detail::carr(x.data().data(), n);
      auto sa = detail::carr(s->data(), n);
      auto ds = sa * (1.0 - sa) * (2.0 * c) * (1.0 + 3.0 * a * xa.square());
      detail::arr(g, n) += detail::carr(self.grad.data(), n) * (sa + xa * ds);
    }
  });
}

inline Tensor activation(const Tensor& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : gelu(x);
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Buffer out(x.data().begin(), x.data().end());
  return make_op_result(std::move(shape), std::move(out), "reshape", {x},
                        [x](detail::Node& self) { accumulate_grad(x, self.grad); });
}

/// Output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: rank mismatch for " + shape_str(x.shape()));
  std::vector<bool> used(r, false);
  for (auto p : perm) {
    if (p >= r || used[p]) throw DimensionError("permute: invalid axis order");
    used[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    src_stride[i] = in_stride[perm[i]];
  }
  // map[i] = source offset of output element i
  const std::size_t n = x.numel();
  auto gather_index = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*gather_index)[i] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[(*gather_index)[i]];
  return make_op_result(std::move(out_shape), std::move(out), "permute", {x},
                        [x, gather_index](detail::Node& self) {
                          if (double* g = grad_sink(x)) {
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              g[(*gather_index)[i]] += self.grad[i];
                          }
                        });
}

inline Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

/// Slice [start, start+len) along `axis`.
inline Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= x.rank() || len == 0 || start + len > x.dim(axis)) {
    throw DimensionError("narrow: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") on axis " + std::to_string(axis) +
                         " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t full = x.dim(axis);
  Buffer out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = x.data().data() + (o * full + start) * inner;
    std::copy(src, src + len * inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  }
  Shape shape = x.shape();
  shape[axis] = len;
  return make_op_result(std::move(shape), std::move(out), "narrow", {x},
                        [x, outer, inner, full, start, len](detail::Node& self) {
                          if (double* g = grad_sink(x)) {
                            for (std::size_t o = 0; o < outer; ++o) {
                              const double* src = self.grad.data() + o * len * inner;
                              double* dst = g + (o * full + start) * inner;
                              for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

/// First `n` rows of a table, with capacity checking.
inline Tensor slice_rows(const Tensor& table, std::size_t n) {
  if (n > table.dim(0)) {
    throw CapacityError("position " + std::to_string(n - 1) + " beyond table of " +
                        std::to_string(table.dim(0)) + " rows");
  }
  if (n == table.dim(0)) return table;
  return narrow(table, 0, 0, n);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Softmax along `axis`, stabilized by subtracting the slice maximum.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Buffer out(x.numel());
  const double* in = x.data().data();
  if (inner == 1) {
    for (std::size_t o = 0; o < outer; ++o) {
      auto row = detail::arr(out.data() + o * n, n);
      auto src = detail::carr(in + o * n, n);
      row = (src - src.maxCoeff()).exp();
      row /= row.sum();
    }
  } else {
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        double mx = in[base];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[base + j * inner]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double e = std::exp(in[base + j * inner] - mx);
          out[base + j * inner] = e;
          s += e;
        }
        for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= s;
      }
  }
  return make_op_result(x.shape(), std::move(out), "softmax", {x},
                        [x, outer, inner, n](detail::Node& self) {
                          double* g = grad_sink(x);
                          if (!g) return;
                          const auto& y = self.value;
                          const auto& gy = self.grad;
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t i = 0; i < inner; ++i) {
                              const std::size_t base = o * n * inner + i;
                              double dot = 0.0;
                              for (std::size_t j = 0; j < n; ++j)
                                dot += gy[base + j * inner] * y[base + j * inner];
                              for (std::size_t j = 0; j < n; ++j) {
                                const std::size_t k = base + j * inner;
                                g[k] += y[k] * (gy[k] - dot);
                              }
                            }
                        });
}

namespace detail {

// Shared backward for normalizations: x̂ = (x-μ)·rstd over a set of
// elements, dx = rstd·(dx̂ - mean(dx̂) - x̂·mean(dx̂·x̂)).
inline void normalize_backward(const double* xhat, const double* dxhat, double rstd, std::size_t n,
                               std::size_t stride, double* gx) {
  double m1 = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    m1 += dxhat[i];
    m2 += dxhat[i] * xhat[i * stride];
  }
  m1 /= static_cast<double>(n);
  m2 /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) gx[i * stride] += rstd * (dxhat[i] - m1 - xhat[i * stride] * m2);
}

}  // namespace detail

/// LayerNorm over the last axis with affine gamma/beta of that width.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: affine width mismatch for " + shape_str(x.shape()));
  }
  const std::size_t rows = detail::leading_rows(x.shape());
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto rstd = std::make_shared<Buffer>(rows);
  Buffer out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mu = 0.0;
    for (std::size_t i = 0; i < d; ++i) mu += in[i];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t i = 0; i < d; ++i) {
      const double h = (in[i] - mu) * rs;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = h * gamma.data()[i] + beta.data()[i];
    }
  }
  return make_op_result(
      x.shape(), std::move(out), "layer_norm", {x, gamma, beta},
      [x, gamma, beta, xhat, rstd, rows, d](detail::Node& self) {
        double* gx = grad_sink(x);
        double* gg = grad_sink(gamma);
        double* gb = grad_sink(beta);
        Buffer dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gy = self.grad.data() + r * d;
          const double* h = xhat->data() + r * d;
          for (std::size_t i = 0; i < d; ++i) {
            if (gg) gg[i] += gy[i] * h[i];
            if (gb) gb[i] += gy[i];
            dxhat[i] = gy[i] * gamma.data()[i];
          }
          if (gx) detail::normalize_backward(h, dxhat.data(), (*rstd)[r], d, 1, gx + r * d);
        }
      });
}

/// GroupNorm on a channel-first tensor x[C × ...]: channels are split into
/// `groups` contiguous groups, each normalized jointly over its channels and
/// all positions, then per-channel affine.
inline Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  if (x.rank() < 1) throw DimensionError("group_norm: empty shape");
  const std::size_t channels = x.dim(0);
  if (groups == 0 || channels % groups != 0) {
    throw ConfigError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw DimensionError("group_norm: affine width mismatch for " + shape_str(x.shape()));
  }
  const std::size_t positions = x.numel() / channels;
  const std::size_t group_size = channels / groups * positions;
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto rstd = std::make_shared<Buffer>(groups);
  Buffer out(x.numel());
  for (std::size_t g = 0; g < groups; ++g) {
    const double* in = x.data().data() + g * group_size;
    double mu = 0.0;
    for (std::size_t i = 0; i < group_size; ++i) mu += in[i];
    mu /= static_cast<double>(group_size);
    double var = 0.0;
    for (std::size_t i = 0; i < group_size; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(group_size);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[g] = rs;
    for (std::size_t i = 0; i < group_size; ++i) (*xhat)[g * group_size + i] = (in[i] - mu) * rs;
  }
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t p = 0; p < positions; ++p) {
      const std::size_t k = c * positions + p;
      out[k] = (*xhat)[k] * gamma.data()[c] + beta.data()[c];
    }
  return make_op_result(
      x.shape(), std::move(out), "group_norm", {x, gamma, beta},
      [x, gamma, beta, xhat, rstd, groups, channels, positions, group_size](detail::Node& self) {
        double* gx = grad_sink(x);
        double* gg = grad_sink(gamma);
        double* gb = grad_sink(beta);
        const double* gy = self.grad.data();
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t p = 0; p < positions; ++p) {
            const std::size_t k = c * positions + p;
            if (gg) gg[c] += gy[k] * (*xhat)[k];
            if (gb) gb[c] += gy[k];
          }
        if (!gx) return;
        Buffer dxhat(group_size);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t i = 0; i < group_size; ++i) {
            const std::size_t k = g * group_size + i;
            dxhat[i] = gy[k] * gamma.data()[k / positions];
          }
          detail::normalize_backward(xhat->data() + g * group_size, dxhat.data(), (*rstd)[g],
                                     group_size, 1, gx + g * group_size);
        }
      });
}

/// Scales each trailing [m × n] matrix by 1 / max(1, ‖·‖_F), so every
/// output matrix has Frobenius norm at most one and keeps its direction.
inline Tensor frobenius_clamp(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("frobenius_clamp: need rank >= 2, got " + shape_str(x.shape()));
  const std::size_t block = x.dim(x.rank() - 1) * x.dim(x.rank() - 2);
  const std::size_t count = x.numel() / block;
  auto norms = std::make_shared<Buffer>(count);
  Buffer out(x.numel());
  for (std::size_t b = 0; b < count; ++b) {
    const double* in = x.data().data() + b * block;
    double s = 0.0;
    for (std::size_t i = 0; i < block; ++i) s += in[i] * in[i];
    const double nrm = std::sqrt(s);
    (*norms)[b] = nrm;
    const double f = 1.0 / std::max(1.0, nrm);
    for (std::size_t i = 0; i < block; ++i) out[b * block + i] = in[i] * f;
  }
  return make_op_result(x.shape(), std::move(out), "frobenius_clamp", {x},
                        [x, norms, block, count](detail::Node& self) {
                          double* g = grad_sink(x);
                          if (!g) return;
                          for (std::size_t b = 0; b < count; ++b) {
                            const double nrm = (*norms)[b];
                            const double* gy = self.grad.data() + b * block;
                            double* gx = g + b * block;
                            if (nrm <= 1.0) {
                              for (std::size_t i = 0; i < block; ++i) gx[i] += gy[i];
                              continue;
                            }
                            const double* y = self.value.data() + b * block;
                            double dot = 0.0;
                            for (std::size_t i = 0; i < block; ++i) dot += y[i] * gy[i];
                            for (std::size_t i = 0; i < block; ++i) gx[i] += (gy[i] - y[i] * dot) / nrm;
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

enum class Padding { valid, same };

inline std::size_t conv1d_output_length(std::size_t n, std::size_t width, std::size_t stride,
                                        Padding padding) {
  if (padding == Padding::same) return (n - 1) / stride + 1;
  return (n - width) / stride + 1;
}

/// 1-D cross-correlation of x[c_in × n] with kernels[c_out × c_in × w].
/// `same` padding pads (w-1)/2 zeros on the left and the rest on the right.
inline Tensor conv1d(const Tensor& x, const Tensor& kernels, std::size_t stride,
                     Padding padding = Padding::valid) {
  if (x.rank() != 2 || kernels.rank() != 3 || kernels.dim(1) != x.dim(0)) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " incompatible with kernels " +
                         shape_str(kernels.shape()));
  }
  if (stride == 0) throw ConfigError("conv1d: stride must be >= 1");
  const std::size_t c_in = x.dim(0), n = x.dim(1);
  const std::size_t c_out = kernels.dim(0), w = kernels.dim(2);
  if (padding == Padding::valid && n < w) {
    throw SequenceTooShortError("conv1d: sequence of length " + std::to_string(n) +
                                " shorter than kernel width " + std::to_string(w));
  }
  const std::ptrdiff_t pad_left = padding == Padding::same ? static_cast<std::ptrdiff_t>((w - 1) / 2) : 0;
  const std::size_t n_out = conv1d_output_length(n, w, stride, padding);
  const std::size_t span = c_in * w;

  // cols[t, ci·w + j] = x[ci, t·stride + j - pad_left], zero outside.
  auto source = [=](std::size_t t, std::size_t j) -> std::ptrdiff_t {
    const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t * stride + j) - pad_left;
    return s >= 0 && s < static_cast<std::ptrdiff_t>(n) ? s : -1;
  };
  auto cols = std::make_shared<detail::RowMat>(detail::RowMat::Zero(n_out, span));
  const double* px = x.data().data();
  for (std::size_t t = 0; t < n_out; ++t)
    for (std::size_t ci = 0; ci < c_in; ++ci)
      for (std::size_t j = 0; j < w; ++j) {
        const auto s = source(t, j);
        if (s >= 0) (*cols)(t, ci * w + j) = px[ci * n + static_cast<std::size_t>(s)];
      }
  Buffer out(c_out * n_out);
  detail::mat(out.data(), c_out, n_out).noalias() =
      detail::cmat(kernels.data().data(), c_out, span) * cols->transpose();
  return make_op_result(
      {c_out, n_out}, std::move(out), "conv1d", {x, kernels},
      [x, kernels, cols, source, c_in, n, c_out, w, n_out, span](detail::Node& self) {
        auto g = detail::cmat(self.grad.data(), c_out, n_out);
        if (double* gk = grad_sink(kernels)) {
          detail::mat(gk, c_out, span).noalias() += g * (*cols);
        }
        if (double* gx = grad_sink(x)) {
          const detail::RowMat dcols = g.transpose() * detail::cmat(kernels.data().data(), c_out, span);
          for (std::size_t t = 0; t < n_out; ++t)
            for (std::size_t ci = 0; ci < c_in; ++ci)
              for (std::size_t j = 0; j < w; ++j) {
                const auto s = source(t, j);
                if (s >= 0) gx[ci * n + static_cast<std::size_t>(s)] += dcols(t, ci * w + j);
              }
        }
      });
}

}  // namespace dpatd
