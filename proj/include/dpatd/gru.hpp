// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "dpatd/ops.hpp"

namespace dpatd {

/// Gated recurrent unit parameters. Gate blocks along the 3H axis are ordered
/// (update z, reset r, candidate n).
///
///   z_t = σ(x_t W_z + h_{t-1} U_z + b_z)
///   r_t = σ(x_t W_r + h_{t-1} U_r + b_r)
///   n_t = tanh(x_t W_n + (r_t ⊙ h_{t-1}) U_n + b_n)
///   h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ n_t
struct GruParams {
  Tensor w_input;      // [d_in × 3H]
  Tensor w_recurrent;  // [H × 3H]
  Tensor bias;         // [3H]

  std::size_t hidden() const { return w_recurrent.dim(0); }
};

/// Runs the recurrence over a sequence. Accepts x[T × d_in] with h0[H], or a
/// batch x[B × T × d_in] with h0[B × H]; returns every hidden state.
inline Tensor gru_sequence(const Tensor& x, const GruParams& p, const Tensor& h0) {
  const bool batched = x.rank() == 3;
  if (x.rank() != 2 && !batched) throw DimensionError("gru_sequence: input " + shape_str(x.shape()));
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t T = x.dim(batched ? 1 : 0);
  const std::size_t D = x.shape().back();
  const std::size_t H = p.hidden();
  if (p.w_input.rank() != 2 || p.w_input.dim(0) != D || p.w_input.dim(1) != 3 * H ||
      p.w_recurrent.dim(1) != 3 * H || p.bias.numel() != 3 * H) {
    throw DimensionError("gru_sequence: parameters " + shape_str(p.w_input.shape()) + ", " +
                         shape_str(p.w_recurrent.shape()) + " do not fit input " +
                         shape_str(x.shape()));
  }
  if (h0.numel() != B * H) {
    throw DimensionError("gru_sequence: initial state " + shape_str(h0.shape()) + " for batch " +
                         std::to_string(B) + " and hidden " + std::to_string(H));
  }

  // Time-major copies: row (t·B + b).
  auto xt = std::make_shared<Buffer>(T * B * D);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(x.data().data() + (b * T + t) * D, D, xt->data() + (t * B + b) * D);

  // gates[t] holds (z, r, n) per batch row; hs[t] is h_{t-1}, hs[T] the last.
  auto gates = std::make_shared<Buffer>(T * B * 3 * H);
  auto hs = std::make_shared<Buffer>((T + 1) * B * H);
  auto rh = std::make_shared<Buffer>(T * B * H);
  std::copy(h0.data().begin(), h0.data().end(), hs->begin());

  auto pre = detail::mat(gates->data(), T * B, 3 * H);
  pre.noalias() = detail::cmat(xt->data(), T * B, D) * detail::cmat(p.w_input.data().data(), D, 3 * H);
  pre.rowwise() += detail::cmat(p.bias.data().data(), 1, 3 * H).row(0);

  const auto U = detail::cmat(p.w_recurrent.data().data(), H, 3 * H);
  detail::RowMat hu(B, 2 * H);
  detail::RowMat nu(B, H);
  for (std::size_t t = 0; t < T; ++t) {
    const double* hp = hs->data() + t * B * H;
    double* hn = hs->data() + (t + 1) * B * H;
    double* g = gates->data() + t * B * 3 * H;
    double* rht = rh->data() + t * B * H;
    hu.noalias() = detail::cmat(hp, B, H) * U.leftCols(static_cast<Eigen::Index>(2 * H));
    for (std::size_t b = 0; b < B; ++b) {
      double* gz = g + b * 3 * H;
      detail::arr(gz, 2 * H) += detail::carr(hu.data() + b * 2 * H, 2 * H);
      detail::sigmoid_inplace(gz, 2 * H);
      detail::arr(rht + b * H, H) = detail::carr(gz + H, H) * detail::carr(hp + b * H, H);
    }
    nu.noalias() = detail::cmat(rht, B, H) * U.rightCols(static_cast<Eigen::Index>(H));
    for (std::size_t b = 0; b < B; ++b) {
      double* gz = g + b * 3 * H;
      auto n = detail::arr(gz + 2 * H, H);
      n += detail::carr(nu.data() + b * H, H);
      detail::tanh_inplace(gz + 2 * H, H);
      auto z = detail::carr(gz, H);
      detail::arr(hn + b * H, H) = (1.0 - z) * detail::carr(hp + b * H, H) + z * n;
    }
  }

  Buffer out(B * T * H);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      std::copy_n(hs->data() + ((t + 1) * B + b) * H, H, out.data() + (b * T + t) * H);
  Shape shape = batched ? Shape{B, T, H} : Shape{T, H};

  return make_op_result(
      std::move(shape), std::move(out), "gru_sequence",
      {x, p.w_input, p.w_recurrent, p.bias, h0},
      [x, p, h0, xt, gates, hs, rh, B, T, D, H](detail::Node& self) {
        const auto U = detail::cmat(p.w_recurrent.data().data(), H, 3 * H);
        detail::RowMat dgates(T * B, 3 * H);
        detail::RowMat dh = detail::RowMat::Zero(B, H);
        detail::RowMat drh(B, H);
        double* gU = grad_sink(p.w_recurrent);
        for (std::size_t t = T; t-- > 0;) {
          const double* hp = hs->data() + t * B * H;
          const double* g = gates->data() + t * B * 3 * H;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < H; ++j)
              dh(b, j) += self.grad[(b * T + t) * H + j];
          auto da = dgates.middleRows(static_cast<Eigen::Index>(t * B), static_cast<Eigen::Index>(B));
          // Candidate and update gate.
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < H; ++j) {
              const double z = g[b * 3 * H + j];
              const double n = g[b * 3 * H + 2 * H + j];
              const double dhn = dh(b, j);
              da(b, j) = dhn * (n - hp[b * H + j]) * z * (1.0 - z);
              da(b, 2 * H + j) = dhn * z * (1.0 - n * n);
              dh(b, j) = dhn * (1.0 - z);
            }
          auto dan = da.rightCols(static_cast<Eigen::Index>(H));
          drh.noalias() = dan * U.rightCols(static_cast<Eigen::Index>(H)).transpose();
          if (gU) {
            auto gUm = detail::mat(gU, H, 3 * H);
            gUm.rightCols(static_cast<Eigen::Index>(H)).noalias() +=
                detail::cmat(rh->data() + t * B * H, B, H).transpose() * dan;
          }
          // Reset gate.
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < H; ++j) {
              const double r = g[b * 3 * H + H + j];
              da(b, H + j) = drh(b, j) * hp[b * H + j] * r * (1.0 - r);
              dh(b, j) += drh(b, j) * r;
            }
          auto dzr = da.leftCols(static_cast<Eigen::Index>(2 * H));
          dh.noalias() += dzr * U.leftCols(static_cast<Eigen::Index>(2 * H)).transpose();
          if (gU) {
            auto gUm = detail::mat(gU, H, 3 * H);
            gUm.leftCols(static_cast<Eigen::Index>(2 * H)).noalias() +=
                detail::cmat(hp, B, H).transpose() * dzr;
          }
        }
        if (double* gW = grad_sink(p.w_input)) {
          detail::mat(gW, D, 3 * H).noalias() += detail::cmat(xt->data(), T * B, D).transpose() * dgates;
        }
        if (double* gb = grad_sink(p.bias)) {
          detail::mat(gb, 1, 3 * H) += dgates.colwise().sum();
        }
        if (double* gx = grad_sink(x)) {
          detail::RowMat dx = dgates * detail::cmat(p.w_input.data().data(), D, 3 * H).transpose();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < T; ++t)
              for (std::size_t k = 0; k < D; ++k)
                gx[(b * T + t) * D + k] += dx(static_cast<Eigen::Index>(t * B + b), static_cast<Eigen::Index>(k));
        }
        if (double* gh = grad_sink(h0)) {
          for (std::size_t i = 0; i < B * H; ++i) gh[i] += dh.data()[i];
        }
      });
}

}  // namespace dpatd
