#pragma once

// Differentiable binarized building blocks: time-dependent binarization (TB),
// time-dependent activation (TA), and XNOR-backed convolution / linear layers
// with straight-through gradients.

#include "hidiff/autodiff.hpp"
#include "hidiff/bitops.hpp"

namespace hidiff::bitops {

using ad::Array;
using ad::Index;
using ad::Tensor;
using ad::Var;

/// Half-width of the straight-through window around a binarization threshold.
inline constexpr double kSteWindow = 1.0;

/// Time-conditioned per-channel quantities, each [N, C] except `beta` ([C]).
template <typename Scalar>
struct TimeCond {
  Var<Scalar> alpha;  // TB threshold
  Var<Scalar> gamma;  // TA hinge shift
  Var<Scalar> zeta;   // TA output shift
  Var<Scalar> beta;   // TA slope below the hinge
};

/// +1 where u > alpha, -1 where u <= alpha, for u[N, C, ...] and alpha[N, C].
/// Backward passes the gradient where |u - alpha| <= 1 and blocks it elsewhere.
template <typename Scalar>
Var<Scalar> tb_binarize(const Var<Scalar>& u, const Var<Scalar>& alpha) {
  ad::require(u.shape().size() >= 2 && alpha.shape() == ad::Shape{u.dim(0), u.dim(1)},
              "tb_binarize: threshold " + ad::to_string(alpha.shape()) + " does not match " + ad::to_string(u.shape()));
  const Index planes = u.dim(0) * u.dim(1), inner = u.numel() / planes;
  Tensor<Scalar> out(u.shape());
  Array<Scalar> pass(u.numel());
  for (Index p = 0; p < planes; ++p) {
    const Scalar a = alpha.data()[p];
    for (Index i = p * inner; i < (p + 1) * inner; ++i) {
      const Scalar d = u.data()[i] - a;
      out.data[i] = d > Scalar(0) ? Scalar(1) : Scalar(-1);
      pass[i] = std::abs(d) <= Scalar(kSteWindow) ? Scalar(1) : Scalar(0);
    }
  }
  auto& tape = u.tape();
  return tape.record("tb_binarize", std::move(out), {u, alpha},
                     [&tape, u, alpha, pass = std::move(pass), planes, inner](const Array<Scalar>& g) {
                       const Array<Scalar> gu = g * pass;
                       tape.accumulate(u, gu);
                       if (alpha.requires_grad())
                         tape.accumulate(alpha, -Eigen::Map<const ad::ColMatrix<Scalar>>(gu.data(), inner, planes)
                                                     .colwise()
                                                     .sum()
                                                     .transpose()
                                                     .array());
                     });
}

/// Piecewise-linear activation per channel:
///   u - gamma + zeta             if u > gamma
///   beta * (u - gamma) + zeta    otherwise
/// The derivative at the hinge follows the u > gamma branch.
template <typename Scalar>
Var<Scalar> ta_activate(const Var<Scalar>& u, const Var<Scalar>& gamma, const Var<Scalar>& zeta, const Var<Scalar>& beta) {
  const ad::Shape nc{u.dim(0), u.dim(1)};
  ad::require(u.shape().size() >= 2 && gamma.shape() == nc && zeta.shape() == nc && beta.shape() == ad::Shape{u.dim(1)},
              "ta_activate: per-channel parameters do not match " + ad::to_string(u.shape()));
  const Index batch = u.dim(0), channels = u.dim(1), inner = u.numel() / (batch * channels);
  Tensor<Scalar> out(u.shape());
  for (Index p = 0; p < batch * channels; ++p) {
    const Scalar gm = gamma.data()[p], zt = zeta.data()[p], bt = beta.data()[p % channels];
    for (Index i = p * inner; i < (p + 1) * inner; ++i) {
      const Scalar d = u.data()[i] - gm;
      out.data[i] = (d > Scalar(0) ? d : bt * d) + zt;
    }
  }
  auto& tape = u.tape();
  return tape.record("ta_activate", std::move(out), {u, gamma, zeta, beta},
                     [&tape, u, gamma, zeta, beta, batch, channels, inner](const Array<Scalar>& g) {
                       Array<Scalar> gu(u.numel());
                       Array<Scalar> ggamma(batch * channels), gzeta(batch * channels);
                       Array<Scalar> gbeta = Array<Scalar>::Zero(channels);
                       for (Index p = 0; p < batch * channels; ++p) {
                         const Scalar gm = gamma.data()[p], bt = beta.data()[p % channels];
                         Scalar sg = 0, sz = 0, sb = 0;
                         for (Index i = p * inner; i < (p + 1) * inner; ++i) {
                           const Scalar d = u.data()[i] - gm;
                           const bool upper = d >= Scalar(0);
                           const Scalar slope = upper ? Scalar(1) : bt;
                           gu[i] = g[i] * slope;
                           sg -= g[i] * slope;
                           sz += g[i];
                           if (!upper)
                             sb += g[i] * d;
                         }
                         ggamma[p] = sg;
                         gzeta[p] = sz;
                         gbeta[p % channels] += sb;
                       }
                       tape.accumulate(u, gu);
                       tape.accumulate(gamma, ggamma);
                       tape.accumulate(zeta, gzeta);
                       tape.accumulate(beta, gbeta);
                     });
}

namespace detail {

/// sign(W) rows (>= 0 maps to +1) and per-row mean |W| for a weight viewed as [rows, cols].
template <typename Scalar>
void binarize_rows(const Scalar* w, Index rows, Index cols, ad::RowMatrix<Scalar>& signs, Array<Scalar>& scale) {
  Eigen::Map<const ad::RowMatrix<Scalar>> W(w, rows, cols);
  signs = (W.array() >= Scalar(0)).select(ad::RowMatrix<Scalar>::Ones(rows, cols), -ad::RowMatrix<Scalar>::Ones(rows, cols));
  scale = W.array().abs().rowwise().mean();
}

} // namespace detail

/// Convolution of a ±1 input with binarized weights, computed by XNOR-popcount.
///
/// x[N, C, H, W] must hold ±1 values (typically a tb_binarize output);
/// weight[O, C, k, k] is real and enters as sign(W) scaled per output channel
/// by mean |W|. Spatial padding is treated as -1. The weight gradient uses a
/// straight-through estimator clipped to |W| <= 1.
template <typename Scalar>
Var<Scalar> binary_conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  ad::require(x.shape().size() == 4 && weight.shape().size() == 4 && weight.dim(1) == x.dim(1) &&
                  weight.dim(2) == weight.dim(3) && weight.dim(2) % 2 == 1 && bias.shape() == ad::Shape{weight.dim(0)},
              "binary_conv2d: incompatible input " + ad::to_string(x.shape()) + " and weight " + ad::to_string(weight.shape()));
  const Index n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3), c_out = weight.dim(0), k = weight.dim(2);
  const Index hw = h * w, patch = c_in * k * k, pad = k / 2;
  ad::RowMatrix<Scalar> signs;
  Array<Scalar> scale;
  detail::binarize_rows(weight.data().data(), c_out, patch, signs, scale);
  const PackedMatrix packed_w = PackedMatrix::pack_signs(signs.data(), c_out, patch);

  Tensor<Scalar> out({n, c_out, h, w});
  std::vector<ad::RowMatrix<Scalar>> cols(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    auto& col = cols[i];
    col.resize(hw, patch);
    const Scalar* src = x.data().data() + i * c_in * hw;
    for (Index y = 0; y < h; ++y)
      for (Index xx = 0; xx < w; ++xx) {
        Scalar* row = col.row(y * w + xx).data();
        for (Index c = 0; c < c_in; ++c)
          for (Index ky = 0; ky < k; ++ky)
            for (Index kx = 0; kx < k; ++kx) {
              const Index sy = y + ky - pad, sx = xx + kx - pad;
              row[(c * k + ky) * k + kx] = (sy < 0 || sy >= h || sx < 0 || sx >= w) ? Scalar(-1) : src[c * hw + sy * w + sx];
            }
      }
    const IntMatrix dots = xnor_gemm(PackedMatrix::pack_signs(col.data(), hw, patch), packed_w);
    Eigen::Map<ad::ColMatrix<Scalar>> O(out.data.data() + i * c_out * hw, hw, c_out);
    O = (dots.cast<Scalar>().array().rowwise() * scale.transpose()).rowwise() + bias.data().transpose();
  }
  auto& tape = x.tape();
  return tape.record(
      "binary_conv2d", std::move(out), {x, weight, bias},
      [&tape, x, weight, bias, cols = std::move(cols), signs = std::move(signs), scale = std::move(scale), n, c_in, h, w, c_out, k, hw,
       patch, pad](const Array<Scalar>& g) {
        auto* gx = tape.grad_buffer(x);
        auto* gw = tape.grad_buffer(weight);
        auto* gb = tape.grad_buffer(bias);
        const ad::RowMatrix<Scalar> w_eff = signs.array().colwise() * scale; // [O, patch]
        ad::RowMatrix<Scalar> dw = ad::RowMatrix<Scalar>::Zero(c_out, patch);
        for (Index i = 0; i < n; ++i) {
          Eigen::Map<const ad::ColMatrix<Scalar>> G(g.data() + i * c_out * hw, hw, c_out);
          if (gb)
            *gb += G.colwise().sum().transpose().array();
          if (gw)
            dw.noalias() += G.transpose() * cols[i];
          if (gx) {
            const ad::RowMatrix<Scalar> dcol = G * w_eff; // [hw, patch]
            Scalar* dst = gx->data() + i * c_in * hw;
            for (Index y = 0; y < h; ++y)
              for (Index xx = 0; xx < w; ++xx)
                for (Index c = 0; c < c_in; ++c)
                  for (Index ky = 0; ky < k; ++ky)
                    for (Index kx = 0; kx < k; ++kx) {
                      const Index sy = y + ky - pad, sx = xx + kx - pad;
                      if (sy >= 0 && sy < h && sx >= 0 && sx < w)
                        dst[c * hw + sy * w + sx] += dcol(y * w + xx, (c * k + ky) * k + kx);
                    }
          }
        }
        if (gw) {
          Eigen::Map<const ad::RowMatrix<Scalar>> W(weight.data().data(), c_out, patch);
          Eigen::Map<ad::RowMatrix<Scalar>>(gw->data(), c_out, patch).array() +=
              dw.array() * (W.array().abs() <= Scalar(kSteWindow)).template cast<Scalar>();
        }
      });
}

/// x[..., K] (±1) times binarized weight[K, N]; per-output-column scale mean |W[:, j]|.
template <typename Scalar>
Var<Scalar> binary_linear(const Var<Scalar>& x, const Var<Scalar>& weight) {
  ad::require(weight.shape().size() == 2 && x.dim(-1) == weight.dim(0),
              "binary_linear: incompatible " + ad::to_string(x.shape()) + " x " + ad::to_string(weight.shape()));
  const Index k = weight.dim(0), n = weight.dim(1), m = x.numel() / k;
  const ad::RowMatrix<Scalar> wt = Eigen::Map<const ad::RowMatrix<Scalar>>(weight.data().data(), k, n).transpose();
  ad::RowMatrix<Scalar> signs;
  Array<Scalar> scale;
  detail::binarize_rows(wt.data(), n, k, signs, scale);
  const IntMatrix dots = xnor_gemm(PackedMatrix::pack_signs(x.data().data(), m, k), PackedMatrix::pack_signs(signs.data(), n, k));
  ad::Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor<Scalar> out(out_shape);
  Eigen::Map<ad::RowMatrix<Scalar>>(out.data.data(), m, n) = dots.cast<Scalar>().array().rowwise() * scale.transpose();
  auto& tape = x.tape();
  return tape.record("binary_linear", std::move(out), {x, weight},
                     [&tape, x, weight, signs = std::move(signs), scale = std::move(scale), m, k, n](const Array<Scalar>& g) {
                       Eigen::Map<const ad::RowMatrix<Scalar>> G(g.data(), m, n);
                       if (auto* gx = tape.grad_buffer(x)) {
                         const ad::RowMatrix<Scalar> w_eff = signs.array().colwise() * scale; // [N, K]
                         Eigen::Map<ad::RowMatrix<Scalar>>(gx->data(), m, k).noalias() += G * w_eff;
                       }
                       if (auto* gw = tape.grad_buffer(weight)) {
                         Eigen::Map<const ad::RowMatrix<Scalar>> X(x.data().data(), m, k);
                         Eigen::Map<const ad::RowMatrix<Scalar>> W(weight.data().data(), k, n);
                         const ad::RowMatrix<Scalar> dw = X.transpose() * G;
                         Eigen::Map<ad::RowMatrix<Scalar>>(gw->data(), k, n).array() +=
                             dw.array() * (W.array().abs() <= Scalar(kSteWindow)).template cast<Scalar>();
                       }
                     });
}

} // namespace hidiff::bitops
