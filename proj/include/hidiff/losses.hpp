#pragma once

// Training objectives. Each loss is a single differentiable node with an
// analytic backward; the map-level overloads evaluate the same node on a
// throwaway tape.

#include "hidiff/autodiff.hpp"
#include "hidiff/maps.hpp"

#include <cmath>
#include <stdexcept>

namespace hidiff::losses {

using ad::Array;
using ad::Index;
using ad::Tensor;
using ad::Var;

/// Guard applied to probabilities inside logarithms.
inline constexpr double kProbEps = 1e-7;

struct LossWeights {
  double lambda_dice = 1.0;
  double lambda_focal = 1.0;
  double lambda_diff = 1.0;
  double gamma = 2.0;

  void validate() const {
    for (double v : {lambda_dice, lambda_focal, lambda_diff, gamma})
      if (!std::isfinite(v) || v < 0.0)
        throw std::invalid_argument("LossWeights: weights and gamma must be finite and non-negative");
  }
};

namespace detail {

template <typename Scalar>
Array<Scalar> clamp_prob(const Array<Scalar>& p) {
  return p.max(Scalar(kProbEps)).min(Scalar(1.0 - kProbEps));
}

template <typename Scalar>
Array<Scalar> inside(const Array<Scalar>& p) {
  return ((p > Scalar(kProbEps)) && (p < Scalar(1.0 - kProbEps))).template cast<Scalar>();
}

inline void same_shape(const ad::Shape& a, const ad::Shape& b, const char* op) {
  ad::require(a == b, std::string(op) + ": shape mismatch " + ad::to_string(a) + " vs " + ad::to_string(b));
}

/// [H, W, C] planar map as a single NCHW sample.
inline ad::Shape nchw(const MapShape& s) { return {1, s.channels, s.height, s.width}; }

} // namespace detail

/// Mean elementwise KL(Bernoulli(p) || Bernoulli(q)), both clamped to [eps, 1-eps].
template <typename Scalar>
Var<Scalar> bernoulli_kl(const Var<Scalar>& p_true, const Var<Scalar>& p_model) {
  detail::same_shape(p_true.shape(), p_model.shape(), "bernoulli_kl");
  const Array<Scalar> p = detail::clamp_prob(p_true.data());
  const Array<Scalar> q = detail::clamp_prob(p_model.data());
  const Index n = p.size();
  const Array<Scalar> terms = p * (p / q).log() + (Scalar(1) - p) * ((Scalar(1) - p) / (Scalar(1) - q)).log();
  auto& tape = p_true.tape();
  return tape.record("bernoulli_kl", Tensor<Scalar>({}, Array<Scalar>::Constant(1, terms.mean())), {p_true, p_model},
                     [&tape, p_true, p_model, p, q, n](const Array<Scalar>& g) {
                       const Scalar s = g[0] / static_cast<Scalar>(n);
                       if (p_true.requires_grad())
                         tape.accumulate(p_true, s * detail::inside(p_true.data()) *
                                                     ((p / q).log() - ((Scalar(1) - p) / (Scalar(1) - q)).log()));
                       if (p_model.requires_grad())
                         tape.accumulate(p_model, s * detail::inside(p_model.data()) * (q - p) / (q * (Scalar(1) - q)));
                     });
}

/// Mean focal loss between target noise and its estimate; gamma = 0 gives BCE.
template <typename Scalar>
Var<Scalar> focal_loss(const Var<Scalar>& target, const Var<Scalar>& estimate, double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma))
    throw std::invalid_argument("focal_loss: gamma must be finite and non-negative");
  detail::same_shape(target.shape(), estimate.shape(), "focal_loss");
  const Scalar gm = static_cast<Scalar>(gamma);
  const Array<Scalar>& e = target.data();
  const Array<Scalar> x = detail::clamp_prob(estimate.data());
  const Index n = x.size();
  const Array<Scalar> one_minus = Scalar(1) - x;
  const Array<Scalar> w_pos = one_minus.pow(gm);  // (1 - e_hat)^gamma
  const Array<Scalar> w_neg = x.pow(gm);          // e_hat^gamma
  const Array<Scalar> terms = -(e * w_pos * x.log() + (Scalar(1) - e) * w_neg * one_minus.log());
  auto& tape = target.tape();
  return tape.record(
      "focal_loss", Tensor<Scalar>({}, Array<Scalar>::Constant(1, terms.mean())), {target, estimate},
      [&tape, estimate, e, x, one_minus, w_pos, w_neg, gm, n](const Array<Scalar>& g) {
        if (!estimate.requires_grad())
          return;
        Array<Scalar> d_pos = -w_pos / x;       // d/dx of -(1-x)^g ln x, g = 0 part
        Array<Scalar> d_neg = w_neg / one_minus; // d/dx of -x^g ln(1-x), g = 0 part
        if (gm != Scalar(0)) {
          d_pos += gm * one_minus.pow(gm - Scalar(1)) * x.log();
          d_neg -= gm * x.pow(gm - Scalar(1)) * one_minus.log();
        }
        const Scalar s = g[0] / static_cast<Scalar>(n);
        tape.accumulate(estimate, s * detail::inside(estimate.data()) * (e * d_pos + (Scalar(1) - e) * d_neg));
      });
}

/// Pixel-wise multi-class cross-entropy on [N, K, ...] class probabilities,
/// summed over classes and averaged over the N*H*W pixels.
template <typename Scalar>
Var<Scalar> ce_loss(const Var<Scalar>& target, const Var<Scalar>& probs) {
  detail::same_shape(target.shape(), probs.shape(), "ce_loss");
  ad::require(probs.shape().size() >= 2, "ce_loss: need [N, K, ...] probabilities");
  const Index pixels = probs.numel() / probs.dim(1);
  const Array<Scalar> p = detail::clamp_prob(probs.data());
  const Scalar value = -(target.data() * p.log()).sum() / static_cast<Scalar>(pixels);
  auto& tape = target.tape();
  return tape.record("ce_loss", Tensor<Scalar>({}, Array<Scalar>::Constant(1, value)), {target, probs},
                     [&tape, target, probs, p, pixels](const Array<Scalar>& g) {
                       if (probs.requires_grad())
                         tape.accumulate(probs, -g[0] / static_cast<Scalar>(pixels) * detail::inside(probs.data()) *
                                                    target.data() / p);
                     });
}

/// 1 - mean over channels of soft Dice on [N, K, ...]; sums run over batch and pixels.
template <typename Scalar>
Var<Scalar> dice_loss(const Var<Scalar>& target, const Var<Scalar>& probs, double smooth = 1.0) {
  detail::same_shape(target.shape(), probs.shape(), "dice_loss");
  ad::require(probs.shape().size() >= 2, "dice_loss: need [N, K, ...] probabilities");
  const Index batch = probs.dim(0), k = probs.dim(1), inner = probs.numel() / (batch * k);
  const Scalar sm = static_cast<Scalar>(smooth);
  Array<Scalar> inter = Array<Scalar>::Zero(k), denom = Array<Scalar>::Constant(k, sm);
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < k; ++c) {
      const Index off = (b * k + c) * inner;
      inter[c] += (target.data().segment(off, inner) * probs.data().segment(off, inner)).sum();
      denom[c] += target.data().segment(off, inner).sum() + probs.data().segment(off, inner).sum();
    }
  const Array<Scalar> numer = Scalar(2) * inter + sm;
  const Scalar value = Scalar(1) - (numer / denom).mean();
  auto& tape = target.tape();
  return tape.record("dice_loss", Tensor<Scalar>({}, Array<Scalar>::Constant(1, value)), {target, probs},
                     [&tape, target, probs, numer, denom, batch, k, inner](const Array<Scalar>& g) {
                       auto* gp = tape.grad_buffer(probs);
                       if (!gp)
                         return;
                       const Scalar s = -g[0] / static_cast<Scalar>(k);
                       for (Index b = 0; b < batch; ++b)
                         for (Index c = 0; c < k; ++c) {
                           const Index off = (b * k + c) * inner;
                           // d(numer/denom)/dp = (2 y denom - numer) / denom^2
                           gp->segment(off, inner) +=
                               s * (Scalar(2) * target.data().segment(off, inner) * denom[c] - numer[c]) / (denom[c] * denom[c]);
                         }
                     });
}

/// L_Disc = CE + lambda_dice * Dice.
template <typename Scalar>
Var<Scalar> discriminative_loss(const Var<Scalar>& target, const Var<Scalar>& probs, const LossWeights& w) {
  return ad::add(ce_loss(target, probs), ad::scale(dice_loss(target, probs), static_cast<Scalar>(w.lambda_dice)));
}

/// L_Diff = L_KL + lambda_focal * L_Focal.
template <typename Scalar>
Var<Scalar> diffusion_loss(const Var<Scalar>& kl, const Var<Scalar>& focal, const LossWeights& w) {
  return ad::add(kl, ad::scale(focal, static_cast<Scalar>(w.lambda_focal)));
}

/// L_Hybrid = L_Disc + lambda_diff * L_Diff.
template <typename Scalar>
Var<Scalar> hybrid_loss(const Var<Scalar>& disc, const Var<Scalar>& diff, const LossWeights& w) {
  return ad::add(disc, ad::scale(diff, static_cast<Scalar>(w.lambda_diff)));
}

inline double diffusion_loss(double kl, double focal, const LossWeights& w) { return kl + w.lambda_focal * focal; }
inline double hybrid_loss(double disc, double diff, const LossWeights& w) { return disc + w.lambda_diff * diff; }

// ---------------------------------------------------------------------------
// Map-level evaluation

template <typename Scalar>
double bernoulli_kl(const ProbMap<Scalar>& p_true, const ProbMap<Scalar>& p_model) {
  require_same_shape(p_true.shape, p_model.shape, "bernoulli_kl");
  ad::Tape<Scalar> tape;
  return static_cast<double>(bernoulli_kl(tape.constant({detail::nchw(p_true.shape), p_true.data}),
                                          tape.constant({detail::nchw(p_model.shape), p_model.data}))
                                 .item());
}

template <typename Scalar>
double focal_loss(const BinaryMask& eps_true, const ProbMap<Scalar>& eps_hat, double gamma) {
  require_same_shape(eps_true.shape, eps_hat.shape, "focal_loss");
  ad::Tape<Scalar> tape;
  return static_cast<double>(focal_loss(tape.constant({detail::nchw(eps_true.shape), eps_true.as<Scalar>()}),
                                        tape.constant({detail::nchw(eps_hat.shape), eps_hat.data}), gamma)
                                 .item());
}

template <typename Scalar>
double ce_loss(const BinaryMask& y0, const ProbMap<Scalar>& pred) {
  require_same_shape(y0.shape, pred.shape, "ce_loss");
  ad::Tape<Scalar> tape;
  return static_cast<double>(ce_loss(tape.constant({detail::nchw(y0.shape), y0.as<Scalar>()}),
                                     tape.constant({detail::nchw(pred.shape), pred.data}))
                                 .item());
}

template <typename Scalar>
double dice_loss(const BinaryMask& y0, const ProbMap<Scalar>& pred, double smooth = 1.0) {
  require_same_shape(y0.shape, pred.shape, "dice_loss");
  ad::Tape<Scalar> tape;
  return static_cast<double>(dice_loss(tape.constant({detail::nchw(y0.shape), y0.as<Scalar>()}),
                                       tape.constant({detail::nchw(pred.shape), pred.data}), smooth)
                                 .item());
}

} // namespace hidiff::losses
