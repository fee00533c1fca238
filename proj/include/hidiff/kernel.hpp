#pragma once

// Closed-form Bernoulli diffusion mathematics.
//
// Scalar helpers operate on a single pixel; the map-level functions apply
// them elementwise. All sampling draws exactly one uniform per element in
// storage order, so a given Rng state always produces the same trajectory.

#include "hidiff/maps.hpp"
#include "hidiff/rng.hpp"
#include "hidiff/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace hidiff::kernel {

// ---------------------------------------------------------------------------
// Per-pixel closed forms

/// P(y_t = 1 | y_{t-1}, prior) for a single forward transition.
template <typename Scalar>
Scalar step_prob(Scalar y_prev, Scalar prior, Scalar beta) {
  return (Scalar(1) - beta) * y_prev + beta * prior;
}

/// P(y_t = 1 | y_0, prior): interpolation between ground truth and prior.
template <typename Scalar>
Scalar marginal_prob(Scalar y0, Scalar prior, Scalar alpha_bar) {
  return alpha_bar * y0 + (Scalar(1) - alpha_bar) * prior;
}

/// P(eps = 1) for the XOR noise with y_t = y_0 xor eps.
template <typename Scalar>
Scalar noise_prob(Scalar y0, Scalar prior, Scalar alpha_bar) {
  return (Scalar(1) - alpha_bar) * std::abs(prior - y0);
}

/// Unnormalized two-channel posterior weights (value 0, value 1).
template <typename Scalar>
struct PosteriorWeights {
  Scalar like0, like1;  // first factor: likelihood of y_t given y_{t-1}
  Scalar marg0, marg1;  // second factor: marginal of y_{t-1} given y_0
  Scalar w0() const { return like0 * marg0; }
  Scalar w1() const { return like1 * marg1; }
  Scalar norm() const { return w0() + w1(); }
};

template <typename Scalar>
PosteriorWeights<Scalar> posterior_weights(Scalar yt, Scalar y0, Scalar prior, Scalar alpha, Scalar alpha_bar_prev) {
  // The scalar (1-alpha)|1 - y_t - prior| is broadcast onto both channels.
  const Scalar shared = (Scalar(1) - alpha) * std::abs(Scalar(1) - yt - prior);
  PosteriorWeights<Scalar> w;
  w.like0 = alpha * (Scalar(1) - yt) + shared;
  w.like1 = alpha * yt + shared;
  w.marg0 = alpha_bar_prev * (Scalar(1) - y0) + (Scalar(1) - alpha_bar_prev) * (Scalar(1) - prior);
  w.marg1 = alpha_bar_prev * y0 + (Scalar(1) - alpha_bar_prev) * prior;
  return w;
}

/// Value and partial derivatives of the posterior for binary y_t.
template <typename Scalar>
struct PosteriorGrad {
  Scalar value;
  Scalar d_y0;
  Scalar d_prior;
};

template <typename Scalar>
PosteriorGrad<Scalar> posterior_with_grad(Scalar yt, Scalar y0, Scalar prior, Scalar alpha, Scalar alpha_bar_prev) {
  const auto w = posterior_weights(yt, y0, prior, alpha, alpha_bar_prev);
  const Scalar d = w.norm();
  const Scalar n = w.w1();
  // d|1 - y_t - prior| / d prior with y_t in {0, 1}
  const Scalar shared_slope = (Scalar(1) - alpha) * (yt > Scalar(0.5) ? Scalar(1) : Scalar(-1));
  const Scalar marg_slope = Scalar(1) - alpha_bar_prev;
  const Scalar dn = shared_slope * w.marg1 + w.like1 * marg_slope;
  const Scalar dd = shared_slope * (w.marg0 + w.marg1) + marg_slope * (w.like1 - w.like0);
  PosteriorGrad<Scalar> g;
  g.value = n / d;
  // marg0 + marg1 == 1 for any soft y0, which collapses the quotient rule.
  g.d_y0 = alpha_bar_prev * w.like0 * w.like1 / (d * d);
  g.d_prior = (dn * d - n * dd) / (d * d);
  return g;
}

/// DDIM mean coefficients for (y_t, estimated y_0, prior).
template <typename Scalar>
struct DdimCoefficients {
  Scalar sigma;
  Scalar latent;
  Scalar estimate;
  Scalar prior;
};

template <typename Scalar>
DdimCoefficients<Scalar> ddim_coefficients(Scalar alpha_bar_prev, Scalar alpha_bar) {
  if (!(alpha_bar < Scalar(1)))
    throw std::domain_error("ddim_coefficients: alpha_bar_t == 1 leaves sigma_t undefined");
  DdimCoefficients<Scalar> c;
  c.sigma = (Scalar(1) - alpha_bar_prev) / (Scalar(1) - alpha_bar);
  c.latent = c.sigma;
  c.estimate = alpha_bar_prev - c.sigma * alpha_bar;
  c.prior = (Scalar(1) - alpha_bar_prev) - (Scalar(1) - alpha_bar) * c.sigma;
  return c;
}

// ---------------------------------------------------------------------------
// Map-level operations

class PosteriorError : public std::domain_error {
public:
  PosteriorError(Eigen::Index y, Eigen::Index x, Eigen::Index c)
      : std::domain_error("posterior_prob: zero normalizer at pixel (y=" + std::to_string(y) + ", x=" +
                          std::to_string(x) + ", c=" + std::to_string(c) + ")"),
        y(y), x(x), c(c) {}
  Eigen::Index y, x, c;
};

/// Draws an independent Bernoulli per element.
template <typename Scalar>
BinaryMask sample(const ProbMap<Scalar>& p, Rng& rng) {
  BinaryMask out(p.shape);
  for (Eigen::Index i = 0; i < p.data.size(); ++i)
    out.data[i] = rng.uniform() < static_cast<double>(p.data[i]) ? 1 : 0;
  return out;
}

template <typename Scalar>
BinaryMask forward_step(const BinaryMask& y_prev, const ProbMap<Scalar>& prior, int t, const NoiseSchedule& sched,
                        Rng& rng) {
  require_same_shape(y_prev.shape, prior.shape, "forward_step");
  const Scalar beta = static_cast<Scalar>(lookup(sched, t).beta);
  ProbMap<Scalar> p(prior.shape);
  for (Eigen::Index i = 0; i < p.data.size(); ++i)
    p.data[i] = step_prob<Scalar>(Scalar(y_prev.data[i]), prior.data[i], beta);
  return sample(p, rng);
}

template <typename Scalar>
ProbMap<Scalar> forward_marginal_prob(const BinaryMask& y0, const ProbMap<Scalar>& prior, int t,
                                      const NoiseSchedule& sched) {
  require_same_shape(y0.shape, prior.shape, "forward_marginal_prob");
  const Scalar ab = static_cast<Scalar>(sched.alpha_bar(t));
  ProbMap<Scalar> out(prior.shape);
  out.data = ab * y0.as<Scalar>() + (Scalar(1) - ab) * prior.data;
  return out;
}

struct NoiseSample {
  BinaryMask eps;
  BinaryMask latent;
};

/// eps ~ B((1 - alpha_bar_t)|prior - y0|), y_t = y0 xor eps.
template <typename Scalar>
NoiseSample sample_noise_and_latent(const BinaryMask& y0, const ProbMap<Scalar>& prior, int t,
                                    const NoiseSchedule& sched, Rng& rng) {
  require_same_shape(y0.shape, prior.shape, "sample_noise_and_latent");
  const Scalar ab = static_cast<Scalar>(lookup(sched, t).alpha_bar);
  NoiseSample s{BinaryMask(y0.shape), BinaryMask(y0.shape)};
  for (Eigen::Index i = 0; i < y0.data.size(); ++i) {
    const double p = static_cast<double>(noise_prob<Scalar>(Scalar(y0.data[i]), prior.data[i], ab));
    s.eps.data[i] = rng.uniform() < p ? 1 : 0;
    s.latent.data[i] = y0.data[i] ^ s.eps.data[i];
  }
  return s;
}

/// P(y_{t-1} = 1 | y_t, y_0, prior). `y0` may be soft.
template <typename Scalar>
ProbMap<Scalar> posterior_prob(const BinaryMask& yt, const ProbMap<Scalar>& y0, const ProbMap<Scalar>& prior, int t,
                               const NoiseSchedule& sched) {
  require_same_shape(yt.shape, y0.shape, "posterior_prob");
  require_same_shape(yt.shape, prior.shape, "posterior_prob");
  const auto terms = lookup(sched, t);
  const Scalar alpha = static_cast<Scalar>(terms.alpha);
  const Scalar abp = static_cast<Scalar>(terms.alpha_bar_prev);
  ProbMap<Scalar> out(yt.shape);
  const MapShape& s = yt.shape;
  for (Eigen::Index i = 0; i < out.data.size(); ++i) {
    const auto w = posterior_weights<Scalar>(Scalar(yt.data[i]), y0.data[i], prior.data[i], alpha, abp);
    const Scalar norm = w.norm();
    if (!(norm > Scalar(0))) {
      const Eigen::Index c = i / s.plane();
      const Eigen::Index r = i % s.plane();
      throw PosteriorError(r / s.width, r % s.width, c);
    }
    out.data[i] = w.w1() / norm;
  }
  return out;
}

template <typename Scalar>
ProbMap<Scalar> posterior_prob(const BinaryMask& yt, const BinaryMask& y0, const ProbMap<Scalar>& prior, int t,
                               const NoiseSchedule& sched) {
  return posterior_prob<Scalar>(yt, y0.to_prob<Scalar>(), prior, t, sched);
}

/// |y_t - eps_hat|: the clean-mask estimate implied by a noise estimate.
template <typename Scalar>
ProbMap<Scalar> estimate_clean(const BinaryMask& yt, const ProbMap<Scalar>& eps_hat) {
  require_same_shape(yt.shape, eps_hat.shape, "estimate_clean");
  ProbMap<Scalar> out(yt.shape);
  out.data = (yt.as<Scalar>() - eps_hat.data).abs();
  return out;
}

/// Reverse-process mean from a noise estimate.
template <typename Scalar>
ProbMap<Scalar> calibrate(const BinaryMask& yt, const ProbMap<Scalar>& eps_hat, const ProbMap<Scalar>& prior, int t,
                          const NoiseSchedule& sched) {
  if (!eps_hat.valid())
    throw std::invalid_argument("calibrate: eps_hat must lie in [0, 1]");
  return posterior_prob<Scalar>(yt, estimate_clean(yt, eps_hat), prior, t, sched);
}

template <typename Scalar>
BinaryMask ddpm_step(const BinaryMask& yt, const ProbMap<Scalar>& eps_hat, const ProbMap<Scalar>& prior, int t,
                     const NoiseSchedule& sched, Rng& rng) {
  return sample(calibrate(yt, eps_hat, prior, t, sched), rng);
}

/// Mean parameter of the DDIM reverse transition, clamped to [0, 1].
template <typename Scalar>
ProbMap<Scalar> ddim_mean(const BinaryMask& yt, const ProbMap<Scalar>& eps_hat, const ProbMap<Scalar>& prior, int t,
                          const NoiseSchedule& sched) {
  require_same_shape(yt.shape, eps_hat.shape, "ddim_mean");
  require_same_shape(yt.shape, prior.shape, "ddim_mean");
  const auto terms = lookup(sched, t);
  const auto c = ddim_coefficients<Scalar>(static_cast<Scalar>(terms.alpha_bar_prev),
                                           static_cast<Scalar>(terms.alpha_bar));
  const auto y = yt.as<Scalar>();
  ProbMap<Scalar> out(yt.shape);
  out.data = (c.latent * y + c.estimate * (y - eps_hat.data).abs() + c.prior * prior.data)
                 .max(Scalar(0))
                 .min(Scalar(1));
  return out;
}

template <typename Scalar>
BinaryMask ddim_step(const BinaryMask& yt, const ProbMap<Scalar>& eps_hat, const ProbMap<Scalar>& prior, int t,
                     const NoiseSchedule& sched, Rng& rng) {
  return sample(ddim_mean(yt, eps_hat, prior, t, sched), rng);
}

} // namespace hidiff::kernel
