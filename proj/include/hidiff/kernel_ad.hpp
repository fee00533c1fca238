#pragma once

// Differentiable batched forms of the Bernoulli posterior, used by the
// training objectives. Tensors are [N, ...] with one diffusion step per
// sample, so the per-step scalars are given per batch element.

#include "hidiff/autodiff.hpp"
#include "hidiff/kernel.hpp"

#include <vector>

namespace hidiff::kernel {

/// Per-sample scalars for the posterior.
struct BatchSteps {
  std::vector<double> alpha;
  std::vector<double> alpha_bar_prev;
};

/// |y_t - e| for binary y_t, written as y_t + e - 2 y_t e.
template <typename Scalar>
ad::Var<Scalar> soft_xor(const ad::Var<Scalar>& latent, const ad::Var<Scalar>& e) {
  ad::require(latent.shape() == e.shape(), "soft_xor: shape mismatch");
  const ad::Array<Scalar>& y = latent.data();
  auto& tape = e.tape();
  return tape.record("soft_xor", ad::Tensor<Scalar>(e.shape(), y + e.data() - Scalar(2) * y * e.data()), {latent, e},
                     [&tape, e, y](const ad::Array<Scalar>& g) { tape.accumulate(e, g * (Scalar(1) - Scalar(2) * y)); });
}

/// P(y_{t-1} = 1 | y_t, y0, prior) elementwise over [N, ...]; gradients flow
/// to the (soft) clean estimate and to the prior, not to the binary latent.
template <typename Scalar>
ad::Var<Scalar> posterior(const ad::Var<Scalar>& latent, const ad::Var<Scalar>& clean, const ad::Var<Scalar>& prior,
                          const BatchSteps& steps) {
  ad::require(latent.shape() == clean.shape() && latent.shape() == prior.shape(), "posterior: shape mismatch");
  const ad::Index batch = latent.dim(0), per = latent.numel() / batch;
  ad::require(static_cast<ad::Index>(steps.alpha.size()) == batch &&
                  static_cast<ad::Index>(steps.alpha_bar_prev.size()) == batch,
              "posterior: need one step per batch element");
  ad::Tensor<Scalar> out(latent.shape());
  ad::Array<Scalar> d_clean(latent.numel()), d_prior(latent.numel());
  for (ad::Index b = 0; b < batch; ++b) {
    const Scalar alpha = static_cast<Scalar>(steps.alpha[b]);
    const Scalar abp = static_cast<Scalar>(steps.alpha_bar_prev[b]);
    for (ad::Index j = b * per; j < (b + 1) * per; ++j) {
      const auto r = posterior_with_grad<Scalar>(latent.data()[j], clean.data()[j], prior.data()[j], alpha, abp);
      out.data[j] = r.value;
      d_clean[j] = r.d_y0;
      d_prior[j] = r.d_prior;
    }
  }
  auto& tape = latent.tape();
  return tape.record("posterior", std::move(out), {latent, clean, prior},
                     [&tape, clean, prior, d_clean = std::move(d_clean), d_prior = std::move(d_prior)](const ad::Array<Scalar>& g) {
                       tape.accumulate(clean, g * d_clean);
                       tape.accumulate(prior, g * d_prior);
                     });
}

} // namespace hidiff::kernel
