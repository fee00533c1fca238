#pragma once

#include "hidiff/autodiff/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace hidiff::ad {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moment accumulators for a fixed, ordered parameter list.
template <typename Scalar>
struct OptimizerState {
  AdamWConfig config;
  std::vector<Array<Scalar>> first_moment;
  std::vector<Array<Scalar>> second_moment;
  long step = 0;
};

template <typename Scalar>
OptimizerState<Scalar> make_optimizer_state(const std::vector<Parameter<Scalar>*>& params, AdamWConfig config = {}) {
  OptimizerState<Scalar> s;
  s.config = config;
  for (const auto* p : params) {
    s.first_moment.push_back(Array<Scalar>::Zero(p->value.numel()));
    s.second_moment.push_back(Array<Scalar>::Zero(p->value.numel()));
  }
  return s;
}

/// One AdamW update with decoupled weight decay:
///   p <- p - lr*wd*p;  p <- p - lr * m_hat / (sqrt(v_hat) + eps)
/// Throws before touching anything if any gradient is non-finite.
template <typename Scalar>
void adamw_step(const std::vector<Parameter<Scalar>*>& params, OptimizerState<Scalar>& state) {
  if (params.size() != state.first_moment.size())
    throw std::invalid_argument("adamw_step: parameter list does not match optimizer state");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (p->grad.size() != p->value.numel() || state.first_moment[i].size() != p->value.numel())
      throw std::invalid_argument("adamw_step: shape mismatch for " + p->name);
    if (!p->grad.allFinite())
      throw NonFiniteError("adamw_step: non-finite gradient for " + p->name);
  }
  const auto& c = state.config;
  ++state.step;
  const Scalar lr = static_cast<Scalar>(c.lr);
  const Scalar b1 = static_cast<Scalar>(c.beta1);
  const Scalar b2 = static_cast<Scalar>(c.beta2);
  const Scalar eps = static_cast<Scalar>(c.eps);
  const Scalar decay = static_cast<Scalar>(1.0 - c.lr * c.weight_decay);
  const Scalar bc1 = static_cast<Scalar>(1.0 - std::pow(c.beta1, static_cast<double>(state.step)));
  const Scalar bc2 = static_cast<Scalar>(1.0 - std::pow(c.beta2, static_cast<double>(state.step)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = b1 * m + (Scalar(1) - b1) * p.grad;
    v = b2 * v + (Scalar(1) - b2) * p.grad.square();
    p.value.data *= decay;
    p.value.data -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
  }
}

} // namespace hidiff::ad
