#include "hidiff/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace hidiff {

NoiseSchedule NoiseSchedule::from_alpha_bar(Eigen::ArrayXd alpha_bar, double offset) {
  if (alpha_bar.size() < 2)
    throw std::invalid_argument("NoiseSchedule: need at least one step");
  if (alpha_bar[0] != 1.0)
    throw std::invalid_argument("NoiseSchedule: alpha_bar[0] must be exactly 1");
  const Eigen::Index T = alpha_bar.size() - 1;
  for (Eigen::Index t = 1; t <= T; ++t) {
    if (!(alpha_bar[t] >= kAlphaBarFloor && alpha_bar[t] <= 1.0))
      throw std::invalid_argument("NoiseSchedule: alpha_bar out of range at t=" + std::to_string(t));
    if (!(alpha_bar[t] < alpha_bar[t - 1]))
      throw std::invalid_argument("NoiseSchedule: alpha_bar not strictly decreasing at t=" + std::to_string(t));
  }
  NoiseSchedule s;
  s.offset_ = offset;
  s.alpha_ = alpha_bar.tail(T) / alpha_bar.head(T);
  s.beta_ = 1.0 - s.alpha_;
  s.alpha_bar_ = std::move(alpha_bar);
  return s;
}

void NoiseSchedule::check_step(int t, int lo) const {
  if (t < lo || t > steps())
    throw std::out_of_range("NoiseSchedule: step " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                            std::to_string(steps()) + "]");
}

double NoiseSchedule::alpha_bar(int t) const {
  check_step(t, 0);
  return alpha_bar_[t];
}

double NoiseSchedule::alpha(int t) const {
  check_step(t, 1);
  return alpha_[t - 1];
}

double NoiseSchedule::beta(int t) const {
  check_step(t, 1);
  return beta_[t - 1];
}

NoiseSchedule cosine_schedule(int steps, double offset) {
  if (steps < 1)
    throw std::invalid_argument("cosine_schedule: step count must be positive");
  if (!(offset > 0.0))
    throw std::invalid_argument("cosine_schedule: offset must be positive");
  const double half_pi = std::numbers::pi / 2.0;
  const double c0 = std::cos(offset / (1.0 + offset) * half_pi);
  Eigen::ArrayXd alpha_bar(steps + 1);
  alpha_bar[0] = 1.0;
  for (int t = 1; t <= steps; ++t) {
    const double c = std::cos((static_cast<double>(t) / steps + offset) / (1.0 + offset) * half_pi);
    alpha_bar[t] = std::clamp(c * c / (c0 * c0), kAlphaBarFloor, 1.0);
  }
  return NoiseSchedule::from_alpha_bar(std::move(alpha_bar), offset);
}

StepTerms lookup(const NoiseSchedule& schedule, int t) {
  if (t < 1 || t > schedule.steps())
    throw std::out_of_range("lookup: step " + std::to_string(t) + " outside [1, " + std::to_string(schedule.steps()) +
                            "]");
  return {schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t), schedule.alpha_bar(t - 1)};
}

RespacedSchedule respace(const NoiseSchedule& schedule, int steps) {
  const int T = schedule.steps();
  if (steps < 1 || steps > T)
    throw std::invalid_argument("respace: steps must lie in [1, " + std::to_string(T) + "]");
  RespacedSchedule out;
  if (steps == T) {
    out.schedule = schedule;
    out.timesteps.resize(T);
    for (int t = 1; t <= T; ++t)
      out.timesteps[t - 1] = t;
    return out;
  }
  Eigen::ArrayXd alpha_bar(steps + 1);
  alpha_bar[0] = 1.0;
  for (int i = 1; i <= steps; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(i) * T / steps));
    out.timesteps.push_back(t);
    alpha_bar[i] = schedule.alpha_bar(t);
  }
  out.schedule = NoiseSchedule::from_alpha_bar(std::move(alpha_bar), schedule.offset());
  return out;
}

} // namespace hidiff
