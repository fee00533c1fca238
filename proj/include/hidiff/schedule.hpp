#pragma once

#include <Eigen/Core>

#include <stdexcept>
#include <vector>

namespace hidiff {

/// Lower bound applied to every cumulative keep-probability.
inline constexpr double kAlphaBarFloor = 1e-9;

/// Diffusion noise schedule over steps t = 1..T.
///
/// `alpha_bar` has T+1 entries with alpha_bar[0] == 1, so quantities that
/// reference t-1 need no special case at t = 1. `alpha` and `beta` are stored
/// 0-based (entry t-1 holds step t); use the accessors.
class NoiseSchedule {
public:
  NoiseSchedule() = default;

  /// Builds a schedule from cumulative products. Validates all invariants.
  static NoiseSchedule from_alpha_bar(Eigen::ArrayXd alpha_bar, double offset = 0.0);

  int steps() const { return static_cast<int>(alpha_.size()); }
  double offset() const { return offset_; }

  double alpha_bar(int t) const;
  double alpha(int t) const;
  double beta(int t) const;

  const Eigen::ArrayXd& alpha_bar_table() const { return alpha_bar_; }
  const Eigen::ArrayXd& alpha_table() const { return alpha_; }
  const Eigen::ArrayXd& beta_table() const { return beta_; }

private:
  void check_step(int t, int lo) const;

  Eigen::ArrayXd alpha_bar_;
  Eigen::ArrayXd alpha_;
  Eigen::ArrayXd beta_;
  double offset_ = 0.0;
};

struct StepTerms {
  double beta;
  double alpha;
  double alpha_bar;
  double alpha_bar_prev;
};

/// Cosine schedule: alpha_bar(t) = cos²(((t/T + s)/(1 + s))·π/2) / cos²((s/(1 + s))·π/2),
/// clamped to [kAlphaBarFloor, 1].
NoiseSchedule cosine_schedule(int steps, double offset = 0.008);

/// The four per-step scalars for 1 <= t <= T.
StepTerms lookup(const NoiseSchedule& schedule, int t);

/// A schedule restricted to an evenly spaced subsequence of steps.
///
/// `schedule` has `timesteps.size()` steps; its step i corresponds to the
/// original step `timesteps[i-1]`, and its alpha_bar entries are the original
/// alpha_bar values at those steps.
struct RespacedSchedule {
  NoiseSchedule schedule;
  std::vector<int> timesteps;
};

/// Selects `steps` evenly spaced original steps (always including T).
/// `steps == T` returns the schedule unchanged with the identity step map.
RespacedSchedule respace(const NoiseSchedule& schedule, int steps);

} // namespace hidiff
