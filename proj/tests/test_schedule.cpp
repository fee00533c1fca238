#include "hidiff/schedule.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace hidiff;

namespace {

// Direct evaluation of the cosine formula, no clamping.
double cosine_alpha_bar(int t, int T, double s) {
  const double f = std::cos((static_cast<double>(t) / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
  const double f0 = std::cos(s / (1.0 + s) * std::numbers::pi / 2.0);
  return (f * f) / (f0 * f0);
}

} // namespace

TEST_CASE("cosine schedule endpoints and midpoint") {
  const auto s = cosine_schedule(10, 0.008);
  CHECK(s.steps() == 10);
  CHECK(s.alpha_bar(0) == 1.0);
  CHECK(s.alpha_bar(10) == kAlphaBarFloor);
  CHECK(s.alpha_bar(5) == doctest::Approx(cosine_alpha_bar(5, 10, 0.008)).epsilon(1e-14));
  // Spot value so that a broken oracle and implementation cannot agree silently.
  CHECK(s.alpha_bar(5) == doctest::Approx(0.49384359044063775).epsilon(1e-12));
}

TEST_CASE("schedule invariants across step counts") {
  for (int T : {1, 2, 3, 10, 50, 1000}) {
    const auto s = cosine_schedule(T, 0.008);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
      const auto terms = lookup(s, t);
      CHECK(terms.beta >= 0.0);
      CHECK(terms.beta <= 1.0);
      CHECK(terms.alpha_bar < terms.alpha_bar_prev);
      CHECK(std::abs(terms.alpha * terms.alpha_bar_prev - terms.alpha_bar) <= 1e-12);
      prod *= terms.alpha;
      CHECK(std::abs(prod - s.alpha_bar(t)) <= 1e-10);
      CHECK(s.alpha_bar(t) >= kAlphaBarFloor);
    }
  }
}

TEST_CASE("lookup") {
  const auto s = cosine_schedule(10);
  CHECK(lookup(s, 1).alpha_bar_prev == 1.0);
  CHECK(lookup(s, 10).alpha_bar == kAlphaBarFloor);
  CHECK_THROWS_AS(lookup(s, 11), std::out_of_range);
  CHECK_THROWS_AS(lookup(s, 0), std::out_of_range);
}

TEST_CASE("construction errors") {
  CHECK_THROWS_AS(cosine_schedule(0), std::invalid_argument);
  CHECK_THROWS_AS(cosine_schedule(10, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(cosine_schedule(10, -0.1), std::invalid_argument);
  Eigen::ArrayXd bad(3);
  bad << 1.0, 0.5, 0.5;
  CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar(bad), std::invalid_argument);
  bad << 0.9, 0.5, 0.2;
  CHECK_THROWS_AS(NoiseSchedule::from_alpha_bar(bad), std::invalid_argument);
}

TEST_CASE("respacing") {
  const auto s = cosine_schedule(10);
  const auto same = respace(s, 10);
  CHECK(same.schedule.alpha_bar_table().isApprox(s.alpha_bar_table(), 0.0));
  CHECK(same.timesteps.front() == 1);
  CHECK(same.timesteps.back() == 10);

  const auto half = respace(s, 5);
  REQUIRE(half.timesteps == std::vector<int>{2, 4, 6, 8, 10});
  for (int i = 1; i <= 5; ++i)
    CHECK(half.schedule.alpha_bar(i) == s.alpha_bar(half.timesteps[i - 1]));
  CHECK(half.schedule.alpha(1) == doctest::Approx(s.alpha_bar(2)));
  CHECK(half.schedule.alpha(2) == doctest::Approx(s.alpha_bar(4) / s.alpha_bar(2)));

  CHECK_THROWS(respace(s, 0));
  CHECK_THROWS(respace(s, 11));
}
