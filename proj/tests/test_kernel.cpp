#include "hidiff/kernel.hpp"
#include "hidiff/kernel_ad.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>

using namespace hidiff;

namespace {

NoiseSchedule schedule_from(std::initializer_list<double> abar) {
  Eigen::ArrayXd a(static_cast<Eigen::Index>(abar.size()));
  Eigen::Index i = 0;
  for (double v : abar)
    a[i++] = v;
  return NoiseSchedule::from_alpha_bar(a);
}

double frequency(const BinaryMask& m) { return static_cast<double>(m.count()) / static_cast<double>(m.data.size()); }

double three_sigma(double p, double n) { return 3.0 * std::sqrt(p * (1.0 - p) / n); }

} // namespace

TEST_CASE("per-pixel closed forms") {
  // forward kernel
  CHECK(kernel::step_prob(1.0, 0.3, 0.0) == 1.0);
  CHECK(kernel::step_prob(0.0, 0.3, 0.0) == 0.0);
  CHECK(kernel::step_prob(0.0, 1.0, 1.0) == 1.0);
  CHECK(kernel::step_prob(1.0, 0.3, 0.5) == doctest::Approx(0.65));
  // marginal
  CHECK(kernel::marginal_prob(1.0, 0.3, 1.0) == 1.0);
  CHECK(kernel::marginal_prob(1.0, 0.3, 0.0) == doctest::Approx(0.3));
  CHECK(kernel::marginal_prob(1.0, 0.3, 0.5) == doctest::Approx(0.65));
  // XOR noise
  CHECK(kernel::noise_prob(1.0, 0.3, 1.0) == 0.0);
  CHECK(kernel::noise_prob(0.0, 0.6, 0.5) == doctest::Approx(0.3));
}

TEST_CASE("XOR reparameterization matches the marginal analytically") {
  for (int y0 = 0; y0 <= 1; ++y0)
    for (double f = 0.0; f <= 1.0; f += 0.05)
      for (double ab = 0.0; ab <= 1.0; ab += 0.05) {
        const double pe = kernel::noise_prob<double>(y0, f, ab);
        const double p_latent_one = y0 == 1 ? 1.0 - pe : pe;
        CHECK(std::abs(p_latent_one - kernel::marginal_prob<double>(y0, f, ab)) <= 1e-15);
      }
}

TEST_CASE("map-level forward operations") {
  const MapShape shape{2, 3, 1};
  BinaryMask y(shape);
  y.data << 1, 0, 1, 1, 0, 0;
  ProbMap<double> prior(shape, 0.3);
  const auto sched = cosine_schedule(10);

  SUBCASE("marginal at t=0 is the clean mask") {
    const auto m = kernel::forward_marginal_prob(y, prior, 0, sched);
    CHECK((m.data == y.as<double>()).all());
  }
  SUBCASE("shape mismatch") {
    ProbMap<double> wrong(MapShape{3, 2, 1}, 0.3);
    Rng rng(1);
    CHECK_THROWS_AS(kernel::forward_step(y, wrong, 1, sched, rng), ShapeError);
    CHECK_THROWS_AS(kernel::forward_marginal_prob(y, wrong, 1, sched), ShapeError);
    CHECK_THROWS_AS(kernel::sample_noise_and_latent(y, wrong, 1, sched, rng), ShapeError);
  }
  SUBCASE("latent is y0 xor eps") {
    Rng rng(3);
    const auto s = kernel::sample_noise_and_latent(y, prior, 7, sched, rng);
    CHECK(((y.data != s.eps.data) == (s.latent.data == std::uint8_t(1))).all());
  }
  SUBCASE("step out of range") {
    Rng rng(1);
    CHECK_THROWS(kernel::forward_step(y, prior, 11, sched, rng));
    CHECK_THROWS(kernel::sample_noise_and_latent(y, prior, 0, sched, rng));
  }
}

TEST_CASE("XOR reparameterization Monte Carlo") {
  const auto sched = schedule_from({1.0, 0.5});
  const MapShape shape{100, 1000, 1};
  const BinaryMask y0(shape, 1);
  const ProbMap<double> prior(shape, 0.3);
  Rng rng(2024);
  const auto s = kernel::sample_noise_and_latent(y0, prior, 1, sched, rng);
  CHECK(std::abs(frequency(s.latent) - 0.65) <= 0.005);
  CHECK(std::abs(frequency(s.eps) - 0.35) <= 0.005);
}

TEST_CASE("iterated forward steps reproduce the closed-form marginal") {
  const auto sched = cosine_schedule(10);
  const MapShape shape{4, 4, 1};
  BinaryMask y0(shape);
  ProbMap<double> prior(shape);
  for (Eigen::Index i = 0; i < shape.size(); ++i) {
    y0.data[i] = i % 3 == 0 ? 1 : 0;
    prior.data[i] = 0.05 + 0.06 * static_cast<double>(i);
  }
  const int trials = 20000;
  Eigen::ArrayXd hits = Eigen::ArrayXd::Zero(shape.size());
  Rng rng(11);
  for (int n = 0; n < trials; ++n) {
    BinaryMask y = y0;
    for (int t = 1; t <= 5; ++t)
      y = kernel::forward_step(y, prior, t, sched, rng);
    hits += y.as<double>();
  }
  const auto expected = kernel::forward_marginal_prob(y0, prior, 5, sched);
  for (Eigen::Index i = 0; i < shape.size(); ++i) {
    const double p = expected.data[i];
    CHECK(std::abs(hits[i] / trials - p) <= three_sigma(p, trials));
  }
}

TEST_CASE("posterior matches the Bayes oracle") {
  const auto sched = schedule_from({1.0, 0.8, 0.72});  // alpha_2 = 0.9, alpha_bar_1 = 0.8
  const MapShape shape{1, 1, 1};
  BinaryMask yt(shape, 1);
  BinaryMask y0(shape, 0);
  ProbMap<double> prior(shape, 0.6);
  const auto post = kernel::posterior_prob(yt, y0, prior, 2, sched);
  CHECK(post.data[0] == doctest::Approx(0.1152 / 0.1680).epsilon(1e-12));
  CHECK(oracle::bayes_posterior(1, 0.0, 0.6, 0.9, 0.8) == doctest::Approx(0.1152 / 0.1680).epsilon(1e-12));

  Rng rng(99);
  for (int i = 0; i < 10000; ++i) {
    const int y_t = rng.bernoulli(0.5) ? 1 : 0;
    const double clean = i % 2 == 0 ? static_cast<double>(rng.bernoulli(0.5)) : rng.uniform();
    const double f = rng.uniform(1e-3, 1.0 - 1e-3);
    const double alpha = rng.uniform(0.01, 0.999);
    const double abp = rng.uniform(0.01, 1.0);
    const double got = kernel::posterior_weights<double>(y_t, clean, f, alpha, abp).w1() /
                       kernel::posterior_weights<double>(y_t, clean, f, alpha, abp).norm();
    REQUIRE(std::abs(got - oracle::bayes_posterior(y_t, clean, f, alpha, abp)) <= 1e-9);
  }
}

TEST_CASE("posterior edge cases") {
  const auto sched = cosine_schedule(10);
  const MapShape shape{2, 2, 1};
  BinaryMask yt(shape);
  yt.data << 1, 0, 1, 0;
  BinaryMask y0(shape);
  y0.data << 0, 1, 1, 0;
  ProbMap<double> prior(shape, 0.4);

  SUBCASE("alpha_bar_{t-1} = 1 gives back y0") {
    const auto post = kernel::posterior_prob(yt, y0, prior, 1, sched);
    for (Eigen::Index i = 0; i < 4; ++i)
      CHECK(post.data[i] == doctest::Approx(static_cast<double>(y0.data[i])).epsilon(1e-12));
  }
  SUBCASE("zero normalizer reports its pixel") {
    // prior = 1 at (1, 1) with y_t = 0 and y0 = 1 makes both channels vanish.
    BinaryMask y0b = y0;
    y0b(1, 1) = 1;
    ProbMap<double> p = prior;
    p(1, 1) = 1.0;
    try {
      (void)kernel::posterior_prob(yt, y0b, p, 3, sched);
      FAIL("expected PosteriorError");
    } catch (const kernel::PosteriorError& e) {
      CHECK(e.y == 1);
      CHECK(e.x == 1);
      CHECK(e.c == 0);
    }
  }
  SUBCASE("shape mismatch") {
    ProbMap<double> wrong(MapShape{1, 4, 1}, 0.4);
    CHECK_THROWS_AS(kernel::posterior_prob(yt, y0, wrong, 2, sched), ShapeError);
  }
}

TEST_CASE("calibration") {
  const auto sched = schedule_from({1.0, 0.8, 0.72});
  const MapShape shape{1, 2, 1};
  BinaryMask yt(shape, 1);
  ProbMap<double> prior(shape, 0.6);

  SUBCASE("zero noise estimate keeps y_t as the clean estimate") {
    const ProbMap<double> zero(shape, 0.0);
    CHECK((kernel::estimate_clean(yt, zero).data == 1.0).all());
    const auto mu = kernel::calibrate(yt, zero, prior, 2, sched);
    CHECK(mu.data[0] == doctest::Approx(oracle::bayes_posterior(1, 1.0, 0.6, 0.9, 0.8)));
  }
  SUBCASE("full noise estimate on ones gives zero") {
    const ProbMap<double> ones(shape, 1.0);
    CHECK((kernel::estimate_clean(yt, ones).data == 0.0).all());
  }
  SUBCASE("soft estimate equals the posterior at |y_t - eps_hat|") {
    const ProbMap<double> e(shape, 0.4);
    const auto mu = kernel::calibrate(yt, e, prior, 2, sched);
    CHECK(mu.data[0] == doctest::Approx(oracle::bayes_posterior(1, 0.6, 0.6, 0.9, 0.8)).epsilon(1e-12));
    const auto direct = kernel::posterior_prob(yt, ProbMap<double>(shape, 0.6), prior, 2, sched);
    CHECK(mu.data[0] == direct.data[0]);
  }
  SUBCASE("eps_hat outside [0, 1] rejected") {
    CHECK_THROWS(kernel::calibrate(yt, ProbMap<double>(shape, 1.5), prior, 2, sched));
  }
}

TEST_CASE("DDPM step") {
  const auto sched = schedule_from({1.0, 0.8, 0.72});
  Rng rng(5);
  SUBCASE("deterministic endpoints") {
    const MapShape shape{1, 2, 1};
    BinaryMask yt(shape);
    yt.data << 1, 0;
    // With y0 estimate 1 at alpha_bar_{t-1} = 1 the mean is exactly the estimate.
    const ProbMap<double> eps(shape, 0.0);
    const auto step1 = kernel::ddpm_step(yt, eps, ProbMap<double>(shape, 0.5), 1, sched, rng);
    CHECK(step1.data[0] == 1);
    CHECK(step1.data[1] == 0);
  }
  SUBCASE("Monte Carlo mean") {
    const MapShape shape{100, 1000, 1};
    const BinaryMask yt(shape, 1);
    const ProbMap<double> eps(shape, 1.0);  // clean estimate 0
    const ProbMap<double> prior(shape, 0.6);
    const auto mu = kernel::calibrate(yt, eps, prior, 2, sched);
    CHECK(mu.data[0] == doctest::Approx(0.6857142857142856).epsilon(1e-12));
    const auto y = kernel::ddpm_step(yt, eps, prior, 2, sched, rng);
    CHECK(std::abs(frequency(y) - 0.6857142857142856) <= 0.005);
  }
}

TEST_CASE("DDIM coefficients and mean") {
  const auto c = kernel::ddim_coefficients(0.8, 0.5);
  CHECK(c.sigma == doctest::Approx(0.4));
  CHECK(c.latent == doctest::Approx(0.4));
  CHECK(c.estimate == doctest::Approx(0.6));
  CHECK(std::abs(c.prior) <= 1e-15);
  CHECK(c.latent + c.estimate + c.prior == doctest::Approx(1.0));
  CHECK_THROWS_AS(kernel::ddim_coefficients(1.0, 1.0), std::domain_error);

  const auto sched = schedule_from({1.0, 0.8, 0.5});
  const MapShape shape{1, 1, 1};
  const BinaryMask yt(shape, 1);
  const auto mean = kernel::ddim_mean(yt, ProbMap<double>(shape, 0.3), ProbMap<double>(shape, 0.9), 2, sched);
  CHECK(mean.data[0] == doctest::Approx(0.82).epsilon(1e-12));
  CHECK(mean.data[0] == doctest::Approx(oracle::ddim_mean(1, 0.3, 0.9, 0.8, 0.5)).epsilon(1e-12));
}

TEST_CASE("DDIM convexity on cosine schedules") {
  for (int T : {1, 5, 10, 100, 1000}) {
    const auto s = cosine_schedule(T);
    for (int t = 1; t <= T; ++t) {
      const auto c = kernel::ddim_coefficients(s.alpha_bar(t - 1), s.alpha_bar(t));
      CHECK(c.latent >= 0.0);
      CHECK(c.estimate >= 0.0);
      CHECK(std::abs(c.prior) <= 1e-12);
      CHECK(std::abs(c.latent + c.estimate + c.prior - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("sampling is deterministic per seed") {
  const auto sched = cosine_schedule(10);
  const MapShape shape{8, 8, 2};
  BinaryMask y0(shape);
  ProbMap<double> prior(shape);
  Rng init(1);
  for (Eigen::Index i = 0; i < shape.size(); ++i) {
    y0.data[i] = init.bernoulli(0.4);
    prior.data[i] = init.uniform();
  }
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    BinaryMask y = y0;
    for (int t = 1; t <= 10; ++t)
      y = kernel::forward_step(y, prior, t, sched, rng);
    for (int t = 10; t >= 1; --t)
      y = kernel::ddim_step(y, ProbMap<double>(shape, 0.2), prior, t, sched, rng);
    return y;
  };
  CHECK((run(7).data == run(7).data).all());
  CHECK(!(run(7).data == run(8).data).all());
}

TEST_CASE("differentiable posterior gradients match finite differences") {
  Rng rng(17);
  for (int i = 0; i < 200; ++i) {
    const double yt = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const double y0 = rng.uniform(0.05, 0.95);
    const double f = rng.uniform(0.05, 0.95);
    const double alpha = rng.uniform(0.05, 0.95);
    const double abp = rng.uniform(0.05, 0.95);
    const auto g = kernel::posterior_with_grad(yt, y0, f, alpha, abp);
    const double h = 1e-6;
    auto val = [&](double a, double b) { return oracle::bayes_posterior(static_cast<int>(yt), a, b, alpha, abp); };
    const double fd_y0 = (val(y0 + h, f) - val(y0 - h, f)) / (2 * h);
    const double fd_f = (val(y0, f + h) - val(y0, f - h)) / (2 * h);
    CHECK(g.value == doctest::Approx(val(y0, f)).epsilon(1e-12));
    CHECK(g.d_y0 == doctest::Approx(fd_y0).epsilon(1e-6));
    CHECK(g.d_prior == doctest::Approx(fd_f).epsilon(1e-6));
  }
}
