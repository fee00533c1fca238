#include "hidiff/bitops.hpp"
#include "hidiff/bitops_ad.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

#include <sstream>

using namespace hidiff;
using namespace hidiff::bitops;
using ad::Shape;
using ad::Tape;

namespace {

SignMatrix random_signs(Eigen::Index r, Eigen::Index c, Rng& rng) {
  SignMatrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      m(i, j) = rng.bernoulli(0.5) ? 1 : -1;
  return m;
}

// Plain integer product of ±1 matrices: a (m x k) times b (k x n).
IntMatrix naive_sign_gemm(const SignMatrix& a, const SignMatrix& b) {
  IntMatrix c = IntMatrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.cols(); ++j)
      for (Eigen::Index p = 0; p < a.cols(); ++p)
        c(i, j) += static_cast<std::int32_t>(a(i, p)) * static_cast<std::int32_t>(b(p, j));
  return c;
}

} // namespace

TEST_CASE("pack and unpack") {
  SUBCASE("1x1") {
    SignMatrix m(1, 1);
    m << 1;
    const auto p = PackedMatrix::pack(m);
    CHECK(p.words_per_row() == 1);
    CHECK((p.words()[0] & 1U) == 1U);
    CHECK(p.unpack() == m);
  }
  SUBCASE("1x65 all -1 crosses a word boundary") {
    const SignMatrix m = SignMatrix::Constant(1, 65, -1);
    const auto p = PackedMatrix::pack(m);
    CHECK(p.words_per_row() == 2);
    CHECK(p.tail_mask() == 1U);
    CHECK(p.words()[1] == ~std::uint64_t{1});  // one valid -1 bit, padding stays 1
    CHECK(p.unpack() == m);
  }
  SUBCASE("random 33x70") {
    Rng rng(5);
    const auto m = random_signs(33, 70, rng);
    CHECK(PackedMatrix::pack(m).unpack() == m);
  }
  SUBCASE("non-sign values are rejected") {
    SignMatrix m(1, 2);
    m << 1, 0;
    CHECK_THROWS_AS(PackedMatrix::pack(m), std::invalid_argument);
  }
  SUBCASE("pack_signs maps positives to +1") {
    const float v[] = {0.5f, 0.0f, -2.0f, 3.0f};
    const auto p = PackedMatrix::pack_signs(v, 2, 2);
    SignMatrix expect(2, 2);
    expect << 1, -1, -1, 1;
    CHECK(p.unpack() == expect);
  }
}

TEST_CASE("xnor gemm") {
  SUBCASE("hand example") {
    SignMatrix a(1, 3), bt(1, 3);
    a << 1, -1, 1;
    bt << 1, 1, -1;
    CHECK(xnor_gemm(PackedMatrix::pack(a), PackedMatrix::pack(bt))(0, 0) == -1);
  }
  SUBCASE("identical rows give the full width") {
    Rng rng(1);
    const auto a = random_signs(1, 100, rng);
    CHECK(xnor_gemm(PackedMatrix::pack(a), PackedMatrix::pack(a))(0, 0) == 100);
  }
  SUBCASE("random 16x16") {
    Rng rng(2);
    const auto a = random_signs(16, 16, rng);
    const auto b = random_signs(16, 16, rng);
    CHECK(xnor_gemm(PackedMatrix::pack(a), PackedMatrix::pack(SignMatrix(b.transpose()))) == naive_sign_gemm(a, b));
  }
  SUBCASE("random shapes including unaligned widths") {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      const Eigen::Index m = 1 + rng.below(20), k = 1 + rng.below(200), n = 1 + rng.below(20);
      const auto a = random_signs(m, k, rng);
      const auto b = random_signs(k, n, rng);
      REQUIRE(xnor_gemm(PackedMatrix::pack(a), PackedMatrix::pack(SignMatrix(b.transpose()))) == naive_sign_gemm(a, b));
    }
  }
  SUBCASE("extent mismatch") {
    CHECK_THROWS_AS(xnor_gemm(PackedMatrix(2, 3), PackedMatrix(2, 4)), std::invalid_argument);
  }
}

TEST_CASE("time-dependent binarization") {
  Tape<double> tape;
  SUBCASE("examples") {
    auto u = tape.constant(ad::Tensor<double>({1, 3, 1}, Eigen::ArrayXd::LinSpaced(3, 0.5, 0.5)));
    auto a = tape.constant(ad::Tensor<double>({1, 3}, 0.2));
    CHECK((tb_binarize(u, a).data() == 1.0).all());
    auto tie = tb_binarize(tape.constant(ad::Tensor<double>({1, 1}, 0.2)), tape.constant(ad::Tensor<double>({1, 1}, 0.2)));
    CHECK(tie.item() == -1.0);
    Eigen::ArrayXd vals(3);
    vals << -1, 0, 1;
    auto out = tb_binarize(tape.constant(ad::Tensor<double>({1, 1, 3}, vals)), tape.constant(ad::Tensor<double>({1, 1}, 0.0)));
    Eigen::ArrayXd expect(3);
    expect << -1, -1, 1;
    CHECK((out.data() == expect).all());
  }
  SUBCASE("straight-through window") {
    Eigen::ArrayXd vals(4);
    vals << 0.5, 1.5, -0.9, -1.2;
    auto u = tape.variable(ad::Tensor<double>({1, 1, 4}, vals));
    auto a = tape.variable(ad::Tensor<double>({1, 1}, 0.0));
    auto y = tb_binarize(u, a);
    tape.backward(ad::sum(y));
    Eigen::ArrayXd expect(4);
    expect << 1, 0, 1, 0;
    CHECK((u.grad() == expect).all());
    CHECK(a.grad()[0] == -2.0);
  }
  SUBCASE("outputs are always signs") {
    Rng rng(4);
    auto u = tape.constant(gradcheck::random_tensor({2, 3, 5}, rng, -3, 3));
    auto a = tape.constant(gradcheck::random_tensor({2, 3}, rng));
    CHECK((tb_binarize(u, a).data().abs() == 1.0).all());
  }
}

TEST_CASE("time-dependent activation") {
  Tape<double> tape;
  auto run = [&](double u, double gamma, double zeta, double beta) {
    return ta_activate(tape.constant(ad::Tensor<double>({1, 1}, u)), tape.constant(ad::Tensor<double>({1, 1}, gamma)),
                       tape.constant(ad::Tensor<double>({1, 1}, zeta)), tape.constant(ad::Tensor<double>({1}, beta)))
        .item();
  };
  CHECK(run(0.3, 0.3, 0.7, 0.25) == doctest::Approx(0.7));
  CHECK(run(2.3, 0.3, 0.0, 0.25) == doctest::Approx(2.0));
  CHECK(run(-1.7, 0.3, 0.1, 0.25) == doctest::Approx(-0.4));

  SUBCASE("hinge subgradient takes the upper branch") {
    auto u = tape.variable(ad::Tensor<double>({1, 1}, 0.3));
    auto y = ta_activate(u, tape.constant(ad::Tensor<double>({1, 1}, 0.3)), tape.constant(ad::Tensor<double>({1, 1}, 0.0)),
                         tape.constant(ad::Tensor<double>({1}, 0.25)));
    tape.backward(y);
    CHECK(u.grad()[0] == 1.0);
  }
  SUBCASE("gradients away from the hinge") {
    Rng rng(9);
    double worst = 0;
    for (int i = 0; i < 100; ++i) {
      auto gamma = gradcheck::random_tensor({2, 3}, rng);
      auto u = gradcheck::random_tensor({2, 3, 4}, rng, -2, 2);
      for (Eigen::Index k = 0; k < u.numel(); ++k) {
        const double g = gamma.data[k / 4];
        if (std::abs(u.data[k] - g) < 0.05)
          u.data[k] = g + 0.1;
      }
      worst = std::max(worst, gradcheck::max_relative_error(
                                  {u, gamma, gradcheck::random_tensor({2, 3}, rng), gradcheck::random_tensor({3}, rng, 0, 1)},
                                  [](const std::vector<ad::Var<double>>& v) { return ta_activate(v[0], v[1], v[2], v[3]); }));
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("binary layers match their float equivalents") {
  Rng rng(21);
  Tape<double> tape;
  SUBCASE("linear") {
    const auto x = random_signs(5, 70, rng).cast<double>().eval();
    const auto w = gradcheck::random_tensor({70, 3}, rng);
    auto out = binary_linear(tape.constant(ad::Tensor<double>({5, 70}, Eigen::Map<const Eigen::ArrayXd>(x.data(), 350))),
                             tape.constant(w));
    Eigen::Map<const ad::RowMatrix<double>> W(w.data.data(), 70, 3);
    const Eigen::RowVectorXd scale = W.array().abs().colwise().mean();
    const ad::RowMatrix<double> w_eff =
        (W.array() >= 0).select(ad::RowMatrix<double>::Ones(70, 3), -ad::RowMatrix<double>::Ones(70, 3)).array().rowwise() *
        scale.array();
    const ad::RowMatrix<double> expect = x * w_eff;
    CHECK((Eigen::Map<const ad::RowMatrix<double>>(out.data().data(), 5, 3) - expect).cwiseAbs().maxCoeff() <= 1e-12);
  }
  SUBCASE("conv") {
    ad::Tensor<double> x({2, 3, 5, 4});
    for (auto& v : x.data)
      v = rng.bernoulli(0.5) ? 1.0 : -1.0;
    const auto w = gradcheck::random_tensor({4, 3, 3, 3}, rng);
    const auto b = gradcheck::random_tensor({4}, rng);
    auto out = binary_conv2d(tape.constant(x), tape.constant(w), tape.constant(b));
    // Reference: same-padded float convolution with -1 padding and sign(W) * mean|W|.
    for (Eigen::Index i = 0; i < 2; ++i)
      for (Eigen::Index o = 0; o < 4; ++o) {
        const double scale = w.data.segment(o * 27, 27).abs().mean();
        for (Eigen::Index y = 0; y < 5; ++y)
          for (Eigen::Index xx = 0; xx < 4; ++xx) {
            double acc = 0;
            for (Eigen::Index c = 0; c < 3; ++c)
              for (Eigen::Index dy = 0; dy < 3; ++dy)
                for (Eigen::Index dx = 0; dx < 3; ++dx) {
                  const Eigen::Index sy = y + dy - 1, sx = xx + dx - 1;
                  const double xv = (sy < 0 || sy >= 5 || sx < 0 || sx >= 4) ? -1.0 : x.data[((i * 3 + c) * 5 + sy) * 4 + sx];
                  const double wv = w.data[((o * 3 + c) * 3 + dy) * 3 + dx] >= 0 ? 1.0 : -1.0;
                  acc += xv * wv;
                }
            CHECK(out.data()[((i * 4 + o) * 5 + y) * 4 + xx] == doctest::Approx(acc * scale + b.data[o]).epsilon(1e-12));
          }
      }
  }
  SUBCASE("straight-through weight gradient is clipped") {
    ad::Tensor<double> w({2, 2}, 0.5);
    w.data[3] = 1.5;
    auto wv = tape.variable(w);
    auto y = binary_linear(tape.constant(ad::Tensor<double>({1, 2}, 1.0)), wv);
    tape.backward(ad::sum(y));
    CHECK(wv.grad()[0] == 1.0);
    CHECK(wv.grad()[3] == 0.0);
  }
}

TEST_CASE("operation accounting") {
  const LayerSpec dense{"dense", LayerKind::Matmul, 8, 16, 4, false};
  const auto c = layer_cost(dense);
  CHECK(c.flops == 2.0 * 8 * 16 * 4);
  CHECK(c.bops == 0.0);
  auto bin = dense;
  bin.binarized = true;
  const auto cb = layer_cost(bin);
  CHECK(cb.bops == 2.0 * 8 * 16 * 4);
  CHECK(cb.flops == 0.0);
  CHECK(cb.effective_flops() == c.flops / 64.0);
  CHECK_THROWS_AS(layer_cost(LayerSpec{"bad", LayerKind::Conv2d, 0, 1, 1, false}), UnannotatedLayer);

  const auto seg = cost_report(ModelDescription{"seg", {dense}});
  const auto ref = cost_report(ModelDescription{"ref", {dense, bin}});
  CHECK(ref.total.flops == c.flops);
  CHECK(ref.total.bops == cb.bops);
  const auto total = inference_cost(seg, ref, 10);
  CHECK(total.effective_flops() == doctest::Approx(c.flops + 10 * (c.flops + cb.bops / 64.0)));

  std::ostringstream os;
  write_cost_table(os, ref);
  CHECK(os.str().find("effective_flops") != std::string::npos);
  CHECK(os.str().find("total") != std::string::npos);
}
