#include "hidiff/bitops.hpp"

#include "hidiff/rng.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <limits>
#include <ostream>

namespace hidiff::bitops {

PackedMatrix::PackedMatrix(Eigen::Index rows, Eigen::Index cols)
    : rows_(rows), cols_(cols), words_per_row_((cols + kWordBits - 1) / kWordBits) {
  if (rows < 0 || cols < 0)
    throw std::invalid_argument("PackedMatrix: negative extent");
  const int tail = static_cast<int>(cols % kWordBits);
  tail_mask_ = tail == 0 ? ~std::uint64_t{0} : (std::uint64_t{1} << tail) - 1;
  // All bits start as +1, which also fixes the padding bits.
  words_.assign(static_cast<std::size_t>(rows * words_per_row_), ~std::uint64_t{0});
}

void PackedMatrix::set(Eigen::Index r, Eigen::Index c, bool plus_one) {
  std::uint64_t& w = words_[r * words_per_row_ + c / kWordBits];
  const std::uint64_t bit = std::uint64_t{1} << (c % kWordBits);
  w = plus_one ? (w | bit) : (w & ~bit);
}

SignMatrix PackedMatrix::unpack() const {
  SignMatrix m(rows_, cols_);
  for (Eigen::Index r = 0; r < rows_; ++r)
    for (Eigen::Index c = 0; c < cols_; ++c)
      m(r, c) = get(r, c) ? 1 : -1;
  return m;
}

IntMatrix xnor_gemm(const PackedMatrix& lhs, const PackedMatrix& rhs_transposed) {
  if (lhs.cols() != rhs_transposed.cols())
    throw std::invalid_argument("xnor_gemm: inner extents differ (" + std::to_string(lhs.cols()) + " vs " +
                                std::to_string(rhs_transposed.cols()) + ")");
  const Eigen::Index m = lhs.rows(), n = rhs_transposed.rows(), k = lhs.cols();
  const Eigen::Index words = lhs.words_per_row();
  const std::uint64_t tail = lhs.tail_mask();
  IntMatrix out(m, n);
  if (words == 0) {
    out.setZero();
    return out;
  }
  for (Eigen::Index i = 0; i < m; ++i) {
    const std::uint64_t* a = lhs.row_words(i);
    for (Eigen::Index j = 0; j < n; ++j) {
      const std::uint64_t* b = rhs_transposed.row_words(j);
      int matches = 0;
      for (Eigen::Index w = 0; w + 1 < words; ++w)
        matches += std::popcount(~(a[w] ^ b[w]));
      matches += std::popcount(~(a[words - 1] ^ b[words - 1]) & tail);
      out(i, j) = 2 * matches - static_cast<std::int32_t>(k);
    }
  }
  return out;
}

FloatMatrix naive_float_gemm(const FloatMatrix& a, const FloatMatrix& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("naive_float_gemm: inner extents differ");
  FloatMatrix c = FloatMatrix::Zero(a.rows(), b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index p = 0; p < a.cols(); ++p) {
      const float av = a(i, p);
      for (Eigen::Index j = 0; j < b.cols(); ++j)
        c(i, j) += av * b(p, j);
    }
  return c;
}

GemmBench bench_gemm(Eigen::Index m, Eigen::Index k, Eigen::Index n, int repeat, std::uint64_t seed) {
  if (m < 1 || k < 1 || n < 1 || repeat < 1)
    throw std::invalid_argument("bench_gemm: extents and repeat must be >= 1");
  Rng rng(seed);
  FloatMatrix a(m, k), b(k, n);
  for (Eigen::Index i = 0; i < a.size(); ++i)
    a.data()[i] = rng.bernoulli(0.5) ? 1.0f : -1.0f;
  for (Eigen::Index i = 0; i < b.size(); ++i)
    b.data()[i] = rng.bernoulli(0.5) ? 1.0f : -1.0f;
  const auto lhs = PackedMatrix::pack(a);
  const FloatMatrix bt = b.transpose();
  const auto rhs = PackedMatrix::pack(bt);

  using clock = std::chrono::steady_clock;
  GemmBench r{m, k, n, std::numeric_limits<double>::max(), std::numeric_limits<double>::max(), false};
  IntMatrix packed;
  FloatMatrix reference;
  for (int i = 0; i < repeat; ++i) {
    auto t0 = clock::now();
    packed = xnor_gemm(lhs, rhs);
    auto t1 = clock::now();
    reference = naive_float_gemm(a, b);
    auto t2 = clock::now();
    r.xnor_seconds = std::min(r.xnor_seconds, std::chrono::duration<double>(t1 - t0).count());
    r.float_seconds = std::min(r.float_seconds, std::chrono::duration<double>(t2 - t1).count());
  }
  r.identical = (packed.cast<float>().array() == reference.array()).all();
  return r;
}

OpCost layer_cost(const LayerSpec& layer) {
  if (layer.m <= 0 || layer.k <= 0 || layer.n <= 0)
    throw UnannotatedLayer("cost_report: layer '" + layer.name + "' has no shape annotation");
  const double ops = 2.0 * static_cast<double>(layer.m) * static_cast<double>(layer.k) * static_cast<double>(layer.n);
  return layer.binarized ? OpCost{0.0, ops} : OpCost{ops, 0.0};
}

CostReport cost_report(const ModelDescription& model) {
  CostReport r;
  for (const auto& layer : model.layers) {
    const OpCost c = layer_cost(layer);
    r.layers.emplace_back(layer.name, c);
    r.total += c;
  }
  return r;
}

OpCost inference_cost(const CostReport& segmentor, const CostReport& refiner, int steps) {
  if (steps < 0)
    throw std::invalid_argument("inference_cost: negative step count");
  return segmentor.total + refiner.total * static_cast<double>(steps);
}

void write_cost_table(std::ostream& os, const CostReport& report) {
  char line[256];
  std::snprintf(line, sizeof line, "%-32s %16s %16s %16s\n", "layer", "flops", "bops", "effective_flops");
  os << line;
  auto row = [&](const std::string& name, const OpCost& c) {
    std::snprintf(line, sizeof line, "%-32s %16.0f %16.0f %16.1f\n", name.c_str(), c.flops, c.bops, c.effective_flops());
    os << line;
  };
  for (const auto& [name, c] : report.layers)
    row(name, c);
  row("total", report.total);
}

} // namespace hidiff::bitops
