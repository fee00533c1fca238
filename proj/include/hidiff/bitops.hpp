#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace hidiff::bitops {

using SignMatrix = Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using IntMatrix = Eigen::Matrix<std::int32_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kWordBits = 64;

/// Row-major bit-packed ±1 matrix: +1 is stored as 1, -1 as 0.
///
/// Each row occupies `words_per_row()` 64-bit words; bit j of a row lives in
/// word j/64 at position j%64. Padding bits past `cols()` in the final word
/// are set to 1 and excluded from every product by a mask.
class PackedMatrix {
public:
  PackedMatrix() = default;
  PackedMatrix(Eigen::Index rows, Eigen::Index cols);

  /// Packs a ±1 matrix; throws std::invalid_argument on any other value.
  template <typename Derived>
  static PackedMatrix pack(const Eigen::MatrixBase<Derived>& m) {
    PackedMatrix out(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const auto v = m(r, c);
        if (v == 1)
          out.set(r, c, true);
        else if (v == -1)
          out.set(r, c, false);
        else
          throw std::invalid_argument("PackedMatrix::pack: element (" + std::to_string(r) + ", " + std::to_string(c) +
                                      ") is not ±1");
      }
    return out;
  }

  /// Packs a row-major buffer by sign: values > 0 become +1, others -1.
  template <typename Scalar>
  static PackedMatrix pack_signs(const Scalar* data, Eigen::Index rows, Eigen::Index cols) {
    PackedMatrix out(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      std::uint64_t* row = out.row_words(r);
      const Scalar* src = data + r * cols;
      for (Eigen::Index c = 0; c < cols; ++c)
        if (!(src[c] > Scalar(0)))
          row[c / kWordBits] &= ~(std::uint64_t{1} << (c % kWordBits));
    }
    return out;
  }

  SignMatrix unpack() const;

  Eigen::Index rows() const { return rows_; }
  Eigen::Index cols() const { return cols_; }
  Eigen::Index words_per_row() const { return words_per_row_; }
  /// Mask of valid bits in the final word of each row.
  std::uint64_t tail_mask() const { return tail_mask_; }

  bool get(Eigen::Index r, Eigen::Index c) const {
    return (words_[r * words_per_row_ + c / kWordBits] >> (c % kWordBits)) & 1U;
  }
  void set(Eigen::Index r, Eigen::Index c, bool plus_one);

  const std::uint64_t* row_words(Eigen::Index r) const { return words_.data() + r * words_per_row_; }
  std::uint64_t* row_words(Eigen::Index r) { return words_.data() + r * words_per_row_; }
  const std::vector<std::uint64_t>& words() const { return words_; }

private:
  Eigen::Index rows_ = 0;
  Eigen::Index cols_ = 0;
  Eigen::Index words_per_row_ = 0;
  std::uint64_t tail_mask_ = ~std::uint64_t{0};
  std::vector<std::uint64_t> words_;
};

/// Signed ±1 product via XNOR and popcount.
///
/// `lhs` is m x k and `rhs_transposed` holds the n columns of the right
/// operand as rows (n x k). Entry (i, j) is 2*popcount(XNOR(lhs_i, rhs_j)) - k,
/// which equals the integer dot product of the two ±1 vectors.
IntMatrix xnor_gemm(const PackedMatrix& lhs, const PackedMatrix& rhs_transposed);

/// Reference triple-loop float GEMM, the baseline the packed path is timed against.
FloatMatrix naive_float_gemm(const FloatMatrix& a, const FloatMatrix& b);

/// Wall-clock comparison of the packed path against the naive float GEMM on
/// the same random ±1 operands. Times are the best of `repeat` runs; packing
/// is excluded from the packed timing, as weights are packed once.
struct GemmBench {
  Eigen::Index m = 0, k = 0, n = 0;
  double xnor_seconds = 0;
  double float_seconds = 0;
  bool identical = false;  // packed result equals the float result elementwise
  double speedup() const { return xnor_seconds > 0 ? float_seconds / xnor_seconds : 0.0; }
};

GemmBench bench_gemm(Eigen::Index m, Eigen::Index k, Eigen::Index n, int repeat, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Operation accounting

/// Binary operations per equivalent floating-point operation.
inline constexpr double kBopsPerFlop = 64.0;

struct OpCost {
  double flops = 0.0;
  double bops = 0.0;

  double effective_flops() const { return flops + bops / kBopsPerFlop; }

  OpCost& operator+=(const OpCost& o) {
    flops += o.flops;
    bops += o.bops;
    return *this;
  }
  friend OpCost operator+(OpCost a, const OpCost& b) { return a += b; }
  friend OpCost operator*(OpCost a, double s) {
    a.flops *= s;
    a.bops *= s;
    return a;
  }
};

enum class LayerKind { Matmul, Conv2d };

/// A product-shaped layer: an (m x k) by (k x n) multiply. For a convolution
/// m is the number of output pixels and k = C_in * kernel².
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Matmul;
  Eigen::Index m = 0;
  Eigen::Index k = 0;
  Eigen::Index n = 0;
  bool binarized = false;
};

struct ModelDescription {
  std::string name;
  std::vector<LayerSpec> layers;
};

struct CostReport {
  std::vector<std::pair<std::string, OpCost>> layers;
  OpCost total;
};

class UnannotatedLayer : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// 2mkn multiply-adds, counted as FLOPs for real layers and BOPs for binarized ones.
OpCost layer_cost(const LayerSpec& layer);
CostReport cost_report(const ModelDescription& model);

/// Segmentor cost plus one refiner pass per sampling step.
OpCost inference_cost(const CostReport& segmentor, const CostReport& refiner, int steps);

/// Plain-text table with columns layer, flops, bops, effective_flops.
void write_cost_table(std::ostream& os, const CostReport& report);

} // namespace hidiff::bitops
