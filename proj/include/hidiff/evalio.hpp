#pragma once

// Segmentation metrics, the synthetic shape corpus, and file formats
// (HDT tensors, PGM previews, CSV reports).

#include "hidiff/maps.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hidiff::evalio {

// ---------------------------------------------------------------------------
// Metrics on single-channel masks

/// 2|A∩B| / (|A| + |B|); 1 when both are empty.
double dice(const BinaryMask& pred, const BinaryMask& gt);

/// 95th percentile of the pooled boundary-to-boundary nearest distances in
/// both directions (8-connected boundaries, Euclidean, linear interpolation
/// between order statistics). Undefined when either mask is empty.
std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& gt);

/// Largest nearest boundary distance in either direction (brute force).
std::optional<double> hausdorff(const BinaryMask& pred, const BinaryMask& gt);

struct Confusion {
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
};
Confusion confusion(const BinaryMask& pred, const BinaryMask& gt);

/// TP / (TP + FP + FN); 1 when both are empty.
double iou(const BinaryMask& pred, const BinaryMask& gt);
/// TP / (TP + FN); 1 when the ground truth is empty.
double recall(const BinaryMask& pred, const BinaryMask& gt);
double accuracy(const BinaryMask& pred, const BinaryMask& gt);

// ---------------------------------------------------------------------------
// Label maps and aggregation

/// Integer class map, 0 = background.
struct LabelMap {
  Eigen::Index height = 0, width = 0;
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> labels;

  LabelMap() = default;
  LabelMap(Eigen::Index h, Eigen::Index w) : height(h), width(w), labels(decltype(labels)::Zero(h * w)) {}

  /// Binary mask of one class.
  BinaryMask mask(int cls) const;
};

/// Channel k of the result is class k when `with_background`, else class k+1.
BinaryMask one_hot(const LabelMap& labels, int classes, bool with_background);

/// True when some 8-connected component of a foreground class covers fewer
/// than `fraction` of the pixels.
bool has_small_component(const LabelMap& labels, double fraction);

struct ClassMetrics {
  std::string name;
  double dice = 0, hd95 = 0, iou = 0, recall = 0, accuracy = 0;
  std::int64_t defined = 0, cases = 0;  // HD95 cases with a numeric value / all cases
  double nan_ratio() const { return cases == 0 ? 0.0 : static_cast<double>(cases - defined) / static_cast<double>(cases); }
};

struct MetricReport {
  std::vector<ClassMetrics> classes;  // one per foreground class
  ClassMetrics mean;                  // class-mean of per-class means; HD95 over all defined cases
  std::int64_t samples = 0;
};

/// Accumulates per-sample, per-class metrics for foreground classes 1..C.
class MetricAccumulator {
public:
  explicit MetricAccumulator(int classes);
  void add(const LabelMap& pred, const LabelMap& gt);
  MetricReport report() const;
  /// Mean over classes of Dice for each added sample, in insertion order.
  const std::vector<double>& sample_dice() const { return sample_dice_; }

private:
  struct Sums {
    double dice = 0, hd95 = 0, iou = 0, recall = 0, accuracy = 0;
    std::int64_t defined = 0, cases = 0;
  };
  int classes_;
  std::vector<Sums> sums_;
  std::vector<double> sample_dice_;
};

/// Writes reports side by side with a leading `source` column, after a
/// comment line stating the HD95 convention.
void write_metric_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& reports);

// ---------------------------------------------------------------------------
// Synthetic corpus

enum class ShapeKind : std::uint8_t { Disk, Rectangle, Annulus, Curve };

struct ShapeInfo {
  ShapeKind kind = ShapeKind::Disk;
  int cls = 1;
  double cx = 0, cy = 0;      // centre (Bezier control point for curves)
  double a = 0, b = 0;        // radius / half-extents / inner-outer radii / curve end offsets
  double c = 0, d = 0;        // curve second end offset
  double intensity = 0;       // rendered level including jitter
  std::int64_t area = 0;      // visible pixels after occlusion
  bool small = false;          // placed as an isolated small object
};

struct SyntheticSample {
  Eigen::ArrayXf image;  // planar H x W
  LabelMap labels;
  std::vector<ShapeInfo> objects;
  double background = 0;
  std::uint64_t seed = 0;
  bool has_small_object() const;
};

struct SynthConfig {
  int n = 16;
  int size = 32;
  int classes = 2;
  double small_object_rate = 0.5;
  double noise_level = 0.1;
  std::uint64_t seed = 0;
  void validate() const;
};

struct Dataset {
  int size = 0;
  int classes = 0;
  std::vector<SyntheticSample> samples;
};

/// Objects below this fraction of the grid count as small.
inline constexpr double kSmallObjectFraction = 0.01;

Dataset gen_synthetic(const SynthConfig& cfg);

/// Noise-free rendering of a sample's objects (used for the noise-free contract).
Eigen::ArrayXf render_clean(const SyntheticSample& s, int size);

/// images.hdt (f32 [N, 1, H, W]), labels.hdt (u8 [N, H, W]), index.csv.
void save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// HDT tensor format: "HDT1", u8 dtype, u32 rank, u32 dims..., LE payload.

enum class DType : std::uint8_t { F32 = 0, F64 = 1, U8 = 2 };

class FormatError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

struct HdtRecord {
  DType dtype = DType::F32;
  std::vector<std::uint32_t> dims;
  std::vector<unsigned char> bytes;  // host-order element storage

  std::size_t numel() const;
  template <typename T>
  Eigen::Array<T, Eigen::Dynamic, 1> as() const;
};

template <typename T>
DType dtype_of();
template <>
inline DType dtype_of<float>() { return DType::F32; }
template <>
inline DType dtype_of<double>() { return DType::F64; }
template <>
inline DType dtype_of<std::uint8_t>() { return DType::U8; }

void hdt_write(std::ostream& os, DType dtype, const std::vector<std::uint32_t>& dims, const void* data);
HdtRecord hdt_read(std::istream& is);

template <typename T>
void hdt_write(std::ostream& os, const std::vector<std::uint32_t>& dims, const Eigen::Array<T, Eigen::Dynamic, 1>& data) {
  hdt_write(os, dtype_of<T>(), dims, data.data());
}

void hdt_write_file(const std::filesystem::path& path, const HdtRecord& r);
HdtRecord hdt_read_file(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// PGM export

/// 8-bit binary PGM (P5).
void pgm_write(const std::filesystem::path& path, Eigen::Index height, Eigen::Index width, const std::uint8_t* pixels);
/// Image rescaled from [min, max] to [0, 255].
void pgm_export_image(const std::filesystem::path& path, const Eigen::ArrayXf& image, Eigen::Index height, Eigen::Index width);
/// One file per channel: <stem>_c<k>.pgm with 0/255 pixels. Returns the paths.
std::vector<std::filesystem::path> pgm_export_mask(const std::filesystem::path& stem, const BinaryMask& mask);
/// Label map scaled so classes spread over [0, 255].
void pgm_export_labels(const std::filesystem::path& path, const LabelMap& labels, int classes);

} // namespace hidiff::evalio
