#include "hidiff/evalio.hpp"

#include "hidiff/rng.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>

namespace hidiff::evalio {

namespace {

void require_single_channel(const BinaryMask& m, const char* what) {
  if (m.shape.channels != 1)
    throw ShapeError(std::string(what) + ": expected a single-channel mask, got " + to_string(m.shape));
}

void check_pair(const BinaryMask& pred, const BinaryMask& gt, const char* what) {
  require_same_shape(pred.shape, gt.shape, what);
  require_single_channel(pred, what);
}

struct Point {
  int y, x;
};

// Foreground pixels with at least one 8-neighbour outside the mask
// (the grid border counts as background).
std::vector<Point> boundary(const BinaryMask& m) {
  const int h = static_cast<int>(m.shape.height), w = static_cast<int>(m.shape.width);
  auto on = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && m(y, x) != 0; };
  std::vector<Point> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!on(y, x))
        continue;
      bool edge = false;
      for (int dy = -1; dy <= 1 && !edge; ++dy)
        for (int dx = -1; dx <= 1 && !edge; ++dx)
          edge = !on(y + dy, x + dx);
      if (edge)
        out.push_back({y, x});
    }
  return out;
}

void nearest_distances(const std::vector<Point>& from, const std::vector<Point>& to, std::vector<double>& out) {
  for (const auto& p : from) {
    int best = std::numeric_limits<int>::max();
    for (const auto& q : to) {
      const int dy = p.y - q.y, dx = p.x - q.x;
      best = std::min(best, dy * dy + dx * dx);
    }
    out.push_back(std::sqrt(static_cast<double>(best)));
  }
}

std::optional<std::vector<double>> symmetric_distances(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.count() == 0 || gt.count() == 0)
    return std::nullopt;
  const auto bp = boundary(pred), bg = boundary(gt);
  std::vector<double> d;
  d.reserve(bp.size() + bg.size());
  nearest_distances(bp, bg, d);
  nearest_distances(bg, bp, d);
  return d;
}

} // namespace

double dice(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt, "dice");
  const auto c = confusion(pred, gt);
  const auto denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

std::optional<double> hd95(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt, "hd95");
  auto d = symmetric_distances(pred, gt);
  if (!d)
    return std::nullopt;
  auto& v = *d;
  std::sort(v.begin(), v.end());
  const double rank = 0.95 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

std::optional<double> hausdorff(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt, "hausdorff");
  auto d = symmetric_distances(pred, gt);
  if (!d)
    return std::nullopt;
  return *std::max_element(d->begin(), d->end());
}

Confusion confusion(const BinaryMask& pred, const BinaryMask& gt) {
  require_same_shape(pred.shape, gt.shape, "confusion");
  Confusion c;
  for (Eigen::Index i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
    c.tn += !p && !g;
  }
  return c;
}

double iou(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt, "iou");
  const auto c = confusion(pred, gt);
  const auto denom = c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double recall(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt, "recall");
  const auto c = confusion(pred, gt);
  const auto denom = c.tp + c.fn;
  return denom == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(denom);
}

double accuracy(const BinaryMask& pred, const BinaryMask& gt) {
  check_pair(pred, gt, "accuracy");
  const auto c = confusion(pred, gt);
  const auto n = c.tp + c.fp + c.fn + c.tn;
  return n == 0 ? 1.0 : static_cast<double>(c.tp + c.tn) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------

BinaryMask LabelMap::mask(int cls) const {
  BinaryMask m(MapShape{height, width, 1});
  m.data = (labels == static_cast<std::uint8_t>(cls)).cast<std::uint8_t>();
  return m;
}

BinaryMask one_hot(const LabelMap& labels, int classes, bool with_background) {
  const int first = with_background ? 0 : 1;
  const Eigen::Index k = classes + 1 - first;
  BinaryMask m(MapShape{labels.height, labels.width, k});
  const Eigen::Index plane = labels.height * labels.width;
  for (Eigen::Index c = 0; c < k; ++c)
    m.data.segment(c * plane, plane) = (labels.labels == static_cast<std::uint8_t>(c + first)).cast<std::uint8_t>();
  return m;
}

bool has_small_component(const LabelMap& labels, double fraction) {
  const int h = static_cast<int>(labels.height), w = static_cast<int>(labels.width);
  const double limit = fraction * h * w;
  std::vector<char> seen(static_cast<std::size_t>(h) * w, 0);
  std::vector<int> stack;
  for (int start = 0; start < h * w; ++start) {
    const auto cls = labels.labels[start];
    if (cls == 0 || seen[start])
      continue;
    std::int64_t area = 0;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      ++area;
      const int y = i / w, x = i % w;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w)
            continue;
          const int j = yy * w + xx;
          if (!seen[j] && labels.labels[j] == cls) {
            seen[j] = 1;
            stack.push_back(j);
          }
        }
    }
    if (static_cast<double>(area) < limit)
      return true;
  }
  return false;
}

MetricAccumulator::MetricAccumulator(int classes) : classes_(classes), sums_(static_cast<std::size_t>(classes)) {
  if (classes < 1)
    throw std::invalid_argument("MetricAccumulator: classes must be >= 1");
}

void MetricAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width)
    throw ShapeError("MetricAccumulator: label map extents differ");
  double dsum = 0;
  for (int c = 1; c <= classes_; ++c) {
    const auto p = pred.mask(c), g = gt.mask(c);
    auto& s = sums_[static_cast<std::size_t>(c - 1)];
    const double d = dice(p, g);
    dsum += d;
    s.dice += d;
    s.iou += iou(p, g);
    s.recall += recall(p, g);
    s.accuracy += accuracy(p, g);
    ++s.cases;
    if (auto h = hd95(p, g)) {
      s.hd95 += *h;
      ++s.defined;
    }
  }
  sample_dice_.push_back(dsum / classes_);
}

MetricReport MetricAccumulator::report() const {
  MetricReport r;
  r.samples = static_cast<std::int64_t>(sample_dice_.size());
  double hd_total = 0;
  for (int c = 0; c < classes_; ++c) {
    const auto& s = sums_[static_cast<std::size_t>(c)];
    ClassMetrics m;
    m.name = std::to_string(c + 1);
    const double n = s.cases == 0 ? 1.0 : static_cast<double>(s.cases);
    m.dice = s.dice / n;
    m.iou = s.iou / n;
    m.recall = s.recall / n;
    m.accuracy = s.accuracy / n;
    m.defined = s.defined;
    m.cases = s.cases;
    m.hd95 = s.defined == 0 ? std::numeric_limits<double>::quiet_NaN() : s.hd95 / static_cast<double>(s.defined);
    r.mean.dice += m.dice / classes_;
    r.mean.iou += m.iou / classes_;
    r.mean.recall += m.recall / classes_;
    r.mean.accuracy += m.accuracy / classes_;
    r.mean.defined += s.defined;
    r.mean.cases += s.cases;
    hd_total += s.hd95;
    r.classes.push_back(m);
  }
  r.mean.name = "mean";
  r.mean.hd95 = r.mean.defined == 0 ? std::numeric_limits<double>::quiet_NaN()
                                    : hd_total / static_cast<double>(r.mean.defined);
  return r;
}

void write_metric_csv(std::ostream& os, const std::vector<std::pair<std::string, MetricReport>>& reports) {
  os << "# hd95: per 2D sample, pixel units, mean over defined cases; undefined when prediction or label is empty\n";
  for (const auto& [source, r] : reports)
    os << "# " << source << ": samples=" << r.samples << " nan_ratio=" << r.mean.nan_ratio() << "\n";
  os << "source,class,dice,hd95,defined,iou,recall,accuracy\n";
  os << std::setprecision(6);
  auto row = [&](const std::string& source, const ClassMetrics& m) {
    os << source << ',' << m.name << ',' << m.dice << ',';
    if (std::isnan(m.hd95))
      os << "nan";
    else
      os << m.hd95;
    os << ',' << m.defined << ',' << m.iou << ',' << m.recall << ',' << m.accuracy << '\n';
  };
  for (const auto& [source, r] : reports) {
    for (const auto& m : r.classes)
      row(source, m);
    row(source, r.mean);
  }
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

constexpr double kCurveRadius = 0.75;

double bezier_distance(const ShapeInfo& s, double px, double py) {
  const double x0 = s.cx + s.a, y0 = s.cy + s.b, x2 = s.cx + s.c, y2 = s.cy + s.d;
  double best = std::numeric_limits<double>::max();
  constexpr int kSteps = 48;
  for (int i = 0; i <= kSteps; ++i) {
    const double t = static_cast<double>(i) / kSteps, u = 1 - t;
    const double x = u * u * x0 + 2 * u * t * s.cx + t * t * x2;
    const double y = u * u * y0 + 2 * u * t * s.cy + t * t * y2;
    best = std::min(best, std::hypot(px - x, py - y));
  }
  return best;
}

bool inside(const ShapeInfo& s, int y, int x) {
  const double px = x + 0.5, py = y + 0.5;
  const double dx = px - s.cx, dy = py - s.cy;
  switch (s.kind) {
  case ShapeKind::Disk:
    return dx * dx + dy * dy <= s.a * s.a;
  case ShapeKind::Rectangle:
    return std::abs(dx) <= s.a && std::abs(dy) <= s.b;
  case ShapeKind::Annulus: {
    const double r2 = dx * dx + dy * dy;
    return r2 <= s.a * s.a && r2 >= s.b * s.b;
  }
  case ShapeKind::Curve:
    return bezier_distance(s, px, py) <= kCurveRadius;
  }
  return false;
}

double class_level(int cls, int classes) {
  if (classes == 1)
    return 0.7;
  return 0.45 + 0.45 * static_cast<double>(cls - 1) / static_cast<double>(classes - 1);
}

ShapeInfo regular_shape(Rng& rng, int size, int classes) {
  ShapeInfo s;
  s.kind = static_cast<ShapeKind>(rng.below(4));
  s.cls = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  const double sz = size;
  switch (s.kind) {
  case ShapeKind::Disk:
    s.a = rng.uniform(0.1 * sz, 0.2 * sz);
    break;
  case ShapeKind::Rectangle:
    s.a = rng.uniform(0.08 * sz, 0.18 * sz);
    s.b = rng.uniform(0.08 * sz, 0.18 * sz);
    break;
  case ShapeKind::Annulus:
    s.a = rng.uniform(0.14 * sz, 0.24 * sz);
    s.b = s.a * rng.uniform(0.45, 0.65);
    break;
  case ShapeKind::Curve:
    s.a = rng.uniform(-0.3, 0.3) * sz;
    s.b = rng.uniform(-0.3, 0.3) * sz;
    s.c = rng.uniform(-0.3, 0.3) * sz;
    s.d = rng.uniform(-0.3, 0.3) * sz;
    break;
  }
  const double margin = s.kind == ShapeKind::Curve ? 0.3 * sz : std::max(s.a, s.b);
  const double lo = std::min(margin, 0.5 * sz), hi = std::max(sz - margin, lo);
  s.cx = rng.uniform(lo, hi);
  s.cy = rng.uniform(lo, hi);
  return s;
}

SyntheticSample make_sample(std::uint64_t seed, const SynthConfig& cfg) {
  Rng rng(seed);
  const int n = cfg.size;
  SyntheticSample out;
  out.seed = seed;
  out.background = 0.1 + rng.uniform(-0.05, 0.05);
  out.labels = LabelMap(n, n);
  std::vector<int> owner(static_cast<std::size_t>(n) * n, -1);

  auto paint = [&](const ShapeInfo& s, int id) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (inside(s, y, x)) {
          out.labels.labels[y * n + x] = static_cast<std::uint8_t>(s.cls);
          owner[static_cast<std::size_t>(y * n + x)] = id;
        }
  };

  const int regular = 1 + static_cast<int>(rng.below(3));
  for (int k = 0; k < regular; ++k) {
    auto s = regular_shape(rng, n, cfg.classes);
    s.intensity = class_level(s.cls, cfg.classes) + rng.uniform(-0.08, 0.08);
    out.objects.push_back(s);
    paint(s, k);
  }

  if (rng.bernoulli(cfg.small_object_rate)) {
    // A small object is isolated: its pixels and their 8-neighbours start as
    // background, so it is its own connected component and is not occluded.
    const double limit = kSmallObjectFraction * n * n;
    ShapeInfo s;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      s = ShapeInfo{};
      s.kind = rng.bernoulli(0.7) ? ShapeKind::Disk : ShapeKind::Curve;
      s.cls = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.classes)));
      s.cx = rng.uniform(2.0, n - 2.0);
      s.cy = rng.uniform(2.0, n - 2.0);
      if (s.kind == ShapeKind::Disk) {
        s.a = rng.uniform(0.8, std::max(0.9, std::sqrt(limit / 3.14159)));
      } else {
        s.a = rng.uniform(-1.5, 1.5);
        s.b = rng.uniform(-1.5, 1.5);
        s.c = rng.uniform(-1.5, 1.5);
        s.d = rng.uniform(-1.5, 1.5);
      }
      std::int64_t area = 0;
      bool clear = true;
      for (int y = 0; y < n && clear; ++y)
        for (int x = 0; x < n && clear; ++x) {
          if (!inside(s, y, x))
            continue;
          ++area;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xx = x + dx;
              if (yy >= 0 && yy < n && xx >= 0 && xx < n && out.labels.labels[yy * n + xx] != 0)
                clear = false;
            }
        }
      placed = clear && area > 0 && static_cast<double>(area) < limit;
    }
    if (!placed) {
      // Fall back to a single pixel in the emptiest corner region.
      s = ShapeInfo{};
      s.kind = ShapeKind::Disk;
      s.cls = 1;
      s.a = 0.5;
      for (int y = 1; y < n - 1 && !placed; ++y)
        for (int x = 1; x < n - 1 && !placed; ++x) {
          bool clear = true;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              clear = clear && out.labels.labels[(y + dy) * n + x + dx] == 0;
          if (clear) {
            s.cx = x + 0.5;
            s.cy = y + 0.5;
            placed = true;
          }
        }
    }
    if (placed) {
      s.small = true;
      s.intensity = class_level(s.cls, cfg.classes) + rng.uniform(-0.08, 0.08);
      out.objects.push_back(s);
      paint(s, static_cast<int>(out.objects.size()) - 1);
    }
  }

  for (std::size_t k = 0; k < out.objects.size(); ++k)
    out.objects[k].area = std::count(owner.begin(), owner.end(), static_cast<int>(k));

  out.image = render_clean(out, n);
  if (cfg.noise_level > 0)
    for (Eigen::Index i = 0; i < out.image.size(); ++i)
      out.image[i] += static_cast<float>(cfg.noise_level * rng.normal());
  return out;
}

} // namespace

bool SyntheticSample::has_small_object() const {
  return std::any_of(objects.begin(), objects.end(), [&](const ShapeInfo& s) {
    return s.area > 0 && static_cast<double>(s.area) < kSmallObjectFraction * static_cast<double>(labels.labels.size());
  });
}

void SynthConfig::validate() const {
  if (n < 0)
    throw std::invalid_argument("gen_synthetic: n must be >= 0");
  if (size < 16)
    throw std::invalid_argument("gen_synthetic: size must be >= 16");
  if (classes < 1 || classes > 254)
    throw std::invalid_argument("gen_synthetic: classes must be in [1, 254]");
  if (!(small_object_rate >= 0 && small_object_rate <= 1))
    throw std::invalid_argument("gen_synthetic: small_object_rate must be in [0, 1]");
  if (!(noise_level >= 0) || !std::isfinite(noise_level))
    throw std::invalid_argument("gen_synthetic: noise_level must be finite and >= 0");
}

Eigen::ArrayXf render_clean(const SyntheticSample& s, int size) {
  Eigen::ArrayXf img = Eigen::ArrayXf::Constant(static_cast<Eigen::Index>(size) * size, static_cast<float>(s.background));
  for (const auto& o : s.objects)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (inside(o, y, x))
          img[y * size + x] = static_cast<float>(o.intensity);
  return img;
}

Dataset gen_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.size = cfg.size;
  d.classes = cfg.classes;
  const Rng root(cfg.seed);
  for (int i = 0; i < cfg.n; ++i)
    d.samples.push_back(make_sample(root.substream(static_cast<std::uint64_t>(i)).seed(), cfg));
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto n = static_cast<std::uint32_t>(d.samples.size());
  const auto s = static_cast<std::uint32_t>(d.size);
  const std::size_t plane = static_cast<std::size_t>(s) * s;

  HdtRecord images{DType::F32, {n, 1, s, s}, std::vector<unsigned char>(plane * n * sizeof(float))};
  HdtRecord labels{DType::U8, {n, s, s}, std::vector<unsigned char>(plane * n)};
  std::ofstream index(dir / "index.csv");
  if (!index)
    throw std::runtime_error("save_dataset: cannot write " + (dir / "index.csv").string());
  index << "# size=" << d.size << " classes=" << d.classes << "\n";
  index << "id,seed,objects,small_object\n";
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto& smp = d.samples[i];
    std::memcpy(images.bytes.data() + i * plane * sizeof(float), smp.image.data(), plane * sizeof(float));
    std::memcpy(labels.bytes.data() + i * plane, smp.labels.labels.data(), plane);
    index << i << ',' << smp.seed << ',' << smp.objects.size() << ',' << (has_small_component(smp.labels, kSmallObjectFraction) ? 1 : 0) << '\n';
  }
  hdt_write_file(dir / "images.hdt", images);
  hdt_write_file(dir / "labels.hdt", labels);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.csv");
  if (!index)
    throw std::runtime_error("load_dataset: missing " + (dir / "index.csv").string());
  std::string line;
  std::getline(index, line);
  Dataset d;
  if (std::sscanf(line.c_str(), "# size=%d classes=%d", &d.size, &d.classes) != 2)
    throw FormatError("load_dataset: malformed index header in " + (dir / "index.csv").string());
  std::getline(index, line);
  std::vector<std::uint64_t> seeds;
  while (std::getline(index, line)) {
    if (line.empty())
      continue;
    std::istringstream row(line);
    std::string id, seed;
    std::getline(row, id, ',');
    std::getline(row, seed, ',');
    seeds.push_back(std::stoull(seed));
  }

  const auto images = hdt_read_file(dir / "images.hdt");
  const auto labels = hdt_read_file(dir / "labels.hdt");
  const auto s = static_cast<std::uint32_t>(d.size);
  if (images.dtype != DType::F32 || images.dims.size() != 4 || images.dims[1] != 1 || images.dims[2] != s ||
      images.dims[3] != s)
    throw FormatError("load_dataset: images.hdt has unexpected layout");
  const auto n = images.dims[0];
  if (labels.dtype != DType::U8 || labels.dims != std::vector<std::uint32_t>{n, s, s} || seeds.size() != n)
    throw FormatError("load_dataset: labels.hdt or index.csv does not match images.hdt");

  const std::size_t plane = static_cast<std::size_t>(s) * s;
  for (std::uint32_t i = 0; i < n; ++i) {
    SyntheticSample smp;
    smp.seed = seeds[i];
    smp.image.resize(static_cast<Eigen::Index>(plane));
    std::memcpy(smp.image.data(), images.bytes.data() + i * plane * sizeof(float), plane * sizeof(float));
    smp.labels = LabelMap(s, s);
    std::memcpy(smp.labels.labels.data(), labels.bytes.data() + i * plane, plane);
    d.samples.push_back(std::move(smp));
  }
  return d;
}

// ---------------------------------------------------------------------------
// HDT

namespace {

constexpr char kMagic[4] = {'H', 'D', 'T', '1'};

std::size_t element_size(DType t) {
  switch (t) {
  case DType::F32:
    return 4;
  case DType::F64:
    return 8;
  case DType::U8:
    return 1;
  }
  throw FormatError("hdt: unknown dtype code " + std::to_string(static_cast<int>(t)));
}

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw FormatError("hdt: truncated header");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

// Element-wise byte reversal on big-endian hosts; a no-op otherwise.
void to_little_endian(unsigned char* p, std::size_t n, std::size_t width) {
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < n; ++i)
      std::reverse(p + i * width, p + (i + 1) * width);
  else
    (void)p, (void)n, (void)width;
}

std::size_t product(const std::vector<std::uint32_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims)
    n *= d;
  return n;
}

} // namespace

std::size_t HdtRecord::numel() const { return product(dims); }

template <typename T>
Eigen::Array<T, Eigen::Dynamic, 1> HdtRecord::as() const {
  if (dtype != dtype_of<T>())
    throw FormatError("hdt: dtype mismatch on read");
  Eigen::Array<T, Eigen::Dynamic, 1> out(static_cast<Eigen::Index>(numel()));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

template Eigen::Array<float, Eigen::Dynamic, 1> HdtRecord::as<float>() const;
template Eigen::Array<double, Eigen::Dynamic, 1> HdtRecord::as<double>() const;
template Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> HdtRecord::as<std::uint8_t>() const;

void hdt_write(std::ostream& os, DType dtype, const std::vector<std::uint32_t>& dims, const void* data) {
  const std::size_t width = element_size(dtype);
  os.write(kMagic, 4);
  os.put(static_cast<char>(dtype));
  write_u32(os, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims)
    write_u32(os, d);
  const std::size_t n = product(dims);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n * width));
  } else {
    std::vector<unsigned char> buf(n * width);
    std::memcpy(buf.data(), data, buf.size());
    to_little_endian(buf.data(), n, width);
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  }
  if (!os)
    throw std::runtime_error("hdt: write failed");
}

HdtRecord hdt_read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4))
    throw FormatError("hdt: truncated header");
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("hdt: bad magic");
  const int code = is.get();
  if (code == std::char_traits<char>::eof())
    throw FormatError("hdt: truncated header");
  HdtRecord r;
  r.dtype = static_cast<DType>(code);
  const std::size_t width = element_size(r.dtype);
  const auto rank = read_u32(is);
  if (rank > 16)
    throw FormatError("hdt: implausible rank " + std::to_string(rank));
  for (std::uint32_t i = 0; i < rank; ++i)
    r.dims.push_back(read_u32(is));
  const std::size_t n = r.numel();
  r.bytes.resize(n * width);
  if (!is.read(reinterpret_cast<char*>(r.bytes.data()), static_cast<std::streamsize>(r.bytes.size())))
    throw FormatError("hdt: truncated payload");
  to_little_endian(r.bytes.data(), n, width);
  return r;
}

void hdt_write_file(const std::filesystem::path& path, const HdtRecord& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("hdt: cannot open " + path.string());
  if (r.bytes.size() != r.numel() * element_size(r.dtype))
    throw FormatError("hdt: record payload does not match its dims");
  hdt_write(os, r.dtype, r.dims, r.bytes.data());
}

HdtRecord hdt_read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("hdt: cannot open " + path.string());
  return hdt_read(is);
}

// ---------------------------------------------------------------------------
// PGM

void pgm_write(const std::filesystem::path& path, Eigen::Index height, Eigen::Index width, const std::uint8_t* pixels) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("pgm: cannot open " + path.string());
  os << "P5\n" << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels), static_cast<std::streamsize>(height * width));
}

void pgm_export_image(const std::filesystem::path& path, const Eigen::ArrayXf& image, Eigen::Index height,
                      Eigen::Index width) {
  if (image.size() != height * width)
    throw ShapeError("pgm_export_image: size does not match extent");
  const float lo = image.minCoeff(), hi = image.maxCoeff();
  const float scale = hi > lo ? 255.0f / (hi - lo) : 0.0f;
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> px =
      ((image - lo) * scale).round().max(0.0f).min(255.0f).cast<std::uint8_t>();
  pgm_write(path, height, width, px.data());
}

std::vector<std::filesystem::path> pgm_export_mask(const std::filesystem::path& stem, const BinaryMask& mask) {
  std::vector<std::filesystem::path> out;
  const auto plane = mask.shape.plane();
  for (Eigen::Index c = 0; c < mask.shape.channels; ++c) {
    Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> px =
        (mask.data.segment(c * plane, plane) != 0).cast<std::uint8_t>() * std::uint8_t(255);
    auto p = stem;
    p += "_c" + std::to_string(c) + ".pgm";
    pgm_write(p, mask.shape.height, mask.shape.width, px.data());
    out.push_back(p);
  }
  return out;
}

void pgm_export_labels(const std::filesystem::path& path, const LabelMap& labels, int classes) {
  const int step = 255 / std::max(1, classes);
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> px =
      (labels.labels.cast<int>() * step).min(255).cast<std::uint8_t>();
  pgm_write(path, labels.height, labels.width, px.data());
}

} // namespace hidiff::evalio
