#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hidiff {

/// Extent of a per-pixel map: H x W x C.
///
/// Storage is planar (channel-major): element (y, x, c) lives at
/// c*H*W + y*W + x, which is the same order as one sample of an NCHW tensor.
struct MapShape {
  Eigen::Index height = 0;
  Eigen::Index width = 0;
  Eigen::Index channels = 1;

  Eigen::Index plane() const { return height * width; }
  Eigen::Index size() const { return height * width * channels; }
  Eigen::Index index(Eigen::Index y, Eigen::Index x, Eigen::Index c) const { return c * plane() + y * width + x; }

  friend bool operator==(const MapShape&, const MapShape&) = default;
};

inline std::string to_string(const MapShape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

inline void require_same_shape(const MapShape& a, const MapShape& b, const char* what) {
  if (!(a == b))
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

/// Per-pixel Bernoulli parameters in [0, 1].
template <typename Scalar>
struct ProbMap {
  using Data = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  MapShape shape;
  Data data;

  ProbMap() = default;
  explicit ProbMap(MapShape s, Scalar fill = Scalar(0)) : shape(s), data(Data::Constant(s.size(), fill)) {}
  ProbMap(MapShape s, Data d) : shape(s), data(std::move(d)) {
    if (data.size() != shape.size())
      throw ShapeError("ProbMap: data size does not match shape " + to_string(shape));
  }

  Scalar& operator()(Eigen::Index y, Eigen::Index x, Eigen::Index c = 0) { return data[shape.index(y, x, c)]; }
  Scalar operator()(Eigen::Index y, Eigen::Index x, Eigen::Index c = 0) const { return data[shape.index(y, x, c)]; }

  bool valid() const { return (data >= Scalar(0)).all() && (data <= Scalar(1)).all(); }
};

/// Hard {0, 1} mask.
struct BinaryMask {
  using Data = Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>;

  MapShape shape;
  Data data;

  BinaryMask() = default;
  explicit BinaryMask(MapShape s, std::uint8_t fill = 0) : shape(s), data(Data::Constant(s.size(), fill)) {}
  BinaryMask(MapShape s, Data d) : shape(s), data(std::move(d)) {
    if (data.size() != shape.size())
      throw ShapeError("BinaryMask: data size does not match shape " + to_string(shape));
  }

  std::uint8_t& operator()(Eigen::Index y, Eigen::Index x, Eigen::Index c = 0) { return data[shape.index(y, x, c)]; }
  std::uint8_t operator()(Eigen::Index y, Eigen::Index x, Eigen::Index c = 0) const { return data[shape.index(y, x, c)]; }

  bool valid() const { return (data <= std::uint8_t(1)).all(); }

  template <typename Scalar>
  Eigen::Array<Scalar, Eigen::Dynamic, 1> as() const {
    return data.template cast<Scalar>();
  }
  template <typename Scalar>
  ProbMap<Scalar> to_prob() const {
    return ProbMap<Scalar>(shape, as<Scalar>());
  }
  Eigen::Index count() const { return data.template cast<Eigen::Index>().sum(); }
};

} // namespace hidiff
