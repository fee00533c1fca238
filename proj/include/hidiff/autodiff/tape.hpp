#pragma once

#include "hidiff/rng.hpp"

#include <Eigen/Core>

#include <cassert>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace hidiff::ad {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

inline Index numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

class ShapeMismatch : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major n-d array.
template <typename Scalar>
struct Tensor {
  Shape shape;
  Array<Scalar> data;

  Tensor() = default;
  explicit Tensor(Shape s, Scalar fill = Scalar(0)) : shape(std::move(s)), data(Array<Scalar>::Constant(ad::numel(shape), fill)) {}
  Tensor(Shape s, Array<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != ad::numel(shape))
      throw ShapeMismatch("Tensor: " + std::to_string(data.size()) + " values for shape " + to_string(shape));
  }

  Index numel() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index dim(Index i) const { return shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }

  static Tensor randn(Shape s, Rng& rng, double stddev) {
    Tensor t(std::move(s));
    for (Index i = 0; i < t.numel(); ++i)
      t.data[i] = static_cast<Scalar>(stddev * rng.normal());
    return t;
  }
};

/// A named trainable tensor with an accumulated gradient.
template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Array<Scalar> grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor<Scalar> v) : name(std::move(n)), value(std::move(v)), grad(Array<Scalar>::Zero(value.numel())) {}

  void zero_grad() { grad.setZero(value.numel()); }
};

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename Scalar>
class Var {
public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<Scalar>& value() const { return tape_->value(id_); }
  const Array<Scalar>& data() const { return value().data; }
  const Shape& shape() const { return value().shape; }
  Index dim(Index i) const { return value().dim(i); }
  Index numel() const { return value().numel(); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  /// Gradient after Tape::backward; empty if none flowed here.
  const Array<Scalar>& grad() const { return tape_->grad(id_); }
  Scalar item() const {
    assert(numel() == 1);
    return data()[0];
  }

  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Ordered record of primitive operations.
///
/// Values are appended during the forward pass; backward() walks the record
/// in exact reverse order, so repeated forward+backward runs are bit-identical.
template <typename Scalar>
class Tape {
public:
  /// Receives the gradient of the node's output; pushes into input gradients.
  using BackwardFn = std::function<void(const Array<Scalar>& out_grad)>;

  Tape() = default;
  /// With `track_grads` false every parameter enters as a constant, so a
  /// forward pass records no backward closures and leaves parameters untouched.
  explicit Tape(bool track_grads) : track_grads_(track_grads) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<Scalar> constant(Tensor<Scalar> value) { return push(std::move(value), false, nullptr, nullptr, "constant"); }

  /// Leaf whose gradient is kept on the tape (read it through Var::grad).
  Var<Scalar> variable(Tensor<Scalar> value) { return push(std::move(value), true, nullptr, nullptr, "variable"); }

  /// Leaf bound to a parameter; gradients accumulate into `p.grad` unless the
  /// parameter is frozen, in which case it enters as a constant.
  Var<Scalar> param(Parameter<Scalar>& p) {
    if (!p.trainable || !track_grads_)
      return constant(p.value);
    return push(p.value, true, nullptr, &p, "param");
  }

  /// Records the output of an op. The backward function is kept only if some
  /// input requires a gradient.
  Var<Scalar> record(std::string_view op, Tensor<Scalar> value, std::initializer_list<Var<Scalar>> inputs,
                     BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var<Scalar>>(inputs), std::move(backward));
  }

  Var<Scalar> record(std::string_view op, Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs,
                     BackwardFn backward) {
    if (!value.data.allFinite())
      throw NonFiniteError(std::string("non-finite output from ") + std::string(op));
    bool needs = false;
    for (const auto& in : inputs) {
      if (in.valid() && &in.tape() != this)
        throw std::logic_error(std::string(op) + ": input recorded on a different tape");
      needs = needs || (in.valid() && in.requires_grad());
    }
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr, nullptr, op);
  }

  /// Accumulates `g` into the gradient of `v` if it requires one.
  template <typename Expr>
  void accumulate(const Var<Scalar>& v, const Expr& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad)
      return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Mutable gradient buffer for scatter-style accumulation, or nullptr.
  Array<Scalar>* grad_buffer(const Var<Scalar>& v) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad)
      return nullptr;
    if (n.grad.size() == 0)
      n.grad = Array<Scalar>::Zero(n.value.numel());
    return &n.grad;
  }

  /// Reverse pass from a single-element root.
  void backward(const Var<Scalar>& root) {
    if (root.numel() != 1)
      throw std::invalid_argument("backward: root must hold a single value");
    Node& r = nodes_[root.id()];
    if (!r.requires_grad)
      return;
    r.grad = Array<Scalar>::Ones(1);
    for (std::size_t i = root.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0)
        continue;
      if (n.backward)
        n.backward(n.grad);
      if (n.param) {
        if (!n.grad.allFinite())
          throw NonFiniteError("non-finite gradient for parameter " + n.param->name);
        if (n.param->grad.size() != n.grad.size())
          n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Array<Scalar>& grad(std::size_t id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t id) const { return nodes_[id].op; }

private:
  struct Node {
    Tensor<Scalar> value;
    Array<Scalar> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<Scalar>* param = nullptr;
    std::string_view op;
  };

  Var<Scalar> push(Tensor<Scalar> value, bool requires_grad, BackwardFn fn, Parameter<Scalar>* p, std::string_view op) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, std::move(fn), p, op});
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  bool track_grads_ = true;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok)
    throw ShapeMismatch(msg);
}

} // namespace hidiff::ad
