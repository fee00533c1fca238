#pragma once

// Primitive differentiable operations. Each records its output on the tape
// of its inputs together with a closure that maps the output gradient back
// onto the inputs.

#include "hidiff/autodiff/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

namespace hidiff::ad {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using ColMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

namespace detail {

inline Index normalize_axis(Index axis, Index rank) {
  const Index a = axis < 0 ? axis + rank : axis;
  require(a >= 0 && a < rank, "axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  return a;
}

/// (outer, axis, inner) extents around one axis of a row-major shape.
inline std::array<Index, 3> split_at(const Shape& s, Index axis) {
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i)
    outer *= s[i];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i)
    inner *= s[i];
  return {outer, s[axis], inner};
}

inline void require_same(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "add");
  auto& tape = a.tape();
  return tape.record("add", Tensor<Scalar>(a.shape(), a.data() + b.data()), {a, b}, [&tape, a, b](const Array<Scalar>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "sub");
  auto& tape = a.tape();
  return tape.record("sub", Tensor<Scalar>(a.shape(), a.data() - b.data()), {a, b}, [&tape, a, b](const Array<Scalar>& g) {
    tape.accumulate(a, g);
    tape.accumulate(b, -g);
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  detail::require_same(a.shape(), b.shape(), "mul");
  auto& tape = a.tape();
  return tape.record("mul", Tensor<Scalar>(a.shape(), a.data() * b.data()), {a, b}, [&tape, a, b](const Array<Scalar>& g) {
    tape.accumulate(a, g * b.data());
    tape.accumulate(b, g * a.data());
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
  auto& tape = a.tape();
  return tape.record("scale", Tensor<Scalar>(a.shape(), a.data() * s), {a},
                     [&tape, a, s](const Array<Scalar>& g) { tape.accumulate(a, g * s); });
}

template <typename Scalar>
Var<Scalar> add_scalar(const Var<Scalar>& a, Scalar s) {
  auto& tape = a.tape();
  return tape.record("add_scalar", Tensor<Scalar>(a.shape(), a.data() + s), {a},
                     [&tape, a](const Array<Scalar>& g) { tape.accumulate(a, g); });
}

/// Clamp into [lo, hi]; gradient passes only strictly inside.
template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, Scalar lo, Scalar hi) {
  auto& tape = x.tape();
  return tape.record("clamp", Tensor<Scalar>(x.shape(), x.data().max(lo).min(hi)), {x}, [&tape, x, lo, hi](const Array<Scalar>& g) {
    tape.accumulate(x, ((x.data() > lo) && (x.data() < hi)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  auto& tape = x.tape();
  return tape.record("relu", Tensor<Scalar>(x.shape(), x.data().max(Scalar(0))), {x}, [&tape, x](const Array<Scalar>& g) {
    tape.accumulate(x, (x.data() > Scalar(0)).select(g, Scalar(0)));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  auto& tape = x.tape();
  Array<Scalar> y = Scalar(1) / (Scalar(1) + (-x.data()).exp());
  return tape.record("sigmoid", Tensor<Scalar>(x.shape(), y), {x},
                     [&tape, x, y](const Array<Scalar>& g) { tape.accumulate(x, g * y * (Scalar(1) - y)); });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  auto& tape = x.tape();
  const Array<Scalar> s = Scalar(1) / (Scalar(1) + (-x.data()).exp());
  return tape.record("silu", Tensor<Scalar>(x.shape(), x.data() * s), {x}, [&tape, x](const Array<Scalar>& g) {
    const Array<Scalar> s = Scalar(1) / (Scalar(1) + (-x.data()).exp());
    tape.accumulate(x, g * s * (Scalar(1) + x.data() * (Scalar(1) - s)));
  });
}

// ---------------------------------------------------------------------------
// Bias-style addition (the only broadcasting supported)

/// x[..., N] + b[N]
template <typename Scalar>
Var<Scalar> add_bias(const Var<Scalar>& x, const Var<Scalar>& b) {
  require(b.shape().size() == 1 && b.dim(0) == x.dim(-1), "add_bias: bias " + to_string(b.shape()) +
                                                             " does not match last axis of " + to_string(x.shape()));
  const Index n = b.dim(0), rows = x.numel() / n;
  auto& tape = x.tape();
  Tensor<Scalar> out(x.shape());
  Eigen::Map<RowMatrix<Scalar>>(out.data.data(), rows, n) =
      Eigen::Map<const RowMatrix<Scalar>>(x.data().data(), rows, n).rowwise() + b.data().matrix().transpose();
  return tape.record("add_bias", std::move(out), {x, b}, [&tape, x, b, rows, n](const Array<Scalar>& g) {
    tape.accumulate(x, g);
    if (b.requires_grad())
      tape.accumulate(b, Eigen::Map<const RowMatrix<Scalar>>(g.data(), rows, n).colwise().sum().transpose().array());
  });
}

/// x[N, C, ...] + b[N, C], broadcast over trailing axes.
template <typename Scalar>
Var<Scalar> add_channel_bias(const Var<Scalar>& x, const Var<Scalar>& b) {
  require(x.shape().size() >= 2 && b.shape() == Shape{x.dim(0), x.dim(1)},
          "add_channel_bias: bias " + to_string(b.shape()) + " does not match " + to_string(x.shape()));
  const Index planes = x.dim(0) * x.dim(1), inner = x.numel() / planes;
  auto& tape = x.tape();
  Tensor<Scalar> out(x.shape());
  Eigen::Map<ColMatrix<Scalar>>(out.data.data(), inner, planes) =
      Eigen::Map<const ColMatrix<Scalar>>(x.data().data(), inner, planes).rowwise() + b.data().matrix().transpose();
  return tape.record("add_channel_bias", std::move(out), {x, b}, [&tape, x, b, planes, inner](const Array<Scalar>& g) {
    tape.accumulate(x, g);
    if (b.requires_grad())
      tape.accumulate(b, Eigen::Map<const ColMatrix<Scalar>>(g.data(), inner, planes).colwise().sum().transpose().array());
  });
}

// ---------------------------------------------------------------------------
// Products

/// a[..., M, K] x b[K, N]: leading axes of `a` are flattened into rows.
template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a.shape().size() >= 2 && b.shape().size() == 2 && a.dim(-1) == b.dim(0),
          "matmul: incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index k = b.dim(0), n = b.dim(1), m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  Tensor<Scalar> out(out_shape);
  Eigen::Map<RowMatrix<Scalar>>(out.data.data(), m, n).noalias() =
      Eigen::Map<const RowMatrix<Scalar>>(a.data().data(), m, k) * Eigen::Map<const RowMatrix<Scalar>>(b.data().data(), k, n);
  auto& tape = a.tape();
  return tape.record("matmul", std::move(out), {a, b}, [&tape, a, b, m, k, n](const Array<Scalar>& g) {
    Eigen::Map<const RowMatrix<Scalar>> G(g.data(), m, n);
    if (auto* ga = tape.grad_buffer(a))
      Eigen::Map<RowMatrix<Scalar>>(ga->data(), m, k).noalias() +=
          G * Eigen::Map<const RowMatrix<Scalar>>(b.data().data(), k, n).transpose();
    if (auto* gb = tape.grad_buffer(b))
      Eigen::Map<RowMatrix<Scalar>>(gb->data(), k, n).noalias() +=
          Eigen::Map<const RowMatrix<Scalar>>(a.data().data(), m, k).transpose() * G;
  });
}

/// Batched product a[B, M, K] x b[B, K, N].
template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b) {
  require(a.shape().size() == 3 && b.shape().size() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: incompatible " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<Scalar> out({batch, m, n});
  for (Index i = 0; i < batch; ++i)
    Eigen::Map<RowMatrix<Scalar>>(out.data.data() + i * m * n, m, n).noalias() =
        Eigen::Map<const RowMatrix<Scalar>>(a.data().data() + i * m * k, m, k) *
        Eigen::Map<const RowMatrix<Scalar>>(b.data().data() + i * k * n, k, n);
  auto& tape = a.tape();
  return tape.record("bmm", std::move(out), {a, b}, [&tape, a, b, batch, m, k, n](const Array<Scalar>& g) {
    auto* ga = tape.grad_buffer(a);
    auto* gb = tape.grad_buffer(b);
    for (Index i = 0; i < batch; ++i) {
      Eigen::Map<const RowMatrix<Scalar>> G(g.data() + i * m * n, m, n);
      if (ga)
        Eigen::Map<RowMatrix<Scalar>>(ga->data() + i * m * k, m, k).noalias() +=
            G * Eigen::Map<const RowMatrix<Scalar>>(b.data().data() + i * k * n, k, n).transpose();
      if (gb)
        Eigen::Map<RowMatrix<Scalar>>(gb->data() + i * k * n, k, n).noalias() +=
            Eigen::Map<const RowMatrix<Scalar>>(a.data().data() + i * m * k, m, k).transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  require(numel(shape) == x.numel(), "reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
  auto& tape = x.tape();
  return tape.record("reshape", Tensor<Scalar>(std::move(shape), x.data()), {x},
                     [&tape, x](const Array<Scalar>& g) { tape.accumulate(x, g); });
}

namespace detail {

/// Gather indices such that out[i] = in[src[i]] for the given axis permutation.
inline std::vector<Index> permutation_sources(const Shape& in, const std::vector<Index>& perm, Shape& out) {
  const Index rank = static_cast<Index>(in.size());
  require(static_cast<Index>(perm.size()) == rank, "permute: permutation rank mismatch");
  std::vector<Index> strides(rank, 1);
  for (Index i = rank - 1; i > 0; --i)
    strides[i - 1] = strides[i] * in[i];
  out.assign(rank, 0);
  std::vector<bool> seen(rank, false);
  for (Index i = 0; i < rank; ++i) {
    require(perm[i] >= 0 && perm[i] < rank && !seen[perm[i]], "permute: invalid permutation");
    seen[perm[i]] = true;
    out[i] = in[perm[i]];
  }
  const Index total = numel(in);
  std::vector<Index> src(total);
  std::vector<Index> idx(rank, 0);
  for (Index flat = 0; flat < total; ++flat) {
    Index s = 0;
    for (Index d = 0; d < rank; ++d)
      s += idx[d] * strides[perm[d]];
    src[flat] = s;
    for (Index d = rank - 1; d >= 0; --d) {
      if (++idx[d] < out[d])
        break;
      idx[d] = 0;
    }
  }
  return src;
}

} // namespace detail

template <typename Scalar>
Var<Scalar> permute(const Var<Scalar>& x, const std::vector<Index>& perm) {
  Shape out_shape;
  auto src = detail::permutation_sources(x.shape(), perm, out_shape);
  Tensor<Scalar> out(out_shape);
  for (Index i = 0; i < out.numel(); ++i)
    out.data[i] = x.data()[src[i]];
  auto& tape = x.tape();
  return tape.record("permute", std::move(out), {x}, [&tape, x, src = std::move(src)](const Array<Scalar>& g) {
    if (auto* gx = tape.grad_buffer(x))
      for (Index i = 0; i < g.size(); ++i)
        (*gx)[src[i]] += g[i];
  });
}

template <typename Scalar>
Var<Scalar> concat(const std::vector<Var<Scalar>>& parts, Index axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  axis = detail::normalize_axis(axis, static_cast<Index>(first.size()));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    require(s.size() == first.size(), "concat: rank mismatch");
    s[axis] = first[axis];
    require(s == first, "concat: shapes differ off the concat axis");
    out_shape[axis] += p.dim(axis);
  }
  const auto [outer, total, inner] = detail::split_at(out_shape, axis);
  Tensor<Scalar> out(out_shape);
  Index offset = 0;
  for (const auto& p : parts) {
    const Index chunk = p.dim(axis) * inner;
    for (Index o = 0; o < outer; ++o)
      out.data.segment(o * total * inner + offset, chunk) = p.data().segment(o * chunk, chunk);
    offset += chunk;
  }
  auto& tape = parts.front().tape();
  return tape.record("concat", std::move(out), parts, [&tape, parts, outer = outer, total = total, inner = inner, axis](const Array<Scalar>& g) {
    Index offset = 0;
    for (const auto& p : parts) {
      const Index chunk = p.dim(axis) * inner;
      if (auto* gp = tape.grad_buffer(p))
        for (Index o = 0; o < outer; ++o)
          gp->segment(o * chunk, chunk) += g.segment(o * total * inner + offset, chunk);
      offset += chunk;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  auto& tape = x.tape();
  const Index n = x.numel();
  return tape.record("sum", Tensor<Scalar>({}, Array<Scalar>::Constant(1, x.data().sum())), {x},
                     [&tape, x, n](const Array<Scalar>& g) { tape.accumulate(x, Array<Scalar>::Constant(n, g[0])); });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  auto& tape = x.tape();
  const Index n = x.numel();
  return tape.record("mean", Tensor<Scalar>({}, Array<Scalar>::Constant(1, x.data().mean())), {x},
                     [&tape, x, n](const Array<Scalar>& g) {
                       tape.accumulate(x, Array<Scalar>::Constant(n, g[0] / static_cast<Scalar>(n)));
                     });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& x, Index axis) {
  axis = detail::normalize_axis(axis, static_cast<Index>(x.shape().size()));
  const auto [outer, len, inner] = detail::split_at(x.shape(), axis);
  Tensor<Scalar> out(x.shape());
  const auto& in = x.data();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * len * inner + i;
      Scalar mx = in[base];
      for (Index a = 1; a < len; ++a)
        mx = std::max(mx, in[base + a * inner]);
      Scalar z = 0;
      for (Index a = 0; a < len; ++a)
        z += (out.data[base + a * inner] = std::exp(in[base + a * inner] - mx));
      for (Index a = 0; a < len; ++a)
        out.data[base + a * inner] /= z;
    }
  Array<Scalar> y = out.data;
  auto& tape = x.tape();
  return tape.record("softmax", std::move(out), {x},
                     [&tape, x, y = std::move(y), outer = outer, len = len, inner = inner](const Array<Scalar>& g) {
                       Array<Scalar> gx(y.size());
                       for (Index o = 0; o < outer; ++o)
                         for (Index i = 0; i < inner; ++i) {
                           const Index base = o * len * inner + i;
                           Scalar dot = 0;
                           for (Index a = 0; a < len; ++a)
                             dot += g[base + a * inner] * y[base + a * inner];
                           for (Index a = 0; a < len; ++a)
                             gx[base + a * inner] = y[base + a * inner] * (g[base + a * inner] - dot);
                         }
                       tape.accumulate(x, gx);
                     });
}

/// Normalizes over the last axis, then applies gain and bias of that width.
template <typename Scalar>
Var<Scalar> layer_norm(const Var<Scalar>& x, const Var<Scalar>& gain, const Var<Scalar>& bias, Scalar eps = Scalar(1e-5)) {
  const Index d = x.dim(-1), rows = x.numel() / d;
  require(gain.shape() == Shape{d} && bias.shape() == Shape{d}, "layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
  Eigen::Map<const RowMatrix<Scalar>> X(x.data().data(), rows, d);
  RowMatrix<Scalar> xhat(rows, d);
  Array<Scalar> inv_std(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar mu = X.row(r).mean();
    const Scalar var = (X.row(r).array() - mu).square().mean();
    inv_std[r] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (X.row(r).array() - mu) * inv_std[r];
  }
  Tensor<Scalar> out(x.shape());
  Eigen::Map<RowMatrix<Scalar>> Y(out.data.data(), rows, d);
  Y = (xhat.array().rowwise() * gain.data().transpose()).rowwise() + bias.data().transpose();
  auto& tape = x.tape();
  return tape.record("layer_norm", std::move(out), {x, gain, bias},
                     [&tape, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](const Array<Scalar>& g) {
                       Eigen::Map<const RowMatrix<Scalar>> G(g.data(), rows, d);
                       if (gain.requires_grad())
                         tape.accumulate(gain, (G.array() * xhat.array()).colwise().sum().transpose());
                       if (bias.requires_grad())
                         tape.accumulate(bias, G.array().colwise().sum().transpose());
                       if (auto* gx = tape.grad_buffer(x)) {
                         Eigen::Map<RowMatrix<Scalar>> GX(gx->data(), rows, d);
                         const RowMatrix<Scalar> dxhat = (G.array().rowwise() * gain.data().transpose()).matrix();
                         for (Index r = 0; r < rows; ++r) {
                           const Scalar s1 = dxhat.row(r).sum();
                           const Scalar s2 = dxhat.row(r).dot(xhat.row(r));
                           GX.row(r).array() += inv_std[r] / static_cast<Scalar>(d) *
                                                (static_cast<Scalar>(d) * dxhat.row(r).array() - s1 - xhat.row(r).array() * s2);
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// Spatial ops on NCHW tensors

namespace detail {

/// Unfolds one sample [C, H, W] into a column-major [H*W, C*k*k] patch matrix.
template <typename Scalar>
void im2col(const Scalar* x, Index c_in, Index h, Index w, Index k, ColMatrix<Scalar>& cols) {
  const Index pad = k / 2;
  cols.resize(h * w, c_in * k * k);
  for (Index c = 0; c < c_in; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* col = cols.col((c * k + ky) * k + kx).data();
        const Scalar* plane = x + c * h * w;
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + ky - pad;
          Scalar* dst = col + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, Scalar(0));
            continue;
          }
          for (Index xx = 0; xx < w; ++xx) {
            const Index sx = xx + kx - pad;
            dst[xx] = (sx < 0 || sx >= w) ? Scalar(0) : plane[sy * w + sx];
          }
        }
      }
}

template <typename Scalar>
void col2im(const ColMatrix<Scalar>& cols, Index c_in, Index h, Index w, Index k, Scalar* dx) {
  const Index pad = k / 2;
  for (Index c = 0; c < c_in; ++c)
    for (Index ky = 0; ky < k; ++ky)
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* col = cols.col((c * k + ky) * k + kx).data();
        Scalar* plane = dx + c * h * w;
        for (Index y = 0; y < h; ++y) {
          const Index sy = y + ky - pad;
          if (sy < 0 || sy >= h)
            continue;
          for (Index xx = 0; xx < w; ++xx) {
            const Index sx = xx + kx - pad;
            if (sx >= 0 && sx < w)
              plane[sy * w + sx] += col[y * w + xx];
          }
        }
      }
}

} // namespace detail

/// Same-padded, stride-1 convolution: x[N, C, H, W] * w[O, C, k, k] + b[O], k odd.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  require(x.shape().size() == 4 && weight.shape().size() == 4 && weight.dim(1) == x.dim(1) && weight.dim(2) == weight.dim(3) &&
              weight.dim(2) % 2 == 1,
          "conv2d: incompatible input " + to_string(x.shape()) + " and weight " + to_string(weight.shape()));
  require(bias.shape() == Shape{weight.dim(0)}, "conv2d: bias must have shape [" + std::to_string(weight.dim(0)) + "]");
  const Index n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3), c_out = weight.dim(0), k = weight.dim(2);
  const Index hw = h * w, patch = c_in * k * k;
  Tensor<Scalar> out({n, c_out, h, w});
  Eigen::Map<const ColMatrix<Scalar>> W(weight.data().data(), patch, c_out);
  std::vector<ColMatrix<Scalar>> cols(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    detail::im2col(x.data().data() + i * c_in * hw, c_in, h, w, k, cols[i]);
    Eigen::Map<ColMatrix<Scalar>> O(out.data.data() + i * c_out * hw, hw, c_out);
    O.noalias() = cols[i] * W;
    O.rowwise() += bias.data().matrix().transpose();
  }
  auto& tape = x.tape();
  return tape.record("conv2d", std::move(out), {x, weight, bias},
                     [&tape, x, weight, bias, cols = std::move(cols), n, c_in, h, w, c_out, k, hw, patch](const Array<Scalar>& g) {
                       Eigen::Map<const ColMatrix<Scalar>> W(weight.data().data(), patch, c_out);
                       auto* gw = tape.grad_buffer(weight);
                       auto* gb = tape.grad_buffer(bias);
                       auto* gx = tape.grad_buffer(x);
                       ColMatrix<Scalar> dcols;
                       for (Index i = 0; i < n; ++i) {
                         Eigen::Map<const ColMatrix<Scalar>> G(g.data() + i * c_out * hw, hw, c_out);
                         if (gw)
                           Eigen::Map<ColMatrix<Scalar>>(gw->data(), patch, c_out).noalias() += cols[i].transpose() * G;
                         if (gb)
                           *gb += G.colwise().sum().transpose().array();
                         if (gx) {
                           dcols.noalias() = G * W.transpose();
                           detail::col2im(dcols, c_in, h, w, k, gx->data() + i * c_in * hw);
                         }
                       }
                     });
}

/// 2x2 average pooling with stride 2 (H and W must be even).
template <typename Scalar>
Var<Scalar> avg_pool2(const Var<Scalar>& x) {
  require(x.shape().size() == 4 && x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0, "avg_pool2: need NCHW with even H, W, got " + to_string(x.shape()));
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / 2, wo = w / 2;
  Tensor<Scalar> out({x.dim(0), x.dim(1), ho, wo});
  const auto& in = x.data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < ho; ++y)
      for (Index xx = 0; xx < wo; ++xx) {
        const Index s = p * h * w + 2 * y * w + 2 * xx;
        out.data[p * ho * wo + y * wo + xx] = Scalar(0.25) * (in[s] + in[s + 1] + in[s + w] + in[s + w + 1]);
      }
  auto& tape = x.tape();
  return tape.record("avg_pool2", std::move(out), {x}, [&tape, x, planes, h, w, ho, wo](const Array<Scalar>& g) {
    auto* gx = tape.grad_buffer(x);
    if (!gx)
      return;
    for (Index p = 0; p < planes; ++p)
      for (Index y = 0; y < ho; ++y)
        for (Index xx = 0; xx < wo; ++xx) {
          const Scalar v = Scalar(0.25) * g[p * ho * wo + y * wo + xx];
          const Index s = p * h * w + 2 * y * w + 2 * xx;
          (*gx)[s] += v;
          (*gx)[s + 1] += v;
          (*gx)[s + w] += v;
          (*gx)[s + w + 1] += v;
        }
  });
}

/// Nearest-neighbour 2x upsampling.
template <typename Scalar>
Var<Scalar> upsample2(const Var<Scalar>& x) {
  require(x.shape().size() == 4, "upsample2: need NCHW, got " + to_string(x.shape()));
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = 2 * h, wo = 2 * w;
  Tensor<Scalar> out({x.dim(0), x.dim(1), ho, wo});
  const auto& in = x.data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < ho; ++y)
      for (Index xx = 0; xx < wo; ++xx)
        out.data[p * ho * wo + y * wo + xx] = in[p * h * w + (y / 2) * w + xx / 2];
  auto& tape = x.tape();
  return tape.record("upsample2", std::move(out), {x}, [&tape, x, planes, h, w, ho, wo](const Array<Scalar>& g) {
    auto* gx = tape.grad_buffer(x);
    if (!gx)
      return;
    for (Index p = 0; p < planes; ++p)
      for (Index y = 0; y < ho; ++y)
        for (Index xx = 0; xx < wo; ++xx)
          (*gx)[p * h * w + (y / 2) * w + xx / 2] += g[p * ho * wo + y * wo + xx];
  });
}

namespace detail {

struct LerpTap {
  Index lo, hi;
  double w_lo, w_hi;
};

/// Half-pixel-centre linear interpolation taps (align_corners = false).
inline std::vector<LerpTap> lerp_taps(Index in, Index out) {
  std::vector<LerpTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (Index i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index lo = static_cast<Index>(std::floor(src));
    const Index hi = std::min(lo + 1, in - 1);
    const double frac = src - static_cast<double>(lo);
    taps[i] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

} // namespace detail

/// Bilinear resize of NCHW planes to (out_h, out_w).
template <typename Scalar>
Var<Scalar> resize_bilinear(const Var<Scalar>& x, Index out_h, Index out_w) {
  require(x.shape().size() == 4 && out_h > 0 && out_w > 0, "resize_bilinear: need NCHW input and positive size");
  const Index planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ty = detail::lerp_taps(h, out_h);
  auto tx = detail::lerp_taps(w, out_w);
  Tensor<Scalar> out({x.dim(0), x.dim(1), out_h, out_w});
  const auto& in = x.data();
  for (Index p = 0; p < planes; ++p)
    for (Index y = 0; y < out_h; ++y)
      for (Index xx = 0; xx < out_w; ++xx) {
        const auto& a = ty[y];
        const auto& b = tx[xx];
        const Scalar* s = in.data() + p * h * w;
        out.data[p * out_h * out_w + y * out_w + xx] = static_cast<Scalar>(
            a.w_lo * (b.w_lo * s[a.lo * w + b.lo] + b.w_hi * s[a.lo * w + b.hi]) +
            a.w_hi * (b.w_lo * s[a.hi * w + b.lo] + b.w_hi * s[a.hi * w + b.hi]));
      }
  auto& tape = x.tape();
  return tape.record("resize_bilinear", std::move(out), {x},
                     [&tape, x, ty = std::move(ty), tx = std::move(tx), planes, h, w, out_h, out_w](const Array<Scalar>& g) {
                       auto* gx = tape.grad_buffer(x);
                       if (!gx)
                         return;
                       for (Index p = 0; p < planes; ++p)
                         for (Index y = 0; y < out_h; ++y)
                           for (Index xx = 0; xx < out_w; ++xx) {
                             const double v = g[p * out_h * out_w + y * out_w + xx];
                             const auto& a = ty[y];
                             const auto& b = tx[xx];
                             Scalar* d = gx->data() + p * h * w;
                             d[a.lo * w + b.lo] += static_cast<Scalar>(v * a.w_lo * b.w_lo);
                             d[a.lo * w + b.hi] += static_cast<Scalar>(v * a.w_lo * b.w_hi);
                             d[a.hi * w + b.lo] += static_cast<Scalar>(v * a.w_hi * b.w_lo);
                             d[a.hi * w + b.hi] += static_cast<Scalar>(v * a.w_hi * b.w_hi);
                           }
                     });
}

} // namespace hidiff::ad
