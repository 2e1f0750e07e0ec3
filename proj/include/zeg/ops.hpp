#pragma once

// Differentiable operators over Graph-recorded tensors.
//
// Broadcasting follows the usual right-aligned rule: two extents are compatible
// when they are equal or one of them is 1. Reductions over an axis keep that
// axis with extent 1 so results broadcast back against their input.

#include "zeg/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace zeg {

/// Lower clamp applied to log() inputs.
inline constexpr double kLogFloor = 1e-12;

namespace detail {

inline Index normalize_axis(Index axis, Index rank, const char* op) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

inline Index product(const Shape& s, std::size_t begin, std::size_t end) {
  Index p = 1;
  for (std::size_t i = begin; i < end; ++i) p *= s[i];
  return p;
}

/// Maps flat output indices to flat indices of a broadcast operand.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& src, const Shape& out) {
    if (src == out) {
      kind_ = Kind::Identity;
      return;
    }
    std::size_t lead = 0;
    while (lead < src.size() && src[lead] == 1) ++lead;
    const std::size_t tail = src.size() - lead;
    if (tail <= out.size() && std::equal(src.begin() + static_cast<std::ptrdiff_t>(lead), src.end(),
                                         out.end() - static_cast<std::ptrdiff_t>(tail))) {
      kind_ = Kind::Tile;
      modulo_ = numel(src);
      return;
    }
    kind_ = Kind::Gather;
    const std::size_t rank = out.size();
    const std::size_t offset = rank - src.size();
    std::vector<Index> stride(rank, 0);
    Index s = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
      stride[i + offset] = src[i] == 1 ? 0 : s;
      s *= src[i];
    }
    const Index n = numel(out);
    map_.resize(static_cast<std::size_t>(n));
    std::vector<Index> idx(rank, 0);
    Index cur = 0;
    for (Index flat = 0; flat < n; ++flat) {
      map_[static_cast<std::size_t>(flat)] = cur;
      for (std::size_t ax = rank; ax-- > 0;) {
        ++idx[ax];
        cur += stride[ax];
        if (idx[ax] < out[ax]) break;
        cur -= stride[ax] * out[ax];
        idx[ax] = 0;
      }
    }
  }

  Index operator()(Index i) const {
    switch (kind_) {
      case Kind::Identity:
        return i;
      case Kind::Tile:
        return i % modulo_;
      default:
        return map_[static_cast<std::size_t>(i)];
    }
  }

  bool identity() const { return kind_ == Kind::Identity; }
  bool tiled() const { return kind_ == Kind::Tile; }

 private:
  enum class Kind { Identity, Tile, Gather };
  Kind kind_ = Kind::Identity;
  Index modulo_ = 1;
  std::vector<Index> map_;
};

}  // namespace detail

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[i] = ea == 1 ? eb : ea;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename S, typename F, typename DA, typename DB>
Tensor<S> broadcast_binary(const char* op, const Tensor<S>& a, const Tensor<S>& b, F f, DA dfa, DB dfb) {
  if (&a.graph() != &b.graph()) throw std::invalid_argument(std::string(op) + ": operands on different graphs");
  Graph<S>& g = a.graph();
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  auto ma = std::make_shared<const BroadcastMap>(a.shape(), out_shape);
  auto mb = std::make_shared<const BroadcastMap>(b.shape(), out_shape);
  NDArray<S> out(out_shape);
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  const Index n = out.size();
  if (ma->identity() && mb->identity()) {
    for (Index i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
  } else {
    for (Index i = 0; i < n; ++i) out[i] = f(av[(*ma)(i)], bv[(*mb)(i)]);
  }
  const Index ia = a.node_id();
  const Index ib = b.node_id();
  return g.record(op, {ia, ib}, std::move(out), [ia, ib, ma, mb, dfa, dfb, n](Graph<S>& gr, Index self) {
    const auto& gy = gr.node(self).grad.data;
    const auto& x = gr.value(ia).data;
    const auto& y = gr.value(ib).data;
    if (gr.requires_grad(ia)) {
      auto& ga = gr.grad_buffer(ia).data;
      for (Index i = 0; i < n; ++i) {
        const Index ja = (*ma)(i);
        ga[ja] += gy[i] * dfa(x[ja], y[(*mb)(i)]);
      }
    }
    if (gr.requires_grad(ib)) {
      auto& gb = gr.grad_buffer(ib).data;
      for (Index i = 0; i < n; ++i) {
        const Index jb = (*mb)(i);
        gb[jb] += gy[i] * dfb(x[(*ma)(i)], y[jb]);
      }
    }
  });
}

/// Add, subtract or multiply where each operand is either full-size or tiles
/// the output (its shape is a suffix of the output shape).
template <typename S>
Tensor<S> tiled_binary(const char* op, int kind, const Tensor<S>& a, const Tensor<S>& b, const Shape& out_shape) {
  using Arr = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic>;
  using AMap = Eigen::Map<Arr>;
  using CAMap = Eigen::Map<const Arr>;
  const Index n = numel(out_shape);
  const Index na = a.size();
  const Index nb = b.size();
  // Column-major [inner x reps] views; a tiled operand is one column.
  NDArray<S> out(out_shape);
  const Index inner = std::min(na, nb);
  const Index reps = n / std::max<Index>(inner, 1);
  AMap o(out.data.data(), inner, reps);
  const auto& av = a.value();
  const auto& bv = b.value();
  if (na == n && nb == n) {
    CAMap x(av.data.data(), inner, reps), y(bv.data.data(), inner, reps);
    if (kind == 0) o = x + y;
    else if (kind == 1) o = x - y;
    else o = x * y;
  } else if (na == n) {
    CAMap x(av.data.data(), inner, reps);
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> y(bv.data.data(), inner);
    if (kind == 0) o = x.colwise() + y;
    else if (kind == 1) o = x.colwise() - y;
    else o = x.colwise() * y;
  } else {
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> x(av.data.data(), inner);
    CAMap y(bv.data.data(), inner, reps);
    if (kind == 0) o = y.colwise() + x;
    else if (kind == 1) o = (-y).colwise() + x;
    else o = y.colwise() * x;
  }
  const Index ia = a.node_id();
  const Index ib = b.node_id();
  return a.graph().record(op, {ia, ib}, std::move(out), [ia, ib, kind, inner, reps, na, nb](Graph<S>& gr, Index self) {
    CAMap gy(gr.node(self).grad.data.data(), inner, reps);
    auto push = [&](Index id, Index len, const S* other, Index other_len, bool second) {
      if (!gr.requires_grad(id)) return;
      S* gp = gr.grad_buffer(id).data.data();
      const S sign = (second && kind == 1) ? S(-1) : S(1);
      if (kind != 2) {
        if (len == inner * reps) AMap(gp, inner, reps) += sign * gy;
        else Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(gp, inner) += sign * gy.rowwise().sum();
        return;
      }
      if (len == inner * reps) {
        if (other_len == len) AMap(gp, inner, reps) += gy * CAMap(other, inner, reps);
        else AMap(gp, inner, reps) += gy.colwise() * Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(other, inner);
      } else {
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(gp, inner) += (gy * CAMap(other, inner, reps)).rowwise().sum();
      }
    };
    push(ia, na, gr.value(ib).data.data(), nb, false);
    push(ib, nb, gr.value(ia).data.data(), na, true);
  });
}

/// `deriv(x, y)` returns dy/dx given the input and output element.
template <typename S, typename F, typename D>
Tensor<S> unary(const char* op, const Tensor<S>& x, F f, D deriv) {
  Graph<S>& g = x.graph();
  NDArray<S> out(x.shape());
  const auto& xv = x.value().data;
  for (Index i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  const Index ix = x.node_id();
  return g.record(op, {ix}, std::move(out), [ix, deriv](Graph<S>& gr, Index self) {
    const auto& node = gr.node(self);
    const auto& gy = node.grad.data;
    const auto& yv = node.value.data;
    const auto& xs = gr.value(ix).data;
    auto& gx = gr.grad_buffer(ix).data;
    for (Index i = 0; i < gy.size(); ++i) gx[i] += gy[i] * deriv(xs[i], yv[i]);
  });
}

}  // namespace detail

enum class BinaryKind { Add, Sub, Mul };

template <typename S>
Tensor<S> elementwise(const Tensor<S>& a, const Tensor<S>& b, BinaryKind kind) {
  static constexpr const char* names[] = {"add", "sub", "mul"};
  if (&a.graph() == &b.graph()) {
    const Shape out = broadcast_shape(a.shape(), b.shape());
    const detail::BroadcastMap ma(a.shape(), out), mb(b.shape(), out);
    const bool a_full = ma.identity(), b_full = mb.identity();
    if ((a_full || ma.tiled()) && (b_full || mb.tiled()) && (a_full || b_full) && a.size() > 0 && b.size() > 0) {
      return detail::tiled_binary(names[static_cast<int>(kind)], static_cast<int>(kind), a, b, out);
    }
  }
  switch (kind) {
    case BinaryKind::Add:
      return detail::broadcast_binary(
          "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); }, [](S, S) { return S(1); });
    case BinaryKind::Sub:
      return detail::broadcast_binary(
          "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); }, [](S, S) { return S(-1); });
    case BinaryKind::Mul:
      return detail::broadcast_binary(
          "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; }, [](S x, S) { return x; });
  }
  throw std::invalid_argument("elementwise: unknown kind");
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise(a, b, BinaryKind::Add);
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise(a, b, BinaryKind::Sub);
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return elementwise(a, b, BinaryKind::Mul);
}
template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  return add(a, b);
}
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  return sub(a, b);
}
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) {
  return mul(a, b);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  return detail::unary("scale", x, [c](S v) { return c * v; }, [c](S, S) { return c; });
}

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& x, S c) {
  return detail::unary("add_scalar", x, [c](S v) { return v + c; }, [](S, S) { return S(1); });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return detail::unary("neg", x, [](S v) { return -v; }, [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& x) {
  return detail::unary(
      "abs", x, [](S v) { return std::abs(v); }, [](S v, S) { return v > 0 ? S(1) : (v < 0 ? S(-1) : S(0)); });
}

/// Natural log with the input clamped to at least kLogFloor; the clamped
/// region has zero gradient.
template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  const S floor = static_cast<S>(kLogFloor);
  return detail::unary(
      "log", x, [floor](S v) { return std::log(std::max(v, floor)); },
      [floor](S v, S) { return v > floor ? S(1) / v : S(0); });
}

template <typename S>
Tensor<S> power(const Tensor<S>& x, S p) {
  const auto xv = x.value().data.array();
  NDArray<S> out(x.shape());
  auto o = out.data.array();
  if (p == S(0)) o.setOnes();
  else if (p == S(1)) o = xv;
  else if (p == S(2)) o = xv.square();
  else if (p == S(0.5)) o = xv.sqrt();
  else if (p == S(-0.5)) o = xv.rsqrt();
  else o = xv.pow(p);
  const Index ix = x.node_id();
  return x.graph().record("power", {ix}, std::move(out), [ix, p](Graph<S>& gr, Index self) {
    if (p == S(0)) return;
    const auto& node = gr.node(self);
    const auto gy = node.grad.data.array();
    const auto y = node.value.data.array();
    const auto v = gr.value(ix).data.array();
    auto gx = gr.grad_buffer(ix).data.array();
    if (p == S(1)) gx += gy;
    else if (p == S(2)) gx += S(2) * gy * v;
    else if (p == S(0.5)) gx += S(0.5) * gy / y;
    else if (p == S(-0.5)) gx += S(-0.5) * gy * y.cube();
    else gx += p * gy * v.pow(p - S(1));
  });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::unary("exp", x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary(
      "sigmoid", x,
      [](S v) {
        if (v >= 0) return S(1) / (S(1) + std::exp(-v));
        const S e = std::exp(v);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename S>
Tensor<S> gelu(const Tensor<S>& x) {
  using Vec = Eigen::Array<S, Eigen::Dynamic, 1>;
  static constexpr S c = S(0.7978845608028654);
  static constexpr S k = S(0.044715);
  const auto xv = x.value().data.array();
  auto t = std::make_shared<Vec>((c * (xv + k * xv.cube())).tanh());
  NDArray<S> out(x.shape());
  out.data.array() = S(0.5) * xv * (S(1) + *t);
  const Index ix = x.node_id();
  return x.graph().record("gelu", {ix}, std::move(out), [ix, t](Graph<S>& gr, Index self) {
    const auto gy = gr.node(self).grad.data.array();
    const auto v = gr.value(ix).data.array();
    gr.grad_buffer(ix).data.array() +=
        gy * (S(0.5) * (S(1) + *t) + S(0.5) * v * (S(1) - t->square()) * c * (S(1) + S(3) * k * v.square()));
  });
}

// ---------------------------------------------------------------------------
// Reductions and softmax

template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  NDArray<S> out(Shape{});
  out[0] = x.value().data.sum();
  const Index ix = x.node_id();
  return x.graph().record("sum", {ix}, std::move(out), [ix](Graph<S>& gr, Index self) {
    gr.grad_buffer(ix).data.array() += gr.node(self).grad.data[0];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x) {
  const Index n = x.size();
  if (n == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), S(1) / static_cast<S>(n));
}

/// Sum over one axis, keeping it with extent 1.
template <typename S>
Tensor<S> sum(const Tensor<S>& x, Index axis) {
  const Shape& in = x.shape();
  const Index ax = detail::normalize_axis(axis, x.rank(), "sum");
  const Index outer = detail::product(in, 0, static_cast<std::size_t>(ax));
  const Index n = in[static_cast<std::size_t>(ax)];
  const Index inner = detail::product(in, static_cast<std::size_t>(ax) + 1, in.size());
  Shape out_shape = in;
  out_shape[static_cast<std::size_t>(ax)] = 1;
  NDArray<S> out(out_shape);
  const auto& xv = x.value().data;
  for (Index o = 0; o < outer; ++o)
    for (Index k = 0; k < n; ++k)
      for (Index i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
  const Index ix = x.node_id();
  return x.graph().record("sum_axis", {ix}, std::move(out), [ix, outer, n, inner](Graph<S>& gr, Index self) {
    const auto& gy = gr.node(self).grad.data;
    auto& gx = gr.grad_buffer(ix).data;
    for (Index o = 0; o < outer; ++o)
      for (Index k = 0; k < n; ++k)
        for (Index i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += gy[o * inner + i];
  });
}

template <typename S>
Tensor<S> mean(const Tensor<S>& x, Index axis) {
  const Index ax = detail::normalize_axis(axis, x.rank(), "mean");
  const Index n = x.dim(ax);
  if (n == 0) throw ShapeError("mean: empty axis");
  return scale(sum(x, ax), S(1) / static_cast<S>(n));
}

/// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, Index axis) {
  const Shape& in = x.shape();
  const Index ax = detail::normalize_axis(axis, x.rank(), "softmax");
  const Index outer = detail::product(in, 0, static_cast<std::size_t>(ax));
  const Index n = in[static_cast<std::size_t>(ax)];
  const Index inner = detail::product(in, static_cast<std::size_t>(ax) + 1, in.size());
  NDArray<S> out(in);
  const auto& xv = x.value().data;
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
      S total = 0;
      for (Index k = 0; k < n; ++k) {
        const S e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (Index k = 0; k < n; ++k) out[base + k * inner] /= total;
    }
  }
  const Index ix = x.node_id();
  return x.graph().record("softmax", {ix}, std::move(out), [ix, outer, n, inner](Graph<S>& gr, Index self) {
    const auto& node = gr.node(self);
    const auto& gy = node.grad.data;
    const auto& y = node.value.data;
    auto& gx = gr.grad_buffer(ix).data;
    for (Index o = 0; o < outer; ++o) {
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * n * inner + i;
        S dot = 0;
        for (Index k = 0; k < n; ++k) dot += gy[base + k * inner] * y[base + k * inner];
        for (Index k = 0; k < n; ++k) gx[base + k * inner] += y[base + k * inner] * (gy[base + k * inner] - dot);
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

/// Matrix product over the last two axes. Supported operand ranks:
/// [m,k]x[k,n], [B,m,k]x[k,n] (shared right operand) and [B,m,k]x[B,k,n].
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  using Mat = typename NDArray<S>::RowMatrix;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  auto fail = [&]() {
    return ShapeError("matmul: incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
  };
  if (as.size() < 2 || as.size() > 3 || bs.size() < 2 || bs.size() > 3) throw fail();
  const Index k = as.back();
  if (bs[bs.size() - 2] != k) throw fail();
  const Index n = bs.back();
  const Index ia = a.node_id();
  const Index ib = b.node_id();

  if (bs.size() == 2) {
    const Index rows = a.size() / std::max<Index>(k, 1);
    Shape out_shape = as;
    out_shape.back() = n;
    NDArray<S> out(out_shape);
    Map(out.data.data(), rows, n).noalias() = CMap(a.value().data.data(), rows, k) * CMap(b.value().data.data(), k, n);
    return a.graph().record("matmul", {ia, ib}, std::move(out), [ia, ib, rows, k, n](Graph<S>& gr, Index self) {
      CMap gy(gr.node(self).grad.data.data(), rows, n);
      if (gr.requires_grad(ia)) {
        Map(gr.grad_buffer(ia).data.data(), rows, k).noalias() += gy * CMap(gr.value(ib).data.data(), k, n).transpose();
      }
      if (gr.requires_grad(ib)) {
        Map(gr.grad_buffer(ib).data.data(), k, n).noalias() += CMap(gr.value(ia).data.data(), rows, k).transpose() * gy;
      }
    });
  }

  if (as.size() != 3 || as[0] != bs[0]) throw fail();
  const Index batch = as[0];
  const Index m = as[1];
  NDArray<S> out(Shape{batch, m, n});
  for (Index t = 0; t < batch; ++t) {
    Map(out.data.data() + t * m * n, m, n).noalias() =
        CMap(a.value().data.data() + t * m * k, m, k) * CMap(b.value().data.data() + t * k * n, k, n);
  }
  return a.graph().record("bmm", {ia, ib}, std::move(out), [ia, ib, batch, m, k, n](Graph<S>& gr, Index self) {
    const S* gy = gr.node(self).grad.data.data();
    if (gr.requires_grad(ia)) {
      S* ga = gr.grad_buffer(ia).data.data();
      const S* bv = gr.value(ib).data.data();
      for (Index t = 0; t < batch; ++t) {
        Map(ga + t * m * k, m, k).noalias() += CMap(gy + t * m * n, m, n) * CMap(bv + t * k * n, k, n).transpose();
      }
    }
    if (gr.requires_grad(ib)) {
      S* gb = gr.grad_buffer(ib).data.data();
      const S* av = gr.value(ia).data.data();
      for (Index t = 0; t < batch; ++t) {
        Map(gb + t * k * n, k, n).noalias() += CMap(av + t * m * k, m, k).transpose() * CMap(gy + t * m * n, m, n);
      }
    }
  });
}

/// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename S>
Tensor<S> transpose(const Tensor<S>& x) {
  using Mat = typename NDArray<S>::RowMatrix;
  using Map = Eigen::Map<Mat>;
  using CMap = Eigen::Map<const Mat>;
  const Shape& in = x.shape();
  if (in.size() != 2 && in.size() != 3) throw ShapeError("transpose: expected rank 2 or 3, got " + shape_string(in));
  const Index batch = in.size() == 3 ? in[0] : 1;
  const Index r = in[in.size() - 2];
  const Index c = in.back();
  Shape out_shape = in;
  std::swap(out_shape[in.size() - 2], out_shape[in.size() - 1]);
  NDArray<S> out(out_shape);
  for (Index t = 0; t < batch; ++t) {
    Map(out.data.data() + t * r * c, c, r) = CMap(x.value().data.data() + t * r * c, r, c).transpose();
  }
  const Index ix = x.node_id();
  return x.graph().record("transpose", {ix}, std::move(out), [ix, batch, r, c](Graph<S>& gr, Index self) {
    const S* gy = gr.node(self).grad.data.data();
    S* gx = gr.grad_buffer(ix).data.data();
    for (Index t = 0; t < batch; ++t) Map(gx + t * r * c, r, c) += CMap(gy + t * r * c, c, r).transpose();
  });
}

// ---------------------------------------------------------------------------
// Structural

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_string(x.shape()) + " as " + shape_string(shape));
  }
  NDArray<S> out(std::move(shape), x.value().data);
  const Index ix = x.node_id();
  return x.graph().record("reshape", {ix}, std::move(out), [ix](Graph<S>& gr, Index self) {
    gr.grad_buffer(ix).data += gr.node(self).grad.data;
  });
}

template <typename S>
Tensor<S> broadcast_to(const Tensor<S>& x, const Shape& shape) {
  if (broadcast_shape(x.shape(), shape) != shape) {
    throw ShapeError("broadcast_to: cannot broadcast " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  auto map = std::make_shared<const detail::BroadcastMap>(x.shape(), shape);
  NDArray<S> out(shape);
  const auto& xv = x.value().data;
  for (Index i = 0; i < out.size(); ++i) out[i] = xv[(*map)(i)];
  const Index ix = x.node_id();
  return x.graph().record("broadcast_to", {ix}, std::move(out), [ix, map](Graph<S>& gr, Index self) {
    const auto& gy = gr.node(self).grad.data;
    auto& gx = gr.grad_buffer(ix).data;
    for (Index i = 0; i < gy.size(); ++i) gx[(*map)(i)] += gy[i];
  });
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, Index axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  const Index ax = detail::normalize_axis(axis, static_cast<Index>(first.size()), "concat");
  Shape out_shape = first;
  out_shape[static_cast<std::size_t>(ax)] = 0;
  std::vector<Index> extents;
  std::vector<Index> ids;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = static_cast<Index>(i) == ax || s[i] == first[i];
    if (!ok) throw ShapeError("concat: extent mismatch " + shape_string(first) + " vs " + shape_string(s));
    extents.push_back(s[static_cast<std::size_t>(ax)]);
    out_shape[static_cast<std::size_t>(ax)] += extents.back();
    ids.push_back(p.node_id());
  }
  const Index outer = detail::product(first, 0, static_cast<std::size_t>(ax));
  const Index inner = detail::product(first, static_cast<std::size_t>(ax) + 1, first.size());
  const Index total = out_shape[static_cast<std::size_t>(ax)];
  NDArray<S> out(out_shape);
  Index offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& src = parts[p].value().data;
    const Index chunk = extents[p] * inner;
    for (Index o = 0; o < outer; ++o) {
      out.data.segment(o * total * inner + offset * inner, chunk) = src.segment(o * chunk, chunk);
    }
    offset += extents[p];
  }
  return parts.front().graph().record(
      "concat", ids, std::move(out), [ids, extents, outer, inner, total](Graph<S>& gr, Index self) {
        const auto& gy = gr.node(self).grad.data;
        Index off = 0;
        for (std::size_t p = 0; p < ids.size(); ++p) {
          const Index chunk = extents[p] * inner;
          if (gr.requires_grad(ids[p])) {
            auto& gx = gr.grad_buffer(ids[p]).data;
            for (Index o = 0; o < outer; ++o) gx.segment(o * chunk, chunk) += gy.segment(o * total * inner + off * inner, chunk);
          }
          off += extents[p];
        }
      });
}

/// Half-open range [start, end) along `axis`.
template <typename S>
Tensor<S> slice(const Tensor<S>& x, Index axis, Index start, Index end) {
  const Shape& in = x.shape();
  const Index ax = detail::normalize_axis(axis, x.rank(), "slice");
  const Index n = in[static_cast<std::size_t>(ax)];
  if (start < 0 || end < start || end > n) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(end) + ") invalid for extent " +
                     std::to_string(n));
  }
  const Index outer = detail::product(in, 0, static_cast<std::size_t>(ax));
  const Index inner = detail::product(in, static_cast<std::size_t>(ax) + 1, in.size());
  const Index len = end - start;
  Shape out_shape = in;
  out_shape[static_cast<std::size_t>(ax)] = len;
  NDArray<S> out(out_shape);
  const auto& xv = x.value().data;
  for (Index o = 0; o < outer; ++o) {
    out.data.segment(o * len * inner, len * inner) = xv.segment((o * n + start) * inner, len * inner);
  }
  const Index ix = x.node_id();
  return x.graph().record("slice", {ix}, std::move(out), [ix, outer, inner, n, start, len](Graph<S>& gr, Index self) {
    const auto& gy = gr.node(self).grad.data;
    auto& gx = gr.grad_buffer(ix).data;
    for (Index o = 0; o < outer; ++o) {
      gx.segment((o * n + start) * inner, len * inner) += gy.segment(o * len * inner, len * inner);
    }
  });
}

// ---------------------------------------------------------------------------
// Normalisation

/// Normalises over the last axis, then applies per-feature gain and bias.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, S eps = S(1e-5)) {
  const Index d = x.shape().empty() ? 0 : x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" + shape_string(bias.shape()) +
                     " do not match feature extent of " + shape_string(x.shape()));
  }
  const Index rows = d == 0 ? 0 : x.size() / d;
  using Mat = typename NDArray<S>::RowMatrix;
  using CMap = Eigen::Map<const Mat>;
  CMap xm(x.value().data.data(), rows, d);
  auto xhat = std::make_shared<Mat>(rows, d);
  auto rstd = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, 1>>(rows);
  for (Index r = 0; r < rows; ++r) {
    const S mu = xm.row(r).mean();
    const S var = (xm.row(r).array() - mu).square().mean();
    (*rstd)[r] = S(1) / std::sqrt(var + eps);
    xhat->row(r) = (xm.row(r).array() - mu) * (*rstd)[r];
  }
  NDArray<S> out(x.shape());
  Eigen::Map<Mat> om(out.data.data(), rows, d);
  const auto gv = gain.value().data.transpose().array();
  const auto bv = bias.value().data.transpose().array();
  for (Index r = 0; r < rows; ++r) om.row(r) = xhat->row(r).array() * gv + bv;

  const Index ix = x.node_id();
  const Index ig = gain.node_id();
  const Index ibias = bias.node_id();
  return x.graph().record(
      "layer_norm", {ix, ig, ibias}, std::move(out), [ix, ig, ibias, rows, d, xhat, rstd](Graph<S>& gr, Index self) {
        CMap gy(gr.node(self).grad.data.data(), rows, d);
        if (gr.requires_grad(ig)) gr.grad_buffer(ig).data += (gy.array() * xhat->array()).colwise().sum().transpose().matrix();
        if (gr.requires_grad(ibias)) gr.grad_buffer(ibias).data += gy.colwise().sum().transpose();
        if (gr.requires_grad(ix)) {
          Eigen::Map<Mat> gx(gr.grad_buffer(ix).data.data(), rows, d);
          const auto gv = gr.value(ig).data.transpose().array();
          for (Index r = 0; r < rows; ++r) {
            const Eigen::Array<S, 1, Eigen::Dynamic> dxhat = gy.row(r).array() * gv;
            const S m1 = dxhat.mean();
            const S m2 = (dxhat * xhat->row(r).array()).mean();
            gx.row(r).array() += (*rstd)[r] * (dxhat - m1 - xhat->row(r).array() * m2);
          }
        }
      });
}

}  // namespace zeg
