#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <string>
#include <vector>

#include "simplr/tape.hpp"
#include "simplr/tensor.hpp"

// Differentiable ops over tape Vars. Every op funnels through Tape::add_node,
// which rejects non-finite outputs. VJP closures read parent values back off
// the tape instead of capturing tensors.

namespace simplr {
namespace detail {

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b,
                                        const char* op) {
  if (a.size() != b.size())
    throw Error(std::string(op) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  std::vector<int> out(a.size());
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1)
      out[i] = a[i];
    else if (a[i] == 1)
      out[i] = b[i];
    else
      throw Error(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
  }
  return out;
}

// Strides for indexing `shape` from an output of `out_shape`; broadcast axes
// get stride 0.
inline std::vector<int64_t> broadcast_strides(const std::vector<int>& shape,
                                              const std::vector<int>& out_shape) {
  Tensor probe;  // only for stride math
  std::vector<int64_t> st(shape.size(), 0);
  int64_t run = 1;
  for (int i = static_cast<int>(shape.size()) - 1; i >= 0; --i) {
    size_t u = static_cast<size_t>(i);
    st[u] = (shape[u] == out_shape[u]) ? run : 0;
    run *= shape[u];
  }
  (void)probe;
  return st;
}

// Calls fn(out_flat, a_flat, b_flat) for every output coordinate.
template <typename Fn>
inline void for_each_broadcast(const std::vector<int>& out_shape, const std::vector<int>& a_shape,
                               const std::vector<int>& b_shape, Fn&& fn) {
  const int rank = static_cast<int>(out_shape.size());
  const int64_t n = numel_of(out_shape);
  auto sa = broadcast_strides(a_shape, out_shape);
  auto sb = broadcast_strides(b_shape, out_shape);
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  int64_t ia = 0, ib = 0;
  for (int64_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (int ax = rank - 1; ax >= 0; --ax) {
      size_t u = static_cast<size_t>(ax);
      ++idx[u];
      ia += sa[u];
      ib += sb[u];
      if (idx[u] < out_shape[u]) break;
      ia -= sa[u] * out_shape[u];
      ib -= sb[u] * out_shape[u];
      idx[u] = 0;
    }
  }
}

// Sum-reduces `g` onto `target_shape` (same rank, target extents divide by
// being 1 on broadcast axes).
inline Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& target_shape) {
  if (g.shape == target_shape) return g;
  Tensor out(target_shape);
  auto st = broadcast_strides(target_shape, g.shape);
  const int rank = g.rank();
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  int64_t it = 0;
  for (int64_t o = 0; o < g.numel(); ++o) {
    out.data[static_cast<size_t>(it)] += g.data[static_cast<size_t>(o)];
    for (int ax = rank - 1; ax >= 0; --ax) {
      size_t u = static_cast<size_t>(ax);
      ++idx[u];
      it += st[u];
      if (idx[u] < g.shape[u]) break;
      it -= st[u] * g.shape[u];
      idx[u] = 0;
    }
  }
  return out;
}

// Splits a tensor around `axis` into [outer, n, inner] for axis-wise loops.
struct AxisView {
  int64_t outer = 1, n = 1, inner = 1;
};

inline AxisView axis_view(const std::vector<int>& shape, int axis, const char* op) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw Error(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
                shape_str(shape));
  AxisView v;
  for (int i = 0; i < axis; ++i) v.outer *= shape[static_cast<size_t>(i)];
  v.n = shape[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

inline void check_same_tape(std::initializer_list<Var> vars, const char* op) {
  Tape* t = nullptr;
  for (Var v : vars) {
    if (!v.valid()) throw Error(std::string(op) + ": invalid var");
    if (t == nullptr) t = v.tape;
    if (v.tape != t) throw Error(std::string(op) + ": vars from different tapes");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Shape ops

inline Var reshape(Var a, std::vector<int> shape) {
  detail::check_same_tape({a}, "reshape");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  if (numel_of(shape) != av.numel())
    throw Error("reshape: cannot view " + shape_str(av.shape) + " as " + shape_str(shape));
  Tensor out(shape, av.data);
  int pa = a.id;
  return t.add_node(
      std::move(out), {pa},
      [pa](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(pa);
        for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i];
      },
      "reshape");
}

inline Var permute(Var a, std::vector<int> perm) {
  detail::check_same_tape({a}, "permute");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const int rank = av.rank();
  if (static_cast<int>(perm.size()) != rank)
    throw Error("permute: perm length " + std::to_string(perm.size()) + " vs rank " +
                std::to_string(rank));
  std::vector<bool> seen(static_cast<size_t>(rank), false);
  std::vector<int> out_shape(static_cast<size_t>(rank));
  for (int i = 0; i < rank; ++i) {
    int p = perm[static_cast<size_t>(i)];
    if (p < 0 || p >= rank || seen[static_cast<size_t>(p)])
      throw Error("permute: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    out_shape[static_cast<size_t>(i)] = av.shape[static_cast<size_t>(p)];
  }
  auto in_strides = av.strides();
  Tensor out(out_shape);
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  for (int64_t o = 0; o < out.numel(); ++o) {
    int64_t src = 0;
    for (int i = 0; i < rank; ++i)
      src += in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])] * idx[static_cast<size_t>(i)];
    out.data[static_cast<size_t>(o)] = av.data[static_cast<size_t>(src)];
    for (int ax = rank - 1; ax >= 0; --ax) {
      size_t u = static_cast<size_t>(ax);
      if (++idx[u] < out_shape[u]) break;
      idx[u] = 0;
    }
  }
  int pa = a.id;
  return t.add_node(
      std::move(out), {pa},
      [pa, perm, rank](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(pa);
        auto in_strides = tp.value_of(pa).strides();
        std::vector<int> idx(static_cast<size_t>(rank), 0);
        for (int64_t o = 0; o < g.numel(); ++o) {
          int64_t src = 0;
          for (int i = 0; i < rank; ++i)
            src += in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])] *
                   idx[static_cast<size_t>(i)];
          ga.data[static_cast<size_t>(src)] += g.data[static_cast<size_t>(o)];
          for (int ax = rank - 1; ax >= 0; --ax) {
            size_t u = static_cast<size_t>(ax);
            if (++idx[u] < g.shape[u]) break;
            idx[u] = 0;
          }
        }
      },
      "permute");
}

inline Var slice(Var a, int axis, int start, int len) {
  detail::check_same_tape({a}, "slice");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  auto v = detail::axis_view(av.shape, axis, "slice");
  if (start < 0 || len <= 0 || start + len > v.n)
    throw Error("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for extent " + std::to_string(v.n));
  std::vector<int> out_shape = av.shape;
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out(out_shape);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t j = 0; j < len; ++j)
      for (int64_t i = 0; i < v.inner; ++i)
        out.data[static_cast<size_t>((o * len + j) * v.inner + i)] =
            av.data[static_cast<size_t>((o * v.n + start + j) * v.inner + i)];
  int pa = a.id;
  return t.add_node(
      std::move(out), {pa},
      [pa, v, start, len](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(pa);
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t j = 0; j < len; ++j)
            for (int64_t i = 0; i < v.inner; ++i)
              ga.data[static_cast<size_t>((o * v.n + start + j) * v.inner + i)] +=
                  g.data[static_cast<size_t>((o * len + j) * v.inner + i)];
      },
      "slice");
}

inline Var concat(const std::vector<Var>& vars, int axis) {
  if (vars.empty()) throw Error("concat: no inputs");
  detail::check_same_tape({vars[0]}, "concat");
  Tape& t = *vars[0].tape;
  std::vector<int> out_shape = t.val(vars[0]).shape;
  auto v0 = detail::axis_view(out_shape, axis, "concat");
  int total = 0;
  std::vector<int> parents;
  std::vector<int> lens;
  for (Var v : vars) {
    detail::check_same_tape({vars[0], v}, "concat");
    const Tensor& tv = t.val(v);
    if (tv.rank() != static_cast<int>(out_shape.size()))
      throw Error("concat: rank mismatch");
    for (int ax = 0; ax < tv.rank(); ++ax)
      if (ax != axis && tv.shape[static_cast<size_t>(ax)] != out_shape[static_cast<size_t>(ax)])
        throw Error("concat: shape mismatch " + shape_str(tv.shape) + " vs " +
                    shape_str(out_shape) + " on axis " + std::to_string(ax));
    lens.push_back(tv.extent(axis));
    total += tv.extent(axis);
    parents.push_back(v.id);
  }
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out(out_shape);
  int64_t off = 0;
  for (size_t k = 0; k < parents.size(); ++k) {
    const Tensor& tv = t.value_of(parents[k]);
    int64_t n = lens[k];
    for (int64_t o = 0; o < v0.outer; ++o)
      for (int64_t j = 0; j < n; ++j)
        for (int64_t i = 0; i < v0.inner; ++i)
          out.data[static_cast<size_t>((o * total + off + j) * v0.inner + i)] =
              tv.data[static_cast<size_t>((o * n + j) * v0.inner + i)];
    off += n;
  }
  auto outer = v0.outer;
  auto inner = v0.inner;
  return t.add_node(
      std::move(out), parents,
      [parents, lens, total, outer, inner](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        int64_t off = 0;
        for (size_t k = 0; k < parents.size(); ++k) {
          int64_t n = lens[k];
          if (tp.needs_grad(parents[k])) {
            Tensor& gp = tp.grad_buffer(parents[k]);
            for (int64_t o = 0; o < outer; ++o)
              for (int64_t j = 0; j < n; ++j)
                for (int64_t i = 0; i < inner; ++i)
                  gp.data[static_cast<size_t>((o * n + j) * inner + i)] +=
                      g.data[static_cast<size_t>((o * total + off + j) * inner + i)];
          }
          off += n;
        }
      },
      "concat");
}

// Index-select along `axis`; indices may repeat (VJP scatter-adds).
inline Var gather(Var a, int axis, std::vector<int> indices) {
  detail::check_same_tape({a}, "gather");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  auto v = detail::axis_view(av.shape, axis, "gather");
  for (int ix : indices)
    if (ix < 0 || ix >= v.n)
      throw Error("gather: index " + std::to_string(ix) + " out of range for extent " +
                  std::to_string(v.n));
  std::vector<int> out_shape = av.shape;
  out_shape[static_cast<size_t>(axis)] = static_cast<int>(indices.size());
  int64_t m = static_cast<int64_t>(indices.size());
  Tensor out(out_shape);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t j = 0; j < m; ++j)
      for (int64_t i = 0; i < v.inner; ++i)
        out.data[static_cast<size_t>((o * m + j) * v.inner + i)] =
            av.data[static_cast<size_t>((o * v.n + indices[static_cast<size_t>(j)]) * v.inner + i)];
  int pa = a.id;
  return t.add_node(
      std::move(out), {pa},
      [pa, v, indices, m](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(pa);
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t j = 0; j < m; ++j)
            for (int64_t i = 0; i < v.inner; ++i)
              ga.data[static_cast<size_t>((o * v.n + indices[static_cast<size_t>(j)]) * v.inner + i)] +=
                  g.data[static_cast<size_t>((o * m + j) * v.inner + i)];
      },
      "gather");
}

// ---------------------------------------------------------------------------
// Elementwise binary (same-rank broadcasting, extent-1 axes stretch)

namespace detail {

template <typename FwdFn, typename DaFn, typename DbFn>
inline Var binary_op(Var a, Var b, const char* name, FwdFn fwd, DaFn da, DbFn db) {
  check_same_tape({a, b}, name);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  auto out_shape = broadcast_shape(av.shape, bv.shape, name);
  Tensor out(out_shape);
  for_each_broadcast(out_shape, av.shape, bv.shape, [&](int64_t o, int64_t ia, int64_t ib) {
    out.data[static_cast<size_t>(o)] =
        fwd(av.data[static_cast<size_t>(ia)], bv.data[static_cast<size_t>(ib)]);
  });
  int pa = a.id, pb = b.id;
  return t.add_node(
      std::move(out), {pa, pb},
      [pa, pb, da, db](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& av = tp.value_of(pa);
        const Tensor& bv = tp.value_of(pb);
        bool na = tp.needs_grad(pa), nb = tp.needs_grad(pb);
        Tensor ga_full = na ? Tensor::zeros(g.shape) : Tensor{};
        Tensor gb_full = nb ? Tensor::zeros(g.shape) : Tensor{};
        for_each_broadcast(g.shape, av.shape, bv.shape, [&](int64_t o, int64_t ia, int64_t ib) {
          double gv = g.data[static_cast<size_t>(o)];
          double x = av.data[static_cast<size_t>(ia)];
          double y = bv.data[static_cast<size_t>(ib)];
          if (na) ga_full.data[static_cast<size_t>(o)] = gv * da(x, y);
          if (nb) gb_full.data[static_cast<size_t>(o)] = gv * db(x, y);
        });
        if (na) {
          Tensor r = reduce_to_shape(ga_full, av.shape);
          Tensor& ga = tp.grad_buffer(pa);
          for (size_t i = 0; i < r.data.size(); ++i) ga.data[i] += r.data[i];
        }
        if (nb) {
          Tensor r = reduce_to_shape(gb_full, bv.shape);
          Tensor& gb = tp.grad_buffer(pb);
          for (size_t i = 0; i < r.data.size(); ++i) gb.data[i] += r.data[i];
        }
      },
      name);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var div(Var a, Var b) {
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Var minimum(Var a, Var b) {
  return detail::binary_op(
      a, b, "minimum", [](double x, double y) { return x < y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

inline Var maximum(Var a, Var b) {
  return detail::binary_op(
      a, b, "maximum", [](double x, double y) { return x > y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

// ---------------------------------------------------------------------------
// Elementwise unary

namespace detail {

template <typename FwdFn, typename DFn>
inline Var unary_op(Var a, const char* name, FwdFn fwd, DFn dfn) {
  check_same_tape({a}, name);
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  Tensor out(av.shape);
  for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = fwd(av.data[i]);
  int pa = a.id;
  return t.add_node(
      std::move(out), {pa},
      [pa, dfn](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& av = tp.value_of(pa);
        const Tensor& ov = tp.value_of(self);
        Tensor& ga = tp.grad_buffer(pa);
        for (size_t i = 0; i < g.data.size(); ++i)
          ga.data[i] += g.data[i] * dfn(av.data[i], ov.data[i]);
      },
      name);
}

}  // namespace detail

inline Var neg(Var a) {
  return detail::unary_op(
      a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

inline Var exp_op(Var a) {
  return detail::unary_op(
      a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log_op(Var a) {
  return detail::unary_op(
      a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Var sqrt_op(Var a) {
  return detail::unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}

inline Var abs_op(Var a) {
  return detail::unary_op(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var relu(Var a) {
  return detail::unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var sigmoid(Var a) {
  return detail::unary_op(
      a, "sigmoid", [](double x) { return sigmoid_value(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

inline Var softplus(Var a) {
  return detail::unary_op(
      a, "softplus", [](double x) { return softplus_value(x); },
      [](double x, double) { return sigmoid_value(x); });
}

inline Var gelu(Var a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  return detail::unary_op(
      a, "gelu", [=](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [=](double x, double) {
        double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        return cdf + x * pdf;
      });
}

inline Var scale(Var a, double c) {
  return detail::unary_op(
      a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var add_const(Var a, double c) {
  return detail::unary_op(
      a, "add_const", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

inline Var clamp_min(Var a, double lo) {
  return detail::unary_op(
      a, "clamp_min", [lo](double x) { return x > lo ? x : lo; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

inline Var clamp_max(Var a, double hi) {
  return detail::unary_op(
      a, "clamp_max", [hi](double x) { return x < hi ? x : hi; },
      [hi](double x, double) { return x < hi ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum_all(Var a) {
  detail::check_same_tape({a}, "sum_all");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  double s = 0.0;
  for (double v : av.data) s += v;
  int pa = a.id;
  return t.add_node(
      Tensor::scalar(s), {pa},
      [pa](Tape& tp, int self) {
        double g = tp.grad_buffer(self).data[0];
        Tensor& ga = tp.grad_buffer(pa);
        for (double& v : ga.data) v += g;
      },
      "sum_all");
}

inline Var mean_all(Var a) {
  const Tensor& av = a.tape->val(a);
  return scale(sum_all(a), 1.0 / static_cast<double>(av.numel()));
}

// Sum along one axis; the axis is kept with extent 1 so results broadcast.
inline Var sum_axis(Var a, int axis) {
  detail::check_same_tape({a}, "sum_axis");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  auto v = detail::axis_view(av.shape, axis, "sum_axis");
  std::vector<int> out_shape = av.shape;
  out_shape[static_cast<size_t>(axis)] = 1;
  Tensor out(out_shape);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t j = 0; j < v.n; ++j)
      for (int64_t i = 0; i < v.inner; ++i)
        out.data[static_cast<size_t>(o * v.inner + i)] +=
            av.data[static_cast<size_t>((o * v.n + j) * v.inner + i)];
  int pa = a.id;
  return t.add_node(
      std::move(out), {pa},
      [pa, v](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        Tensor& ga = tp.grad_buffer(pa);
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t j = 0; j < v.n; ++j)
            for (int64_t i = 0; i < v.inner; ++i)
              ga.data[static_cast<size_t>((o * v.n + j) * v.inner + i)] +=
                  g.data[static_cast<size_t>(o * v.inner + i)];
      },
      "sum_axis");
}

inline Var mean_axis(Var a, int axis) {
  const Tensor& av = a.tape->val(a);
  return scale(sum_axis(a, axis), 1.0 / static_cast<double>(av.extent(axis)));
}

// ---------------------------------------------------------------------------
// Softmax along an axis (max-subtracted)

inline Var softmax(Var a, int axis) {
  detail::check_same_tape({a}, "softmax");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  auto v = detail::axis_view(av.shape, axis, "softmax");
  Tensor out(av.shape);
  for (int64_t o = 0; o < v.outer; ++o)
    for (int64_t i = 0; i < v.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < v.n; ++j)
        m = std::max(m, av.data[static_cast<size_t>((o * v.n + j) * v.inner + i)]);
      double z = 0.0;
      for (int64_t j = 0; j < v.n; ++j) {
        size_t ix = static_cast<size_t>((o * v.n + j) * v.inner + i);
        out.data[ix] = std::exp(av.data[ix] - m);
        z += out.data[ix];
      }
      for (int64_t j = 0; j < v.n; ++j) out.data[static_cast<size_t>((o * v.n + j) * v.inner + i)] /= z;
    }
  int pa = a.id;
  return t.add_node(
      std::move(out), {pa},
      [pa, v](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& y = tp.value_of(self);
        Tensor& ga = tp.grad_buffer(pa);
        for (int64_t o = 0; o < v.outer; ++o)
          for (int64_t i = 0; i < v.inner; ++i) {
            double dot = 0.0;
            for (int64_t j = 0; j < v.n; ++j) {
              size_t ix = static_cast<size_t>((o * v.n + j) * v.inner + i);
              dot += g.data[ix] * y.data[ix];
            }
            for (int64_t j = 0; j < v.n; ++j) {
              size_t ix = static_cast<size_t>((o * v.n + j) * v.inner + i);
              ga.data[ix] += y.data[ix] * (g.data[ix] - dot);
            }
          }
      },
      "softmax");
}

// ---------------------------------------------------------------------------
// Matmul: [..,p,q] x [..,q,r] with equal leading dims, or a rank-2 rhs/lhs
// shared across the batch.

namespace detail {

inline void mm_accum(const double* a, const double* b, double* c, int64_t p, int64_t q, int64_t r,
                     bool ta, bool tb) {
  // c[p,r] += op(a) * op(b) where op transposes when flagged; a is [p,q] or
  // [q,p], b is [q,r] or [r,q].
  for (int64_t i = 0; i < p; ++i)
    for (int64_t k = 0; k < q; ++k) {
      double av = ta ? a[k * p + i] : a[i * q + k];
      if (av == 0.0) continue;
      const double* brow = tb ? nullptr : b + k * r;
      double* crow = c + i * r;
      if (!tb) {
        for (int64_t j = 0; j < r; ++j) crow[j] += av * brow[j];
      } else {
        for (int64_t j = 0; j < r; ++j) crow[j] += av * b[j * q + k];
      }
    }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::check_same_tape({a, b}, "matmul");
  Tape& t = *a.tape;
  const Tensor& av = t.val(a);
  const Tensor& bv = t.val(b);
  if (av.rank() < 2 || bv.rank() < 2)
    throw Error("matmul: need rank >= 2, got " + shape_str(av.shape) + " x " + shape_str(bv.shape));
  const int ar = av.rank(), br = bv.rank();
  int64_t p = av.shape[static_cast<size_t>(ar - 2)];
  int64_t q = av.shape[static_cast<size_t>(ar - 1)];
  int64_t q2 = bv.shape[static_cast<size_t>(br - 2)];
  int64_t r = bv.shape[static_cast<size_t>(br - 1)];
  if (q != q2)
    throw Error("matmul: inner extent mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape));

  bool shared_b = (br == 2 && ar > 2);
  bool shared_a = (ar == 2 && br > 2);
  std::vector<int> lead;
  if (shared_b) {
    lead.assign(av.shape.begin(), av.shape.end() - 2);
  } else if (shared_a) {
    lead.assign(bv.shape.begin(), bv.shape.end() - 2);
  } else {
    if (ar != br) throw Error("matmul: rank mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    for (int i = 0; i < ar - 2; ++i)
      if (av.shape[static_cast<size_t>(i)] != bv.shape[static_cast<size_t>(i)])
        throw Error("matmul: batch mismatch " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    lead.assign(av.shape.begin(), av.shape.end() - 2);
  }
  int64_t batch = numel_of(lead);
  std::vector<int> out_shape = lead;
  out_shape.push_back(static_cast<int>(p));
  out_shape.push_back(static_cast<int>(r));
  Tensor out(out_shape);
  for (int64_t n = 0; n < batch; ++n) {
    const double* ap = av.data.data() + (shared_a ? 0 : n * p * q);
    const double* bp = bv.data.data() + (shared_b ? 0 : n * q * r);
    detail::mm_accum(ap, bp, out.data.data() + n * p * r, p, q, r, false, false);
  }
  int pa = a.id, pb = b.id;
  return t.add_node(
      std::move(out), {pa, pb},
      [pa, pb, p, q, r, batch, shared_a, shared_b](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& av = tp.value_of(pa);
        const Tensor& bv = tp.value_of(pb);
        if (tp.needs_grad(pa)) {
          Tensor& ga = tp.grad_buffer(pa);
          for (int64_t n = 0; n < batch; ++n) {
            const double* gp = g.data.data() + n * p * r;
            const double* bp = bv.data.data() + (shared_b ? 0 : n * q * r);
            double* out = ga.data.data() + (shared_a ? 0 : n * p * q);
            // dA = dC * B^T
            detail::mm_accum(gp, bp, out, p, r, q, false, true);
          }
        }
        if (tp.needs_grad(pb)) {
          Tensor& gb = tp.grad_buffer(pb);
          for (int64_t n = 0; n < batch; ++n) {
            const double* gp = g.data.data() + n * p * r;
            const double* ap = av.data.data() + (shared_a ? 0 : n * p * q);
            double* out = gb.data.data() + (shared_b ? 0 : n * q * r);
            // dB = A^T * dC
            detail::mm_accum(ap, gp, out, q, p, r, true, false);
          }
        }
      },
      "matmul");
}

// x [..., in] * w [in, out] + b [out]
inline Var linear(Var x, Var w, Var b) {
  Var y = matmul(x, w);
  const Tensor& yv = y.tape->val(y);
  std::vector<int> bshape(static_cast<size_t>(yv.rank()), 1);
  bshape.back() = yv.shape.back();
  return add(y, reshape(b, bshape));
}

// ---------------------------------------------------------------------------
// Normalization

// Normalizes the last axis: y = (x - mu) / sqrt(var + eps) * gain + shift.
// Variance is the biased (1/n) estimate.
inline Var layer_norm(Var x, Var gain, Var shift, double eps = 1e-6) {
  detail::check_same_tape({x, gain, shift}, "layer_norm");
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const int64_t c = xv.shape.back();
  const int64_t rows = xv.numel() / c;
  const Tensor& gv = t.val(gain);
  if (gv.numel() != c || t.val(shift).numel() != c)
    throw Error("layer_norm: gain/shift must have " + std::to_string(c) + " elements");
  Tensor out(xv.shape);
  std::vector<double> mu(static_cast<size_t>(rows)), ivar(static_cast<size_t>(rows));
  for (int64_t rix = 0; rix < rows; ++rix) {
    const double* xr = xv.data.data() + rix * c;
    double m = 0.0;
    for (int64_t i = 0; i < c; ++i) m += xr[i];
    m /= static_cast<double>(c);
    double v = 0.0;
    for (int64_t i = 0; i < c; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= static_cast<double>(c);
    double iv = 1.0 / std::sqrt(v + eps);
    mu[static_cast<size_t>(rix)] = m;
    ivar[static_cast<size_t>(rix)] = iv;
    double* orow = out.data.data() + rix * c;
    const double* gd = gv.data.data();
    const double* sd = t.val(shift).data.data();
    for (int64_t i = 0; i < c; ++i) orow[i] = (xr[i] - m) * iv * gd[i] + sd[i];
  }
  int px = x.id, pg = gain.id, ps = shift.id;
  return t.add_node(
      std::move(out), {px, pg, ps},
      [px, pg, ps, c, rows, mu, ivar](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& xv = tp.value_of(px);
        const Tensor& gv = tp.value_of(pg);
        bool nx = tp.needs_grad(px), ng = tp.needs_grad(pg), ns = tp.needs_grad(ps);
        for (int64_t rix = 0; rix < rows; ++rix) {
          const double* xr = xv.data.data() + rix * c;
          const double* gr = g.data.data() + rix * c;
          double m = mu[static_cast<size_t>(rix)];
          double iv = ivar[static_cast<size_t>(rix)];
          if (ng || ns) {
            Tensor& gg = tp.grad_buffer(pg);
            Tensor& gs = tp.grad_buffer(ps);
            for (int64_t i = 0; i < c; ++i) {
              double xhat = (xr[i] - m) * iv;
              if (ng) gg.data[static_cast<size_t>(i)] += gr[i] * xhat;
              if (ns) gs.data[static_cast<size_t>(i)] += gr[i];
            }
          }
          if (nx) {
            Tensor& gx = tp.grad_buffer(px);
            double* gxr = gx.data.data() + rix * c;
            double sum_dh = 0.0, sum_dh_xhat = 0.0;
            for (int64_t i = 0; i < c; ++i) {
              double dh = gr[i] * gv.data[static_cast<size_t>(i)];
              double xhat = (xr[i] - m) * iv;
              sum_dh += dh;
              sum_dh_xhat += dh * xhat;
            }
            double n = static_cast<double>(c);
            for (int64_t i = 0; i < c; ++i) {
              double dh = gr[i] * gv.data[static_cast<size_t>(i)];
              double xhat = (xr[i] - m) * iv;
              gxr[i] += iv * (dh - sum_dh / n - xhat * sum_dh_xhat / n);
            }
          }
        }
      },
      "layer_norm");
}

// Channels-last group norm over a [H,W,C] map. Statistics pool over H, W and
// the channels of each group.
inline Var group_norm(Var x, int groups, Var gain, Var shift, double eps = 1e-6) {
  detail::check_same_tape({x, gain, shift}, "group_norm");
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  if (xv.rank() != 3) throw Error("group_norm: expected [H,W,C], got " + shape_str(xv.shape));
  const int64_t hw = static_cast<int64_t>(xv.shape[0]) * xv.shape[1];
  const int64_t c = xv.shape[2];
  if (groups <= 0 || c % groups != 0)
    throw Error("group_norm: groups " + std::to_string(groups) + " must divide channels " +
                std::to_string(c));
  const int64_t cg = c / groups;
  const int64_t n = hw * cg;
  Tensor out(xv.shape);
  std::vector<double> mu(static_cast<size_t>(groups)), ivar(static_cast<size_t>(groups));
  const double* gd = t.val(gain).data.data();
  const double* sd = t.val(shift).data.data();
  for (int g = 0; g < groups; ++g) {
    double m = 0.0;
    for (int64_t s = 0; s < hw; ++s)
      for (int64_t i = 0; i < cg; ++i) m += xv.data[static_cast<size_t>(s * c + g * cg + i)];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (int64_t s = 0; s < hw; ++s)
      for (int64_t i = 0; i < cg; ++i) {
        double d = xv.data[static_cast<size_t>(s * c + g * cg + i)] - m;
        v += d * d;
      }
    v /= static_cast<double>(n);
    double iv = 1.0 / std::sqrt(v + eps);
    mu[static_cast<size_t>(g)] = m;
    ivar[static_cast<size_t>(g)] = iv;
    for (int64_t s = 0; s < hw; ++s)
      for (int64_t i = 0; i < cg; ++i) {
        size_t ix = static_cast<size_t>(s * c + g * cg + i);
        out.data[ix] = (xv.data[ix] - m) * iv * gd[g * cg + i] + sd[g * cg + i];
      }
  }
  int px = x.id, pg = gain.id, ps = shift.id;
  return t.add_node(
      std::move(out), {px, pg, ps},
      [px, pg, ps, groups, cg, hw, c, n, mu, ivar](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& xv = tp.value_of(px);
        const Tensor& gv = tp.value_of(pg);
        bool nx = tp.needs_grad(px), ng = tp.needs_grad(pg), ns = tp.needs_grad(ps);
        for (int gi = 0; gi < groups; ++gi) {
          double m = mu[static_cast<size_t>(gi)];
          double iv = ivar[static_cast<size_t>(gi)];
          double sum_dh = 0.0, sum_dh_xhat = 0.0;
          for (int64_t s = 0; s < hw; ++s)
            for (int64_t i = 0; i < cg; ++i) {
              size_t ix = static_cast<size_t>(s * c + gi * cg + i);
              double xhat = (xv.data[ix] - m) * iv;
              double gr = g.data[ix];
              if (ng) tp.grad_buffer(pg).data[static_cast<size_t>(gi * cg + i)] += gr * xhat;
              if (ns) tp.grad_buffer(ps).data[static_cast<size_t>(gi * cg + i)] += gr;
              double dh = gr * gv.data[static_cast<size_t>(gi * cg + i)];
              sum_dh += dh;
              sum_dh_xhat += dh * xhat;
            }
          if (nx) {
            Tensor& gx = tp.grad_buffer(px);
            double nn = static_cast<double>(n);
            for (int64_t s = 0; s < hw; ++s)
              for (int64_t i = 0; i < cg; ++i) {
                size_t ix = static_cast<size_t>(s * c + gi * cg + i);
                double xhat = (xv.data[ix] - m) * iv;
                double dh = g.data[ix] * gv.data[static_cast<size_t>(gi * cg + i)];
                gx.data[ix] += iv * (dh - sum_dh / nn - xhat * sum_dh_xhat / nn);
              }
          }
        }
      },
      "group_norm");
}

// ---------------------------------------------------------------------------
// Convolution (valid padding) and the 2x2 stride-2 transposed conv

// x [H,W,Ci], w [kh,kw,Ci,Co], b [Co] -> [(H-kh)/s+1, (W-kw)/s+1, Co]
inline Var conv2d(Var x, Var w, Var b, int stride) {
  detail::check_same_tape({x, w, b}, "conv2d");
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  if (xv.rank() != 3 || wv.rank() != 4)
    throw Error("conv2d: expected x [H,W,Ci], w [kh,kw,Ci,Co], got " + shape_str(xv.shape) +
                " and " + shape_str(wv.shape));
  const int H = xv.shape[0], W = xv.shape[1], Ci = xv.shape[2];
  const int kh = wv.shape[0], kw = wv.shape[1], Co = wv.shape[3];
  if (wv.shape[2] != Ci)
    throw Error("conv2d: channel mismatch " + shape_str(xv.shape) + " vs " + shape_str(wv.shape));
  if (stride <= 0 || (H - kh) % stride != 0 || (W - kw) % stride != 0 || H < kh || W < kw)
    throw Error("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " stride " +
                std::to_string(stride) + " does not tile " + shape_str(xv.shape));
  const int Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;
  const Tensor& bv = t.val(b);
  if (bv.numel() != Co) throw Error("conv2d: bias must have " + std::to_string(Co) + " elements");
  Tensor out({Ho, Wo, Co});
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox)
      for (int co = 0; co < Co; ++co) {
        double s = bv.data[static_cast<size_t>(co)];
        for (int dy = 0; dy < kh; ++dy)
          for (int dx = 0; dx < kw; ++dx)
            for (int ci = 0; ci < Ci; ++ci)
              s += xv.at3(oy * stride + dy, ox * stride + dx, ci) *
                   wv.data[static_cast<size_t>(((dy * kw + dx) * Ci + ci) * Co + co)];
        out.at3(oy, ox, co) = s;
      }
  int px = x.id, pw = w.id, pb = b.id;
  return t.add_node(
      std::move(out), {px, pw, pb},
      [px, pw, pb, H, W, Ci, kh, kw, Co, stride, Ho, Wo](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& xv = tp.value_of(px);
        const Tensor& wv = tp.value_of(pw);
        bool nx = tp.needs_grad(px), nw = tp.needs_grad(pw), nb = tp.needs_grad(pb);
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox)
            for (int co = 0; co < Co; ++co) {
              double gv = g.at3(oy, ox, co);
              if (nb) tp.grad_buffer(pb).data[static_cast<size_t>(co)] += gv;
              for (int dy = 0; dy < kh; ++dy)
                for (int dx = 0; dx < kw; ++dx)
                  for (int ci = 0; ci < Ci; ++ci) {
                    size_t wix = static_cast<size_t>(((dy * kw + dx) * Ci + ci) * Co + co);
                    if (nx)
                      tp.grad_buffer(px).at3(oy * stride + dy, ox * stride + dx, ci) +=
                          gv * wv.data[wix];
                    if (nw)
                      tp.grad_buffer(pw).data[wix] +=
                          gv * xv.at3(oy * stride + dy, ox * stride + dx, ci);
                  }
            }
      },
      "conv2d");
}

// Transposed 2x2 stride-2 conv: each input texel scatters a 2x2 output block.
// x [H,W,Ci], w [2,2,Ci,Co], b [Co] -> [2H,2W,Co]
inline Var deconv2x(Var x, Var w, Var b) {
  detail::check_same_tape({x, w, b}, "deconv2x");
  Tape& t = *x.tape;
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  if (xv.rank() != 3 || wv.rank() != 4 || wv.shape[0] != 2 || wv.shape[1] != 2)
    throw Error("deconv2x: expected x [H,W,Ci], w [2,2,Ci,Co], got " + shape_str(xv.shape) +
                " and " + shape_str(wv.shape));
  const int H = xv.shape[0], W = xv.shape[1], Ci = xv.shape[2], Co = wv.shape[3];
  if (wv.shape[2] != Ci)
    throw Error("deconv2x: channel mismatch " + shape_str(xv.shape) + " vs " + shape_str(wv.shape));
  const Tensor& bv = t.val(b);
  if (bv.numel() != Co) throw Error("deconv2x: bias must have " + std::to_string(Co) + " elements");
  Tensor out({2 * H, 2 * W, Co});
  for (int y = 0; y < H; ++y)
    for (int x2 = 0; x2 < W; ++x2)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          for (int co = 0; co < Co; ++co) {
            double s = 0.0;
            for (int ci = 0; ci < Ci; ++ci)
              s += xv.at3(y, x2, ci) *
                   wv.data[static_cast<size_t>(((dy * 2 + dx) * Ci + ci) * Co + co)];
            out.at3(2 * y + dy, 2 * x2 + dx, co) = s + bv.data[static_cast<size_t>(co)];
          }
  int px = x.id, pw = w.id, pb = b.id;
  return t.add_node(
      std::move(out), {px, pw, pb},
      [px, pw, pb, H, W, Ci, Co](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& xv = tp.value_of(px);
        const Tensor& wv = tp.value_of(pw);
        bool nx = tp.needs_grad(px), nw = tp.needs_grad(pw), nb = tp.needs_grad(pb);
        for (int y = 0; y < H; ++y)
          for (int x2 = 0; x2 < W; ++x2)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx)
                for (int co = 0; co < Co; ++co) {
                  double gv = g.at3(2 * y + dy, 2 * x2 + dx, co);
                  for (int ci = 0; ci < Ci; ++ci) {
                    size_t wix = static_cast<size_t>(((dy * 2 + dx) * Ci + ci) * Co + co);
                    if (nx) tp.grad_buffer(px).at3(y, x2, ci) += gv * wv.data[wix];
                    if (nw) tp.grad_buffer(pw).data[wix] += gv * xv.at3(y, x2, ci);
                  }
                }
        if (nb) {
          Tensor& gb = tp.grad_buffer(pb);
          for (int y = 0; y < 2 * H; ++y)
            for (int x2 = 0; x2 < 2 * W; ++x2)
              for (int co = 0; co < Co; ++co) gb.data[static_cast<size_t>(co)] += g.at3(y, x2, co);
        }
      },
      "deconv2x");
}

// ---------------------------------------------------------------------------
// Bilinear sampling

// map [H,W,C], points [K,2] with (px,py) in normalized [0,1] image coords.
// Texel centers sit at ((i+0.5)/W, (j+0.5)/H); out-of-range points clamp to
// the border (replication). Differentiable in both the map and the points;
// where the clamp is active the point gradient is zero.
inline Var bilinear_sample(Var map, Var points) {
  detail::check_same_tape({map, points}, "bilinear_sample");
  Tape& t = *map.tape;
  const Tensor& mv = t.val(map);
  const Tensor& pv = t.val(points);
  if (mv.rank() != 3) throw Error("bilinear_sample: map must be [H,W,C], got " + shape_str(mv.shape));
  if (pv.rank() != 2 || pv.shape[1] != 2)
    throw Error("bilinear_sample: points must be [K,2], got " + shape_str(pv.shape));
  const int H = mv.shape[0], W = mv.shape[1], C = mv.shape[2];
  const int K = pv.shape[0];

  struct Corner {
    int x0, x1, y0, y1;
    double tx, ty;
    double dfx, dfy;  // d(fx)/d(px), zero when clamped
  };
  std::vector<Corner> cs(static_cast<size_t>(K));
  Tensor out({K, C});
  for (int k = 0; k < K; ++k) {
    double px = pv.at2(k, 0), py = pv.at2(k, 1);
    double fx = px * W - 0.5, fy = py * H - 0.5;
    Corner& c = cs[static_cast<size_t>(k)];
    c.dfx = (fx > 0.0 && fx < W - 1) ? static_cast<double>(W) : 0.0;
    c.dfy = (fy > 0.0 && fy < H - 1) ? static_cast<double>(H) : 0.0;
    fx = std::min(std::max(fx, 0.0), static_cast<double>(W - 1));
    fy = std::min(std::max(fy, 0.0), static_cast<double>(H - 1));
    c.x0 = static_cast<int>(std::floor(fx));
    c.y0 = static_cast<int>(std::floor(fy));
    c.x0 = std::min(c.x0, W - 1);
    c.y0 = std::min(c.y0, H - 1);
    c.x1 = std::min(c.x0 + 1, W - 1);
    c.y1 = std::min(c.y0 + 1, H - 1);
    c.tx = fx - c.x0;
    c.ty = fy - c.y0;
    for (int ch = 0; ch < C; ++ch) {
      double v00 = mv.at3(c.y0, c.x0, ch), v01 = mv.at3(c.y0, c.x1, ch);
      double v10 = mv.at3(c.y1, c.x0, ch), v11 = mv.at3(c.y1, c.x1, ch);
      out.at2(k, ch) = (1 - c.ty) * ((1 - c.tx) * v00 + c.tx * v01) +
                       c.ty * ((1 - c.tx) * v10 + c.tx * v11);
    }
  }
  int pm = map.id, pp = points.id;
  return t.add_node(
      std::move(out), {pm, pp},
      [pm, pp, cs, C](Tape& tp, int self) {
        const Tensor& g = tp.grad_buffer(self);
        const Tensor& mv = tp.value_of(pm);
        bool nm = tp.needs_grad(pm), np = tp.needs_grad(pp);
        const int K = static_cast<int>(cs.size());
        for (int k = 0; k < K; ++k) {
          const Corner& c = cs[static_cast<size_t>(k)];
          double dfx_acc = 0.0, dfy_acc = 0.0;
          for (int ch = 0; ch < C; ++ch) {
            double gv = g.at2(k, ch);
            if (gv == 0.0 && !np) continue;
            if (nm) {
              Tensor& gm = tp.grad_buffer(pm);
              gm.at3(c.y0, c.x0, ch) += gv * (1 - c.ty) * (1 - c.tx);
              gm.at3(c.y0, c.x1, ch) += gv * (1 - c.ty) * c.tx;
              gm.at3(c.y1, c.x0, ch) += gv * c.ty * (1 - c.tx);
              gm.at3(c.y1, c.x1, ch) += gv * c.ty * c.tx;
            }
            if (np) {
              double v00 = mv.at3(c.y0, c.x0, ch), v01 = mv.at3(c.y0, c.x1, ch);
              double v10 = mv.at3(c.y1, c.x0, ch), v11 = mv.at3(c.y1, c.x1, ch);
              dfx_acc += gv * ((1 - c.ty) * (v01 - v00) + c.ty * (v11 - v10));
              dfy_acc += gv * ((1 - c.tx) * (v10 - v00) + c.tx * (v11 - v01));
            }
          }
          if (np) {
            Tensor& gp = tp.grad_buffer(pp);
            gp.at2(k, 0) += dfx_acc * c.dfx;
            gp.at2(k, 1) += dfy_acc * c.dfy;
          }
        }
      },
      "bilinear_sample");
}

// ---------------------------------------------------------------------------
// Small conveniences used throughout the model code

inline Var square(Var a) { return mul(a, a); }

inline Var stack_rows(const std::vector<Var>& rows) {
  // rows of shape [c] -> [n, c] (each row reshaped then concatenated)
  std::vector<Var> r2;
  r2.reserve(rows.size());
  for (Var r : rows) {
    const Tensor& v = r.tape->val(r);
    std::vector<int> s = v.shape;
    s.insert(s.begin(), 1);
    r2.push_back(reshape(r, s));
  }
  return concat(r2, 0);
}

}  // namespace simplr
