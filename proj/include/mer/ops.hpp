// Differentiable tensor operations: elementwise arithmetic with right-aligned
// broadcasting, matrix products (Eigen-backed), shape manipulation,
// reductions, softmax and cross-entropy.
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mer/tensor.hpp"

namespace mer {

template <typename T>
using EigenMat =
    Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<EigenMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const EigenMat<T>>;

namespace detail {

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using StridedArrMap =
    Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>, 0, Eigen::InnerStride<>>;
template <typename T>
using ConstStridedArrMap =
    Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>, 0,
               Eigen::InnerStride<>>;

// Reductions with an index-fixed accumulation order. Eigen's reductions peel
// to the runtime pointer alignment, which makes the rounding depend on where
// the allocator placed the buffer; these lane-blocked loops vectorize while
// keeping results identical across runs.
template <typename T>
T fixed_sum(const T* p, std::int64_t n) {
  T acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) acc[k] += p[i + k];
  T tail = T(0);
  for (; i < n; ++i) tail += p[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
T fixed_dot(const T* a, const T* b, std::int64_t n) {
  T acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
T fixed_dot3(const T* a, const T* b, const T* c, std::int64_t n) {
  T acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k] * c[i + k];
  T tail = T(0);
  for (; i < n; ++i) tail += a[i] * b[i] * c[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T, typename Fn>
T fixed_transform_sum(const T* p, std::int64_t n, Fn&& fn) {
  T acc[8] = {};
  std::int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) acc[k] += fn(p[i + k]);
  T tail = T(0);
  for (; i < n; ++i) tail += fn(p[i]);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
         ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// Element strides of a tensor placed right-aligned inside `out`; broadcast
// dimensions get stride zero.
inline std::vector<std::int64_t> broadcast_strides(const Shape& shape,
                                                   const Shape& out) {
  const int ro = static_cast<int>(out.size());
  const int rs = static_cast<int>(shape.size());
  std::vector<std::int64_t> contiguous(rs, 1);
  for (int d = rs - 2; d >= 0; --d)
    contiguous[d] = contiguous[d + 1] * shape[d + 1];
  std::vector<std::int64_t> strides(ro, 0);
  for (int d = 0; d < ro; ++d) {
    const int ds = d - (ro - rs);
    if (ds < 0) continue;
    strides[d] = (shape[ds] == 1 && out[d] != 1) ? 0 : contiguous[ds];
  }
  return strides;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b,
                             const char* opname) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int ro = std::max(ra, rb);
  Shape out(ro, 1);
  for (int d = 0; d < ro; ++d) {
    const std::int64_t da = d - (ro - ra) >= 0 ? a[d - (ro - ra)] : 1;
    const std::int64_t db = d - (ro - rb) >= 0 ? b[d - (ro - rb)] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(opname) + ": cannot broadcast " +
                       shape_str(a) + " with " + shape_str(b));
    out[d] = std::max(da, db);
  }
  return out;
}

// Odometer walk over `out`, reporting the linear offsets of both operands.
template <typename Fn>
void for_each_broadcast(const Shape& out, const std::vector<std::int64_t>& sa,
                        const std::vector<std::int64_t>& sb, Fn&& fn) {
  const std::int64_t total = numel(out);
  const int rank = static_cast<int>(out.size());
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t lin = 0; lin < total; ++lin) {
    fn(lin, oa, ob);
    for (int d = rank - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// True when `b` tiles the trailing elements of shape `out` exactly, i.e. the
// flattened index of b is lin % b.numel. Covers bias rows, positional
// embeddings and scalars.
inline bool is_suffix_broadcast(const Shape& b, const Shape& out) {
  const int ro = static_cast<int>(out.size());
  const int rb = static_cast<int>(b.size());
  for (int d = 0; d < rb; ++d)
    if (b[d] != out[ro - rb + d]) return false;
  return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name,
                    Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape(), name);
  Tensor<T> out = make_tensor<T>(out_shape);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.mutable_data().data();
  const std::int64_t n = out.size();

  const bool same = a.shape() == b.shape();
  const bool suffix_b = !same && detail::is_suffix_broadcast(b.shape(), out_shape) &&
                        a.shape() == out_shape;
  if (same) {
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else if (suffix_b) {
    const std::int64_t bn = b.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i % bn]);
  } else {
    const auto sa = detail::broadcast_strides(a.shape(), out_shape);
    const auto sb = detail::broadcast_strides(b.shape(), out_shape);
    detail::for_each_broadcast(out_shape, sa, sb,
                               [&](std::int64_t lin, std::int64_t oa,
                                   std::int64_t ob) { po[lin] = fwd(pa[oa], pb[ob]); });
  }

  auto an = a.node();
  auto bn_node = b.node();
  attach_backward<T>(out, {an, bn_node}, [an, bn_node, out_shape, same,
                                          suffix_b, bwd_a, bwd_b](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = an->value.data();
    const T* pb = bn_node->value.data();
    const std::int64_t n = static_cast<std::int64_t>(self.value.size());
    if (same) {
      if (an->requires_grad) {
        an->ensure_grad();
        T* ga = an->grad.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += bwd_a(g[i], pa[i], pb[i]);
      }
      if (bn_node->requires_grad) {
        bn_node->ensure_grad();
        T* gb = bn_node->grad.data();
        for (std::int64_t i = 0; i < n; ++i) gb[i] += bwd_b(g[i], pa[i], pb[i]);
      }
    } else if (suffix_b) {
      const std::int64_t bn = static_cast<std::int64_t>(bn_node->value.size());
      if (an->requires_grad) {
        an->ensure_grad();
        T* ga = an->grad.data();
        for (std::int64_t i = 0; i < n; ++i)
          ga[i] += bwd_a(g[i], pa[i], pb[i % bn]);
      }
      if (bn_node->requires_grad) {
        bn_node->ensure_grad();
        T* gb = bn_node->grad.data();
        for (std::int64_t i = 0; i < n; ++i)
          gb[i % bn] += bwd_b(g[i], pa[i], pb[i % bn]);
      }
    } else {
      const auto sa = detail::broadcast_strides(an->shape, out_shape);
      const auto sb = detail::broadcast_strides(bn_node->shape, out_shape);
      if (an->requires_grad) an->ensure_grad();
      if (bn_node->requires_grad) bn_node->ensure_grad();
      T* ga = an->requires_grad ? an->grad.data() : nullptr;
      T* gb = bn_node->requires_grad ? bn_node->grad.data() : nullptr;
      detail::for_each_broadcast(
          out_shape, sa, sb,
          [&](std::int64_t lin, std::int64_t oa, std::int64_t ob) {
            if (ga) ga[oa] += bwd_a(g[lin], pa[oa], pb[ob]);
            if (gb) gb[ob] += bwd_b(g[lin], pa[oa], pb[ob]);
          });
    }
  });
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, "div", [](T x, T y) { return x / y; },
      [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return mul(a, Tensor<T>::scalar(factor));
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd /* (g, x, y) */) {
  Tensor<T> out = make_tensor<T>(x.shape());
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  const std::int64_t n = x.size();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  auto xn = x.node();
  auto on = out.node();
  attach_backward<T>(out, {xn}, [xn, bwd](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    const T* px = xn->value.data();
    const T* py = self.value.data();
    T* gx = xn->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(self.value.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += bwd(g[i], px[i], py[i]);
  });
  return out;
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return -v; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T g, T v, T) { return v > T(0) ? g : T(0); });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  Tensor<T> out = make_tensor<T>(x.shape());
  const std::int64_t n = x.size();
  detail::ArrMap<T>(out.mutable_data().data(), n) =
      detail::ConstArrMap<T>(x.data().data(), n).tanh();
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    const T* y = self.value.data();
    T* gx = xn->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(self.value.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i] * (T(1) - y[i] * y[i]);
  });
  return out;
}

// GELU in its tanh form: 0.5 x (1 + tanh(c (x + a x^3))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  static constexpr T kC = T(0.7978845608028653559);  // sqrt(2/pi)
  static constexpr T kA = T(0.044715);
  const std::int64_t n = x.size();
  Tensor<T> out = make_tensor<T>(x.shape());
  {
    detail::ConstArrMap<T> in(x.data().data(), n);
    detail::ArrMap<T> o(out.mutable_data().data(), n);
    o = T(0.5) * in * (T(1) + (kC * (in + kA * in.cube())).tanh());
  }
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn](Node<T>& self) {
    xn->ensure_grad();
    const std::int64_t n = static_cast<std::int64_t>(self.value.size());
    detail::ConstArrMap<T> in(xn->value.data(), n);
    detail::ConstArrMap<T> g(self.grad.data(), n);
    detail::ArrMap<T> gx(xn->grad.data(), n);
    auto t = (kC * (in + kA * in.cube())).tanh();
    gx += g * (T(0.5) * (T(1) + t) +
               T(0.5) * in * (T(1) - t.square()) * kC *
                   (T(1) + T(3) * kA * in.square()));
  });
  return out;
}

template <typename T>
Tensor<T> abs_op(const Tensor<T>& x) {
  return unary_op(
      x, [](T v) { return std::abs(v); },
      [](T g, T v, T) { return v > T(0) ? g : (v < T(0) ? -g : T(0)); });
}

// Identity in the forward pass; multiplies the incoming gradient by `factor`
// on the way back. Lets one consumer of a tensor contribute attenuated
// gradients while other consumers keep full ones.
template <typename T>
Tensor<T> scale_gradient(const Tensor<T>& x, T factor) {
  Tensor<T> out = Tensor<T>::from_range(x.shape(), x.data().begin(),
                                        x.data().end());
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn, factor](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    T* gx = xn->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(self.value.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += factor * g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void gemm(const T* a, std::int64_t ar, std::int64_t ac, bool ta, const T* b,
          std::int64_t br, std::int64_t bc, bool tb, T* c, bool accumulate) {
  ConstMatMap<T> ma(a, ar, ac);
  ConstMatMap<T> mb(b, br, bc);
  const std::int64_t m = ta ? ac : ar;
  const std::int64_t n = tb ? br : bc;
  MatMap<T> mc(c, m, n);
  if (!ta && !tb) {
    if (accumulate) mc.noalias() += ma * mb; else mc.noalias() = ma * mb;
  } else if (ta && !tb) {
    if (accumulate) mc.noalias() += ma.transpose() * mb; else mc.noalias() = ma.transpose() * mb;
  } else if (!ta && tb) {
    if (accumulate) mc.noalias() += ma * mb.transpose(); else mc.noalias() = ma * mb.transpose();
  } else {
    if (accumulate) mc.noalias() += ma.transpose() * mb.transpose();
    else mc.noalias() = ma.transpose() * mb.transpose();
  }
}

}  // namespace detail

// 2-D matrix product with optional transposes: C = op(A) * op(B).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
  check(a.rank() == 2 && b.rank() == 2,
        "matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
            " and " + shape_str(b.shape()));
  const std::int64_t m = trans_a ? a.dim(1) : a.dim(0);
  const std::int64_t ka = trans_a ? a.dim(0) : a.dim(1);
  const std::int64_t kb = trans_b ? b.dim(1) : b.dim(0);
  const std::int64_t n = trans_b ? b.dim(0) : b.dim(1);
  if (ka != kb)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) +
                     (trans_a ? "^T" : "") + " vs " + shape_str(b.shape()) +
                     (trans_b ? "^T" : ""));
  Tensor<T> out = make_tensor<T>({m, n});
  detail::gemm(a.data().data(), a.dim(0), a.dim(1), trans_a, b.data().data(),
               b.dim(0), b.dim(1), trans_b, out.mutable_data().data(), false);

  auto an = a.node();
  auto bn = b.node();
  attach_backward<T>(out, {an, bn}, [an, bn, trans_a, trans_b, m, n](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = an->value.data();
    const T* pb = bn->value.data();
    const std::int64_t ar = an->shape[0], ac = an->shape[1];
    const std::int64_t br = bn->shape[0], bc = bn->shape[1];
    if (an->requires_grad) {
      an->ensure_grad();
      // dA for C = op(A) op(B)
      if (!trans_a && !trans_b)       // dA = G B^T
        detail::gemm(g, m, n, false, pb, br, bc, true, an->grad.data(), true);
      else if (!trans_a && trans_b)   // dA = G B
        detail::gemm(g, m, n, false, pb, br, bc, false, an->grad.data(), true);
      else if (trans_a && !trans_b)   // dA = B G^T
        detail::gemm(pb, br, bc, false, g, m, n, true, an->grad.data(), true);
      else                            // dA = B^T G^T
        detail::gemm(pb, br, bc, true, g, m, n, true, an->grad.data(), true);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      if (!trans_a && !trans_b)       // dB = A^T G
        detail::gemm(pa, ar, ac, true, g, m, n, false, bn->grad.data(), true);
      else if (!trans_a && trans_b)   // dB = G^T A
        detail::gemm(g, m, n, true, pa, ar, ac, false, bn->grad.data(), true);
      else if (trans_a && !trans_b)   // dB = A G
        detail::gemm(pa, ar, ac, false, g, m, n, false, bn->grad.data(), true);
      else                            // dB = G^T A^T
        detail::gemm(g, m, n, true, pa, ar, ac, true, bn->grad.data(), true);
    }
  });
  return out;
}

// Fused affine map over the trailing dimension: x [..., in] with weight
// [out, in] and optional bias [out] -> [..., out]. One GEMM over the
// flattened leading dimensions; no intermediate reshape copies.
template <typename T>
Tensor<T> linear_op(const Tensor<T>& x, const Tensor<T>& w,
                    const Tensor<T>& bias) {
  check(x.rank() >= 1 && w.rank() == 2, "linear: weight must be [out, in]");
  const std::int64_t in = w.dim(1), out_f = w.dim(0);
  check(x.dim(-1) == in, "linear: expected trailing dim " + std::to_string(in) +
                             ", got " + shape_str(x.shape()));
  const std::int64_t rows = x.size() / in;
  const bool has_bias = bias.defined();
  if (has_bias) check(bias.size() == out_f, "linear: bias size mismatch");
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor<T> out = make_tensor<T>(out_shape);
  T* po = out.mutable_data().data();
  detail::gemm(x.data().data(), rows, in, false, w.data().data(), out_f, in,
               true, po, false);
  if (has_bias) {
    detail::ConstArrMap<T> b(bias.data().data(), out_f);
    for (std::int64_t r = 0; r < rows; ++r)
      detail::ArrMap<T>(po + r * out_f, out_f) += b;
  }
  auto xn = x.node();
  auto wn = w.node();
  std::vector<std::shared_ptr<Node<T>>> parents = {xn, wn};
  std::shared_ptr<Node<T>> bn = has_bias ? bias.node() : nullptr;
  if (has_bias) parents.push_back(bn);
  attach_backward<T>(out, parents, [xn, wn, bn, rows, in, out_f](Node<T>& self) {
    const T* g = self.grad.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      detail::gemm(g, rows, out_f, false, wn->value.data(), out_f, in, false,
                   xn->grad.data(), true);  // dX += G W
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      detail::gemm(g, rows, out_f, true, xn->value.data(), rows, in, false,
                   wn->grad.data(), true);  // dW += G^T X
    }
    if (bn && bn->requires_grad) {
      bn->ensure_grad();
      detail::ArrMap<T> gb(bn->grad.data(), out_f);
      for (std::int64_t r = 0; r < rows; ++r)
        gb += detail::ConstArrMap<T>(g + r * out_f, out_f);
    }
  });
  return out;
}

// Batched product over matching leading dimensions:
// a: [L..., m, k], b: [L..., k, n] -> [L..., m, n] (transpose flags as above).
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b,
                         bool trans_a = false, bool trans_b = false) {
  check(a.rank() >= 3 && a.rank() == b.rank(),
        "batched_matmul: need equal ranks >= 3, got " + shape_str(a.shape()) +
            " and " + shape_str(b.shape()));
  const int r = a.rank();
  std::int64_t batch = 1;
  for (int d = 0; d < r - 2; ++d) {
    check(a.dim(d) == b.dim(d), "batched_matmul: leading dims differ");
    batch *= a.dim(d);
  }
  const std::int64_t ar = a.dim(r - 2), ac = a.dim(r - 1);
  const std::int64_t br = b.dim(r - 2), bc = b.dim(r - 1);
  const std::int64_t m = trans_a ? ac : ar;
  const std::int64_t ka = trans_a ? ar : ac;
  const std::int64_t kb = trans_b ? bc : br;
  const std::int64_t n = trans_b ? br : bc;
  if (ka != kb)
    throw ShapeError("batched_matmul: inner dimensions differ, " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out = make_tensor<T>(out_shape);
  const std::int64_t sa = ar * ac, sb = br * bc, so = m * n;
  for (std::int64_t i = 0; i < batch; ++i)
    detail::gemm(a.data().data() + i * sa, ar, ac, trans_a,
                 b.data().data() + i * sb, br, bc, trans_b,
                 out.mutable_data().data() + i * so, false);

  auto an = a.node();
  auto bn = b.node();
  attach_backward<T>(out, {an, bn}, [an, bn, trans_a, trans_b, batch, ar, ac,
                                     br, bc, m, n, sa, sb, so](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pa = an->value.data();
    const T* pb = bn->value.data();
    if (an->requires_grad) an->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    for (std::int64_t i = 0; i < batch; ++i) {
      const T* gi = g + i * so;
      const T* ai = pa + i * sa;
      const T* bi = pb + i * sb;
      if (an->requires_grad) {
        T* ga = an->grad.data() + i * sa;
        if (!trans_a && !trans_b)
          detail::gemm(gi, m, n, false, bi, br, bc, true, ga, true);
        else if (!trans_a && trans_b)
          detail::gemm(gi, m, n, false, bi, br, bc, false, ga, true);
        else if (trans_a && !trans_b)
          detail::gemm(bi, br, bc, false, gi, m, n, true, ga, true);
        else
          detail::gemm(bi, br, bc, true, gi, m, n, true, ga, true);
      }
      if (bn->requires_grad) {
        T* gb = bn->grad.data() + i * sb;
        if (!trans_a && !trans_b)
          detail::gemm(ai, ar, ac, true, gi, m, n, false, gb, true);
        else if (!trans_a && trans_b)
          detail::gemm(gi, m, n, true, ai, ar, ac, false, gb, true);
        else if (trans_a && !trans_b)
          detail::gemm(ai, ar, ac, false, gi, m, n, false, gb, true);
        else
          detail::gemm(gi, m, n, true, ai, ar, ac, true, gb, true);
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  // One dimension may be -1 and is inferred.
  std::int64_t known = 1;
  int infer = -1;
  for (int d = 0; d < static_cast<int>(shape.size()); ++d) {
    if (shape[d] == -1) {
      check(infer < 0, "reshape: at most one inferred dimension");
      infer = d;
    } else {
      known *= shape[d];
    }
  }
  if (infer >= 0) {
    check(known != 0 && x.size() % known == 0,
          "reshape: cannot infer dimension for " + shape_str(x.shape()));
    shape[infer] = x.size() / known;
  }
  check(numel(shape) == x.size(), "reshape: " + shape_str(x.shape()) +
                                      " to " + shape_str(shape) +
                                      " changes element count");
  Tensor<T> out =
      Tensor<T>::from_range(shape, x.data().begin(), x.data().end());
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    T* gx = xn->grad.data();
    const std::int64_t n = static_cast<std::int64_t>(self.value.size());
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
  });
  return out;
}

template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& x, int axis) {
  Shape s = x.shape();
  if (axis < 0) axis += static_cast<int>(s.size()) + 1;
  s.insert(s.begin() + axis, 1);
  return reshape(x, s);
}

namespace detail {

inline std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int d = static_cast<int>(shape.size()) - 2; d >= 0; --d)
    s[d] = s[d + 1] * shape[d + 1];
  return s;
}

// out[i] = in[perm_index(i)] mapping for an axes permutation.
template <typename T>
void permute_copy(const T* in, T* out, const Shape& in_shape,
                  const std::vector<int>& axes, bool add_to_out) {
  const Shape out_shape = [&] {
    Shape s(axes.size());
    for (std::size_t d = 0; d < axes.size(); ++d) s[d] = in_shape[axes[d]];
    return s;
  }();
  const auto in_strides = contiguous_strides(in_shape);
  std::vector<std::int64_t> step(axes.size());
  for (std::size_t d = 0; d < axes.size(); ++d) step[d] = in_strides[axes[d]];
  const int rank = static_cast<int>(out_shape.size());
  const std::int64_t total = numel(out_shape);
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t off = 0;
  for (std::int64_t lin = 0; lin < total; ++lin) {
    if (add_to_out) out[lin] += in[off];
    else out[lin] = in[off];
    for (int d = rank - 1; d >= 0; --d) {
      ++idx[d];
      off += step[d];
      if (idx[d] < out_shape[d]) break;
      off -= step[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<int> axes) {
  check(static_cast<int>(axes.size()) == x.rank(),
        "permute: axes rank mismatch for " + shape_str(x.shape()));
  Shape out_shape(axes.size());
  for (std::size_t d = 0; d < axes.size(); ++d) out_shape[d] = x.dim(axes[d]);
  Tensor<T> out = make_tensor<T>(out_shape);
  detail::permute_copy(x.data().data(), out.mutable_data().data(), x.shape(),
                       axes, false);
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn, axes, out_shape](Node<T>& self) {
    xn->ensure_grad();
    // Scatter back through the inverse permutation.
    std::vector<int> inverse(axes.size());
    for (std::size_t d = 0; d < axes.size(); ++d) inverse[axes[d]] = static_cast<int>(d);
    detail::permute_copy(self.grad.data(), xn->grad.data(), out_shape, inverse,
                         true);
  });
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start,
                std::int64_t len) {
  if (axis < 0) axis += x.rank();
  check(axis >= 0 && axis < x.rank(), "slice: bad axis");
  check(start >= 0 && len >= 0 && start + len <= x.dim(axis),
        "slice: range [" + std::to_string(start) + ", " +
            std::to_string(start + len) + ") outside " + shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::int64_t in_axis = x.dim(axis);
  Tensor<T> out = make_tensor<T>(out_shape);
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(px + (o * in_axis + start) * inner, len * inner,
                po + o * len * inner);
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn, axis, start, len, outer, inner,
                                 in_axis](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    T* gx = xn->grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      const T* gsrc = g + o * len * inner;
      T* gdst = gx + (o * in_axis + start) * inner;
      for (std::int64_t i = 0; i < len * inner; ++i) gdst[i] += gsrc[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  Shape out_shape = parts[0].shape();
  std::int64_t axis_total = 0;
  for (const auto& p : parts) {
    check(p.rank() == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d)
      if (d != axis)
        check(p.dim(d) == out_shape[d], "concat: shape mismatch at axis " +
                                            std::to_string(d));
    axis_total += p.dim(axis);
  }
  out_shape[axis] = axis_total;
  std::int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= out_shape[d];
  for (int d = axis + 1; d < rank; ++d) inner *= out_shape[d];

  Tensor<T> out = make_tensor<T>(out_shape);
  T* po = out.mutable_data().data();
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t plen = p.dim(axis);
    const T* pp = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(pp + o * plen * inner, plen * inner,
                  po + (o * axis_total + offset) * inner);
    offset += plen;
  }

  std::vector<std::shared_ptr<Node<T>>> parents;
  std::vector<std::int64_t> lens;
  for (const auto& p : parts) {
    parents.push_back(p.node());
    lens.push_back(p.dim(axis));
  }
  attach_backward<T>(out, parents,
                     [parents, lens, outer, inner, axis_total](Node<T>& self) {
    const T* g = self.grad.data();
    std::int64_t offset = 0;
    for (std::size_t k = 0; k < parents.size(); ++k) {
      auto& pn = parents[k];
      const std::int64_t plen = lens[k];
      if (pn->requires_grad) {
        pn->ensure_grad();
        T* gp = pn->grad.data();
        for (std::int64_t o = 0; o < outer; ++o) {
          const T* gsrc = g + (o * axis_total + offset) * inner;
          T* gdst = gp + o * plen * inner;
          for (std::int64_t i = 0; i < plen * inner; ++i) gdst[i] += gsrc[i];
        }
      }
      offset += plen;
    }
  });
  return out;
}

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, int axis) {
  return concat(std::vector<Tensor<T>>(parts), axis);
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::from_data({}, {acc});
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn](Node<T>& self) {
    xn->ensure_grad();
    const T g = self.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  check(x.size() > 0, "mean_all: empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.size()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& x, int axis, bool keepdim = false) {
  if (axis < 0) axis += x.rank();
  check(axis >= 0 && axis < x.rank(), "sum_axis: bad axis");
  std::int64_t outer = 1, inner = 1;
  const std::int64_t mid = x.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Shape out_shape = x.shape();
  if (keepdim) out_shape[axis] = 1;
  else out_shape.erase(out_shape.begin() + axis);
  Tensor<T> out = make_zeroed<T>(out_shape);
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t m = 0; m < mid; ++m)
      for (std::int64_t i = 0; i < inner; ++i)
        po[o * inner + i] += px[(o * mid + m) * inner + i];
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn, outer, mid, inner](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    T* gx = xn->grad.data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t m = 0; m < mid; ++m)
        for (std::int64_t i = 0; i < inner; ++i)
          gx[(o * mid + m) * inner + i] += g[o * inner + i];
  });
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, int axis, bool keepdim = false) {
  const std::int64_t n = x.dim(axis < 0 ? axis + x.rank() : axis);
  return scale(sum_axis(x, axis, keepdim), T(1) / static_cast<T>(n));
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

// Max-subtracted softmax along `axis`. Outputs are positive and sum to one
// along the reduced axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  if (axis < 0) axis += x.rank();
  check(axis >= 0 && axis < x.rank(), "softmax: bad axis");
  std::int64_t outer = 1, inner = 1;
  const std::int64_t mid = x.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  Tensor<T> out = make_tensor<T>(x.shape());
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  if (inner == 1) {
    // contiguous lanes: vectorized exp, index-ordered reduction
    for (std::int64_t o = 0; o < outer; ++o) {
      detail::ConstArrMap<T> row(px + o * mid, mid);
      detail::ArrMap<T> orow(po + o * mid, mid);
      orow = (row - row.maxCoeff()).exp();
      orow *= T(1) / detail::fixed_sum(po + o * mid, mid);
    }
  } else {
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * mid * inner + i;
        T mx = px[base];
        for (std::int64_t m = 1; m < mid; ++m)
          mx = std::max(mx, px[base + m * inner]);
        T denom = T(0);
        for (std::int64_t m = 0; m < mid; ++m) {
          const T e = std::exp(px[base + m * inner] - mx);
          po[base + m * inner] = e;
          denom += e;
        }
        const T inv = T(1) / denom;
        for (std::int64_t m = 0; m < mid; ++m) po[base + m * inner] *= inv;
      }
    }
  }
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn, outer, mid, inner](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    const T* p = self.value.data();
    T* gx = xn->grad.data();
    if (inner == 1) {
      for (std::int64_t o = 0; o < outer; ++o) {
        detail::ConstArrMap<T> grow(g + o * mid, mid);
        detail::ConstArrMap<T> prow(p + o * mid, mid);
        const T dot = detail::fixed_dot(g + o * mid, p + o * mid, mid);
        detail::ArrMap<T>(gx + o * mid, mid) += prow * (grow - dot);
      }
      return;
    }
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * mid * inner + i;
        T dot = T(0);
        for (std::int64_t m = 0; m < mid; ++m)
          dot += g[base + m * inner] * p[base + m * inner];
        for (std::int64_t m = 0; m < mid; ++m)
          gx[base + m * inner] +=
              p[base + m * inner] * (g[base + m * inner] - dot);
      }
    }
  });
  return out;
}

// Mean cross-entropy of logits [B, K] against integer labels; the backward is
// the fused (softmax - onehot) / B rule.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits,
                             const std::vector<int>& labels) {
  check(logits.rank() == 2, "cross_entropy_mean: logits must be [B, K]");
  const std::int64_t b = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b)
    throw UsageError("cross_entropy_mean: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(b));
  for (int y : labels)
    if (y < 0 || y >= k)
      throw UsageError("cross_entropy_mean: label " + std::to_string(y) +
                       " outside [0, " + std::to_string(k) + ")");
  const T* pl = logits.data().data();
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const T* row = pl + i * k;
    T mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j)
      denom += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(denom) + static_cast<double>(mx) -
             static_cast<double>(row[labels[i]]);
  }
  Tensor<T> out =
      Tensor<T>::from_data({}, {static_cast<T>(total / static_cast<double>(b))});
  auto ln = logits.node();
  attach_backward<T>(out, {ln}, [ln, labels, b, k](Node<T>& self) {
    ln->ensure_grad();
    const T g = self.grad[0];
    const T* pl = ln->value.data();
    T* gx = ln->grad.data();
    const T invb = T(1) / static_cast<T>(b);
    for (std::int64_t i = 0; i < b; ++i) {
      const T* row = pl + i * k;
      T mx = row[0];
      for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
      T denom = T(0);
      for (std::int64_t j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
      for (std::int64_t j = 0; j < k; ++j) {
        T p = std::exp(row[j] - mx) / denom;
        if (j == labels[i]) p -= T(1);
        gx[i * k + j] += g * p * invb;
      }
    }
  });
  return out;
}

// Per-sample division by the maximum absolute entry (floored), sample = index
// along dim 0. Rescales every sample so its largest component has unit
// magnitude unless the whole sample is smaller than `floor`.
template <typename T>
Tensor<T> normalize_max_abs(const Tensor<T>& x, T floor) {
  check(x.rank() >= 2, "normalize_max_abs: need a batch dimension");
  const std::int64_t b = x.dim(0);
  const std::int64_t n = x.size() / b;
  Tensor<T> out = make_tensor<T>(x.shape());
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  std::vector<std::int64_t> argmax(b, 0);
  std::vector<T> denom(b, floor);
  for (std::int64_t i = 0; i < b; ++i) {
    T best = T(0);
    std::int64_t best_j = 0;
    for (std::int64_t j = 0; j < n; ++j) {
      const T a = std::abs(px[i * n + j]);
      if (a > best) {
        best = a;
        best_j = j;
      }
    }
    argmax[i] = best_j;
    denom[i] = std::max(best, floor);
    const T inv = T(1) / denom[i];
    for (std::int64_t j = 0; j < n; ++j) po[i * n + j] = px[i * n + j] * inv;
  }
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn, b, n, argmax, denom, floor](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    const T* px = xn->value.data();
    T* gx = xn->grad.data();
    for (std::int64_t i = 0; i < b; ++i) {
      const T inv = T(1) / denom[i];
      const std::int64_t m = argmax[i];
      const bool floored = std::abs(px[i * n + m]) < floor;
      T gdot = T(0);
      for (std::int64_t j = 0; j < n; ++j) {
        gx[i * n + j] += g[i * n + j] * inv;
        gdot += g[i * n + j] * px[i * n + j];
      }
      if (!floored) {
        const T sgn = px[i * n + m] >= T(0) ? T(1) : T(-1);
        gx[i * n + m] -= sgn * gdot * inv * inv;
      }
    }
  });
  return out;
}

}  // namespace mer
