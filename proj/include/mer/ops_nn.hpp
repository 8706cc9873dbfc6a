// Network-layer operations: convolution (im2col + GEMM), batch and layer
// normalization, nearest-neighbour upsampling, differentiable bilinear grid
// sampling, and the per-head token-mixing primitive used by the fusion
// layers.
#pragma once

#include <array>

#include "mer/ops.hpp"

namespace mer {

// ---------------------------------------------------------------------------
// Layer normalization over the last dimension.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5)) {
  check(x.rank() >= 1, "layer_norm: rank >= 1 required");
  const std::int64_t f = x.dim(-1);
  check(gamma.size() == f && beta.size() == f,
        "layer_norm: scale/shift must match last dim " + std::to_string(f));
  const std::int64_t rows = x.size() / f;
  Tensor<T> out = make_tensor<T>(x.shape());
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  T* po = out.mutable_data().data();
  std::vector<T> inv_std(rows), mean(rows);
  detail::ConstArrMap<T> gmap(pg, f);
  detail::ConstArrMap<T> bmap(pb, f);
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * f;
    const T mu = detail::fixed_sum(row, f) / static_cast<T>(f);
    const T var = detail::fixed_transform_sum(
                      row, f, [mu](T v) { return (v - mu) * (v - mu); }) /
                  static_cast<T>(f);
    const T is = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = is;
    detail::ArrMap<T>(po + r * f, f) =
        (detail::ConstArrMap<T>(row, f) - mu) * is * gmap + bmap;
  }
  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  attach_backward<T>(out, {xn, gn, bn},
                     [xn, gn, bn, rows, f, mean, inv_std](Node<T>& self) {
    const T* g = self.grad.data();
    const T* px = xn->value.data();
    const T* pg = gn->value.data();
    if (xn->requires_grad) xn->ensure_grad();
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    detail::ConstArrMap<T> gmap(pg, f);
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* grow = g + r * f;
      const T* xrow = px + r * f;
      const T is = inv_std[r];
      const T mu = mean[r];
      const T sum_gh = detail::fixed_dot(grow, pg, f);
      const T sum_gh_xhat =
          (detail::fixed_dot3(grow, pg, xrow, f) - mu * sum_gh) * is;
      detail::ConstArrMap<T> gm(grow, f);
      detail::ConstArrMap<T> xm(xrow, f);
      if (gn->requires_grad)
        detail::ArrMap<T>(gn->grad.data(), f) += gm * (xm - mu) * is;
      if (bn->requires_grad) detail::ArrMap<T>(bn->grad.data(), f) += gm;
      if (xn->requires_grad) {
        const T invf = T(1) / static_cast<T>(f);
        detail::ArrMap<T>(xn->grad.data() + r * f, f) +=
            is * (gm * gmap - invf * sum_gh -
                  (xm - mu) * is * (invf * sum_gh_xhat));
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization, features along dim 1 (works for [B, F] and
// [B, C, H, W]). Training mode uses biased batch statistics and updates the
// running buffers in place; eval mode reads the running buffers.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, std::vector<T>& running_mean,
                     std::vector<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
  check(x.rank() >= 2, "batch_norm: rank >= 2 required");
  const std::int64_t c = x.dim(1);
  check(gamma.size() == c && beta.size() == c &&
            static_cast<std::int64_t>(running_mean.size()) == c &&
            static_cast<std::int64_t>(running_var.size()) == c,
        "batch_norm: feature size mismatch");
  const std::int64_t b = x.dim(0);
  if (training && b < 1) throw UsageError("batch_norm: empty batch");
  std::int64_t inner = 1;
  for (int d = 2; d < x.rank(); ++d) inner *= x.dim(d);
  const std::int64_t per_feature = b * inner;

  std::vector<T> mean(c), inv_std(c);
  if (training) {
    const T* px = x.data().data();
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T mu = T(0);
      for (std::int64_t i = 0; i < b; ++i)
        mu += detail::fixed_sum(px + (i * c + ch) * inner, inner);
      mu /= static_cast<T>(per_feature);
      T var = T(0);
      for (std::int64_t i = 0; i < b; ++i)
        var += detail::fixed_transform_sum(
            px + (i * c + ch) * inner, inner,
            [mu](T v) { return (v - mu) * (v - mu); });
      var /= static_cast<T>(per_feature);
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * var;
    }
  } else {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      inv_std[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }

  Tensor<T> out = make_tensor<T>(x.shape());
  {
    const T* px = x.data().data();
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
    T* po = out.mutable_data().data();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const std::int64_t base = (i * c + ch) * inner;
        detail::ArrMap<T>(po + base, inner) =
            (detail::ConstArrMap<T>(px + base, inner) - mean[ch]) *
                (inv_std[ch] * pg[ch]) +
            pb[ch];
      }
  }

  auto xn = x.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  attach_backward<T>(out, {xn, gn, bn}, [xn, gn, bn, b, c, inner, mean,
                                         inv_std, training](Node<T>& self) {
    const T* g = self.grad.data();
    const T* px = xn->value.data();
    const T* pg = gn->value.data();
    if (xn->requires_grad) xn->ensure_grad();
    if (gn->requires_grad) gn->ensure_grad();
    if (bn->requires_grad) bn->ensure_grad();
    const std::int64_t per_feature = b * inner;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T mu = mean[ch], is = inv_std[ch];
      T sum_g = T(0), sum_g_xhat = T(0);
      for (std::int64_t i = 0; i < b; ++i) {
        const std::int64_t base = (i * c + ch) * inner;
        const T sg = detail::fixed_sum(g + base, inner);
        sum_g += sg;
        sum_g_xhat +=
            (detail::fixed_dot(g + base, px + base, inner) - mu * sg) * is;
      }
      if (gn->requires_grad) gn->grad[ch] += sum_g_xhat;
      if (bn->requires_grad) bn->grad[ch] += sum_g;
      if (xn->requires_grad) {
        const T ga = pg[ch];
        if (training) {
          const T invn = T(1) / static_cast<T>(per_feature);
          for (std::int64_t i = 0; i < b; ++i) {
            const std::int64_t base = (i * c + ch) * inner;
            detail::ConstArrMap<T> gseg(g + base, inner);
            detail::ConstArrMap<T> xseg(px + base, inner);
            detail::ArrMap<T>(xn->grad.data() + base, inner) +=
                (ga * is) * (gseg - invn * sum_g -
                             (xseg - mu) * is * (invn * sum_g_xhat));
          }
        } else {
          for (std::int64_t i = 0; i < b; ++i) {
            const std::int64_t base = (i * c + ch) * inner;
            detail::ArrMap<T>(xn->grad.data() + base, inner) +=
                (ga * is) * detail::ConstArrMap<T>(g + base, inner);
          }
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with zero padding; x [B, Cin, H, W],
// w [Cout, Cin, kh, kw] -> [B, Cout, OH, OW].
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, std::int64_t cin, std::int64_t h, std::int64_t w,
            std::int64_t kh, std::int64_t kw, std::int64_t stride,
            std::int64_t pad, std::int64_t oh, std::int64_t ow, T* cols) {
  // cols laid out [oh*ow, cin*kh*kw]
  const std::int64_t k = cin * kh * kw;
  for (std::int64_t oy = 0; oy < oh; ++oy) {
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      T* dst = cols + (oy * ow + ox) * k;
      const std::int64_t iy0 = oy * stride - pad;
      const std::int64_t ix0 = ox * stride - pad;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = iy0 + ky;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = ix0 + kx;
            *dst++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                         ? x[(ci * h + iy) * w + ix]
                         : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::int64_t cin, std::int64_t h,
                std::int64_t w, std::int64_t kh, std::int64_t kw,
                std::int64_t stride, std::int64_t pad, std::int64_t oh,
                std::int64_t ow, T* x) {
  const std::int64_t k = cin * kh * kw;
  for (std::int64_t oy = 0; oy < oh; ++oy) {
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      const T* src = cols + (oy * ow + ox) * k;
      const std::int64_t iy0 = oy * stride - pad;
      const std::int64_t ix0 = ox * stride - pad;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        for (std::int64_t ky = 0; ky < kh; ++ky) {
          const std::int64_t iy = iy0 + ky;
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t ix = ix0 + kx;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w)
              x[(ci * h + iy) * w + ix] += *src;
            ++src;
          }
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::int64_t stride = 1, std::int64_t pad = 0) {
  check(x.rank() == 4, "conv2d: input must be [B, C, H, W], got " +
                           shape_str(x.shape()));
  check(w.rank() == 4, "conv2d: weight must be [Cout, Cin, kh, kw]");
  const std::int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  check(w.dim(1) == cin, "conv2d: weight expects " + std::to_string(w.dim(1)) +
                             " input channels, input has " +
                             std::to_string(cin));
  if (kh > h + 2 * pad || kw > wd + 2 * pad)
    throw ShapeError("conv2d: kernel " + shape_str(w.shape()) +
                     " larger than padded input " + shape_str(x.shape()) +
                     " (pad " + std::to_string(pad) + ")");
  const std::int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias)
    check(bias.size() == cout, "conv2d: bias size must equal Cout");

  Tensor<T> out = make_tensor<T>({b, cout, oh, ow});
  const std::int64_t k = cin * kh * kw;
  const std::int64_t p = oh * ow;
  const T* px = x.data().data();
  const T* pw = w.data().data();
  T* po = out.mutable_data().data();
  {
    std::vector<T> cols(static_cast<std::size_t>(p * k));
    for (std::int64_t i = 0; i < b; ++i) {
      detail::im2col(px + i * cin * h * wd, cin, h, wd, kh, kw, stride, pad,
                     oh, ow, cols.data());
      // [cout, k] x [p, k]^T -> [cout, p]
      detail::gemm(pw, cout, k, false, cols.data(), p, k, true,
                   po + i * cout * p, false);
    }
  }
  if (has_bias) {
    const T* pb = bias.data().data();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t co = 0; co < cout; ++co) {
        T* row = po + (i * cout + co) * p;
        const T bv = pb[co];
        for (std::int64_t j = 0; j < p; ++j) row[j] += bv;
      }
  }

  auto xn = x.node();
  auto wn = w.node();
  std::vector<std::shared_ptr<Node<T>>> parents = {xn, wn};
  std::shared_ptr<Node<T>> bnode = has_bias ? bias.node() : nullptr;
  if (has_bias) parents.push_back(bnode);
  attach_backward<T>(out, parents, [xn, wn, bnode, b, cin, h, wd, cout, kh, kw,
                                    stride, pad, oh, ow](Node<T>& self) {
    const std::int64_t k = cin * kh * kw;
    const std::int64_t p = oh * ow;
    const T* g = self.grad.data();
    if (xn->requires_grad) xn->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    if (bnode && bnode->requires_grad) bnode->ensure_grad();
    const T* px = xn->value.data();
    const T* pw = wn->value.data();
    {
      std::vector<T> cols(static_cast<std::size_t>(p * k));
      std::vector<T> dcols;
      if (xn->requires_grad) dcols.resize(static_cast<std::size_t>(p * k));
      for (std::int64_t i = 0; i < b; ++i) {
        const T* gi = g + i * cout * p;
        if (wn->requires_grad) {
          detail::im2col(px + i * cin * h * wd, cin, h, wd, kh, kw, stride,
                         pad, oh, ow, cols.data());
          // dW += G [cout, p] x cols [p, k]
          detail::gemm(gi, cout, p, false, cols.data(), p, k, false,
                       wn->grad.data(), true);
        }
        if (xn->requires_grad) {  // dcols = G^T [p, cout] x W [cout, k]
          detail::gemm(gi, cout, p, true, pw, cout, k, false, dcols.data(),
                       false);
          detail::col2im_add(dcols.data(), cin, h, wd, kh, kw, stride, pad, oh,
                             ow, xn->grad.data() + i * cin * h * wd);
        }
      }
    }
    if (bnode && bnode->requires_grad) {
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t co = 0; co < cout; ++co) {
          T acc = T(0);
          const T* row = g + (i * cout + co) * p;
          for (std::int64_t j = 0; j < p; ++j) acc += row[j];
          bnode->grad[co] += acc;
        }
    }
  });
  return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w,
                 std::int64_t stride = 1, std::int64_t pad = 0) {
  return conv2d(x, w, Tensor<T>{}, stride, pad);
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsampling.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> nearest_upsample2(const Tensor<T>& x) {
  check(x.rank() == 4, "nearest_upsample2: input must be [B, C, H, W]");
  const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> out = make_tensor<T>({b, c, 2 * h, 2 * w});
  const T* px = x.data().data();
  T* po = out.mutable_data().data();
  for (std::int64_t bc = 0; bc < b * c; ++bc) {
    const T* src = px + bc * h * w;
    T* dst = po + bc * 4 * h * w;
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t x2 = 0; x2 < 2 * w; ++x2)
        dst[y * 2 * w + x2] = src[(y / 2) * w + (x2 / 2)];
  }
  auto xn = x.node();
  attach_backward<T>(out, {xn}, [xn, b, c, h, w](Node<T>& self) {
    xn->ensure_grad();
    const T* g = self.grad.data();
    T* gx = xn->grad.data();
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
      const T* gsrc = g + bc * 4 * h * w;
      T* gdst = gx + bc * h * w;
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t x2 = 0; x2 < 2 * w; ++x2)
          gdst[(y / 2) * w + (x2 / 2)] += gsrc[y * 2 * w + x2];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling with border clamping.
// img [B, C, H, W], coords [B, Ho, Wo, 2] holding (x, y) in pixel units.
// output(b, c, y, x) interpolates img at coords(b, y, x); differentiable in
// both img and coords. Exactly-integer coordinates reproduce source pixels
// bit-for-bit.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> bilinear_grid_sample(const Tensor<T>& img, const Tensor<T>& coords) {
  check(img.rank() == 4, "bilinear_grid_sample: image must be [B, C, H, W]");
  check(coords.rank() == 4 && coords.dim(3) == 2,
        "bilinear_grid_sample: coords must be [B, Ho, Wo, 2]");
  check(img.dim(0) == coords.dim(0),
        "bilinear_grid_sample: batch mismatch between image and coords");
  const std::int64_t b = img.dim(0), c = img.dim(1), h = img.dim(2),
                     w = img.dim(3);
  const std::int64_t oh = coords.dim(1), ow = coords.dim(2);
  Tensor<T> out = make_tensor<T>({b, c, oh, ow});
  const T* pi = img.data().data();
  const T* pc = coords.data().data();
  T* po = out.mutable_data().data();

  auto sample_plane = [&](std::int64_t bi, std::int64_t y, std::int64_t x,
                          auto&& fn) {
    const T* cr = pc + ((bi * oh + y) * ow + x) * 2;
    T cx = cr[0], cy = cr[1];
    const bool clamped_x = cx < T(0) || cx > T(w - 1);
    const bool clamped_y = cy < T(0) || cy > T(h - 1);
    cx = std::clamp(cx, T(0), T(w - 1));
    cy = std::clamp(cy, T(0), T(h - 1));
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(cx));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(cy));
    const std::int64_t x1 = std::min(x0 + 1, w - 1);
    const std::int64_t y1 = std::min(y0 + 1, h - 1);
    const T fx = cx - static_cast<T>(x0);
    const T fy = cy - static_cast<T>(y0);
    fn(x0, x1, y0, y1, fx, fy, clamped_x, clamped_y);
  };

  for (std::int64_t bi = 0; bi < b; ++bi) {
    for (std::int64_t y = 0; y < oh; ++y) {
      for (std::int64_t x = 0; x < ow; ++x) {
        sample_plane(bi, y, x, [&](std::int64_t x0, std::int64_t x1,
                                   std::int64_t y0, std::int64_t y1, T fx,
                                   T fy, bool, bool) {
          const T w00 = (T(1) - fx) * (T(1) - fy);
          const T w01 = fx * (T(1) - fy);
          const T w10 = (T(1) - fx) * fy;
          const T w11 = fx * fy;
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const T* plane = pi + (bi * c + ch) * h * w;
            po[((bi * c + ch) * oh + y) * ow + x] =
                w00 * plane[y0 * w + x0] + w01 * plane[y0 * w + x1] +
                w10 * plane[y1 * w + x0] + w11 * plane[y1 * w + x1];
          }
        });
      }
    }
  }

  auto in_ = img.node();
  auto cn = coords.node();
  attach_backward<T>(out, {in_, cn}, [in_, cn, b, c, h, w, oh, ow](Node<T>& self) {
    const T* g = self.grad.data();
    const T* pi = in_->value.data();
    const T* pc = cn->value.data();
    if (in_->requires_grad) in_->ensure_grad();
    if (cn->requires_grad) cn->ensure_grad();
    for (std::int64_t bi = 0; bi < b; ++bi) {
      for (std::int64_t y = 0; y < oh; ++y) {
        for (std::int64_t x = 0; x < ow; ++x) {
          const T* cr = pc + ((bi * oh + y) * ow + x) * 2;
          T cx = cr[0], cy = cr[1];
          const bool clamped_x = cx < T(0) || cx > T(w - 1);
          const bool clamped_y = cy < T(0) || cy > T(h - 1);
          cx = std::clamp(cx, T(0), T(w - 1));
          cy = std::clamp(cy, T(0), T(h - 1));
          const std::int64_t x0 = static_cast<std::int64_t>(std::floor(cx));
          const std::int64_t y0 = static_cast<std::int64_t>(std::floor(cy));
          const std::int64_t x1 = std::min(x0 + 1, w - 1);
          const std::int64_t y1 = std::min(y0 + 1, h - 1);
          const T fx = cx - static_cast<T>(x0);
          const T fy = cy - static_cast<T>(y0);
          const T w00 = (T(1) - fx) * (T(1) - fy);
          const T w01 = fx * (T(1) - fy);
          const T w10 = (T(1) - fx) * fy;
          const T w11 = fx * fy;
          T dx_acc = T(0), dy_acc = T(0);
          for (std::int64_t ch = 0; ch < c; ++ch) {
            const std::int64_t gi = ((bi * c + ch) * oh + y) * ow + x;
            const T gv = g[gi];
            if (gv == T(0)) continue;
            const T* plane = pi + (bi * c + ch) * h * w;
            const T v00 = plane[y0 * w + x0];
            const T v01 = plane[y0 * w + x1];
            const T v10 = plane[y1 * w + x0];
            const T v11 = plane[y1 * w + x1];
            if (in_->requires_grad) {
              T* gplane = in_->grad.data() + (bi * c + ch) * h * w;
              gplane[y0 * w + x0] += gv * w00;
              gplane[y0 * w + x1] += gv * w01;
              gplane[y1 * w + x0] += gv * w10;
              gplane[y1 * w + x1] += gv * w11;
            }
            dx_acc += gv * ((T(1) - fy) * (v01 - v00) + fy * (v11 - v10));
            dy_acc += gv * ((T(1) - fx) * (v10 - v00) + fx * (v11 - v01));
          }
          if (cn->requires_grad) {
            T* gc = cn->grad.data() + ((bi * oh + y) * ow + x) * 2;
            if (!clamped_x) gc[0] += dx_acc;
            if (!clamped_y) gc[1] += dy_acc;
          }
        }
      }
    }
  });
  return out;
}

// Constant (x, y) pixel-coordinate grid of shape [h, w, 2].
template <typename T>
Tensor<T> identity_grid(std::int64_t h, std::int64_t w) {
  Tensor<T> g = make_tensor<T>({h, w, 2});
  T* p = g.mutable_data().data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      p[(y * w + x) * 2 + 0] = static_cast<T>(x);
      p[(y * w + x) * 2 + 1] = static_cast<T>(y);
    }
  return g;
}

// ---------------------------------------------------------------------------
// Per-head token mixing: x [B, h, n, c], weights [h, n] -> [B, h, 1, c] with
// y(b, k, 0, :) = sum_i weights(k, i) * x(b, k, i, :). This is the learned
// linear combination across tokens used by the fusion layers.
// ---------------------------------------------------------------------------
template <typename T>
Tensor<T> head_token_mix(const Tensor<T>& x, const Tensor<T>& weights) {
  check(x.rank() == 4, "head_token_mix: input must be [B, h, n, c]");
  check(weights.rank() == 2 && weights.dim(0) == x.dim(1) &&
            weights.dim(1) == x.dim(2),
        "head_token_mix: weights must be [h, n] = [" + std::to_string(x.dim(1)) +
            ", " + std::to_string(x.dim(2)) + "], got " +
            shape_str(weights.shape()));
  const std::int64_t b = x.dim(0), hh = x.dim(1), n = x.dim(2), c = x.dim(3);
  Tensor<T> out = make_zeroed<T>({b, hh, 1, c});
  const T* px = x.data().data();
  const T* pw = weights.data().data();
  T* po = out.mutable_data().data();
  for (std::int64_t bi = 0; bi < b; ++bi)
    for (std::int64_t k = 0; k < hh; ++k) {
      T* dst = po + (bi * hh + k) * c;
      const T* base = px + ((bi * hh + k) * n) * c;
      for (std::int64_t i = 0; i < n; ++i) {
        const T wv = pw[k * n + i];
        const T* src = base + i * c;
        for (std::int64_t j = 0; j < c; ++j) dst[j] += wv * src[j];
      }
    }
  auto xn = x.node();
  auto wn = weights.node();
  attach_backward<T>(out, {xn, wn}, [xn, wn, b, hh, n, c](Node<T>& self) {
    const T* g = self.grad.data();
    const T* px = xn->value.data();
    const T* pw = wn->value.data();
    if (xn->requires_grad) xn->ensure_grad();
    if (wn->requires_grad) wn->ensure_grad();
    for (std::int64_t bi = 0; bi < b; ++bi)
      for (std::int64_t k = 0; k < hh; ++k) {
        const T* grow = g + (bi * hh + k) * c;
        for (std::int64_t i = 0; i < n; ++i) {
          const std::int64_t xoff = ((bi * hh + k) * n + i) * c;
          if (xn->requires_grad) {
            const T wv = pw[k * n + i];
            for (std::int64_t j = 0; j < c; ++j)
              xn->grad[xoff + j] += wv * grow[j];
          }
          if (wn->requires_grad) {
            T acc = T(0);
            for (std::int64_t j = 0; j < c; ++j)
              acc += grow[j] * px[xoff + j];
            wn->grad[k * n + i] += acc;
          }
        }
      }
  });
  return out;
}

}  // namespace mer
