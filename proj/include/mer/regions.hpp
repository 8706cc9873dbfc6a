// Differentiable region extraction: crop + bilinear resize of image/field
// stacks to the fixed region resolution, and the patch tiling that feeds the
// token embeddings.
#pragma once

#include "mer/geometry.hpp"
#include "mer/ops_nn.hpp"

namespace mer {

// Crops each sample's box out of stack [B, M, H, W] and bilinearly resizes it
// to out_h x out_w (corner-aligned sampling; an exact full-image box at the
// source size reproduces the input bit-for-bit). When dx/dy channel indices
// are given, those channels are rescaled by the spatial resize ratio so the
// values remain displacements in output-pixel units.
template <typename T>
Tensor<T> crop_resize(const Tensor<T>& stack, const std::vector<Box>& boxes,
                      std::int64_t out_h, std::int64_t out_w,
                      int dx_channel = -1, int dy_channel = -1) {
  check(stack.rank() == 4, "crop_resize: stack must be [B, M, H, W]");
  const std::int64_t b = stack.dim(0), m = stack.dim(1), h = stack.dim(2),
                     w = stack.dim(3);
  if (static_cast<std::int64_t>(boxes.size()) != b)
    throw UsageError("crop_resize: " + std::to_string(boxes.size()) +
                     " boxes for batch of " + std::to_string(b));
  if (out_h < 2 || out_w < 2)
    throw UsageError("crop_resize: output size must be at least 2x2");

  Tensor<T> coords = Tensor<T>::zeros({b, out_h, out_w, 2});
  std::vector<T> ratio_data(static_cast<std::size_t>(b * m), T(1));
  {
    auto c = coords.mutable_data();
    for (std::int64_t i = 0; i < b; ++i) {
      const Box& box = boxes[i];
      if (box.width() <= 0.0 || box.height() <= 0.0)
        throw GeometryError("crop_resize: degenerate box " +
                            std::to_string(box.width()) + " x " +
                            std::to_string(box.height()));
      if (box.x1 < 0 || box.y1 < 0 || box.x0 > static_cast<double>(w - 1) ||
          box.y0 > static_cast<double>(h - 1))
        throw GeometryError("crop_resize: box does not intersect the image");
      const double sx = box.width() / static_cast<double>(out_w - 1);
      const double sy = box.height() / static_cast<double>(out_h - 1);
      for (std::int64_t y = 0; y < out_h; ++y)
        for (std::int64_t x = 0; x < out_w; ++x) {
          c[((i * out_h + y) * out_w + x) * 2 + 0] =
              static_cast<T>(box.x0 + sx * static_cast<double>(x));
          c[((i * out_h + y) * out_w + x) * 2 + 1] =
              static_cast<T>(box.y0 + sy * static_cast<double>(y));
        }
      if (dx_channel >= 0)
        ratio_data[i * m + dx_channel] = static_cast<T>(1.0 / sx);
      if (dy_channel >= 0)
        ratio_data[i * m + dy_channel] = static_cast<T>(1.0 / sy);
    }
  }
  Tensor<T> out = bilinear_grid_sample(stack, coords);
  if (dx_channel >= 0 || dy_channel >= 0) {
    Tensor<T> ratios = Tensor<T>::from_data({b, m, 1, 1}, std::move(ratio_data));
    out = mul(out, ratios);
  }
  return out;
}

// Non-overlapping row-major tiling of [B, M, H, W] into tokens
// [B, N, M*P*P] with N = (H/P) * (W/P); each token is a channel-major
// flattened patch. Exactly inverted by unpatchify.
template <typename T>
Tensor<T> patchify(const Tensor<T>& region, std::int64_t p) {
  check(region.rank() == 4, "patchify: region must be [B, M, H, W]");
  const std::int64_t b = region.dim(0), m = region.dim(1), h = region.dim(2),
                     w = region.dim(3);
  if (p < 1 || h % p != 0 || w % p != 0)
    throw UsageError("patchify: size " + std::to_string(h) + "x" +
                     std::to_string(w) + " not divisible by patch size " +
                     std::to_string(p));
  const std::int64_t gh = h / p, gw = w / p, n = gh * gw, d = m * p * p;
  Tensor<T> out = make_tensor<T>({b, n, d});
  const T* src = region.data().data();
  T* dst = out.mutable_data().data();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx) {
        T* tok = dst + (i * n + gy * gw + gx) * d;
        for (std::int64_t c = 0; c < m; ++c)
          for (std::int64_t py = 0; py < p; ++py) {
            const T* row =
                src + ((i * m + c) * h + gy * p + py) * w + gx * p;
            std::copy_n(row, p, tok + (c * p + py) * p);
          }
      }
  auto rn = region.node();
  attach_backward<T>(out, {rn}, [rn, b, m, h, w, p, gh, gw, n, d](Node<T>& self) {
    rn->ensure_grad();
    const T* g = self.grad.data();
    T* gr = rn->grad.data();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx) {
          const T* tok = g + (i * n + gy * gw + gx) * d;
          for (std::int64_t c = 0; c < m; ++c)
            for (std::int64_t py = 0; py < p; ++py) {
              T* row = gr + ((i * m + c) * h + gy * p + py) * w + gx * p;
              const T* trow = tok + (c * p + py) * p;
              for (std::int64_t px = 0; px < p; ++px) row[px] += trow[px];
            }
        }
  });
  return out;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::int64_t m, std::int64_t h,
                     std::int64_t w, std::int64_t p) {
  check(tokens.rank() == 3, "unpatchify: tokens must be [B, N, D]");
  const std::int64_t b = tokens.dim(0), n = tokens.dim(1), d = tokens.dim(2);
  if (h % p != 0 || w % p != 0 || n != (h / p) * (w / p) || d != m * p * p)
    throw UsageError("unpatchify: geometry mismatch");
  const std::int64_t gh = h / p, gw = w / p;
  Tensor<T> out = make_tensor<T>({b, m, h, w});
  const T* src = tokens.data().data();
  T* dst = out.mutable_data().data();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx) {
        const T* tok = src + (i * n + gy * gw + gx) * d;
        for (std::int64_t c = 0; c < m; ++c)
          for (std::int64_t py = 0; py < p; ++py)
            std::copy_n(tok + (c * p + py) * p, p,
                        dst + ((i * m + c) * h + gy * p + py) * w + gx * p);
      }
  auto tn = tokens.node();
  attach_backward<T>(out, {tn}, [tn, b, m, h, w, p, gh, gw, n, d](Node<T>& self) {
    tn->ensure_grad();
    const T* g = self.grad.data();
    T* gt = tn->grad.data();
    for (std::int64_t i = 0; i < b; ++i)
      for (std::int64_t gy = 0; gy < gh; ++gy)
        for (std::int64_t gx = 0; gx < gw; ++gx) {
          T* tok = gt + (i * n + gy * gw + gx) * d;
          for (std::int64_t c = 0; c < m; ++c)
            for (std::int64_t py = 0; py < p; ++py) {
              const T* row = g + ((i * m + c) * h + gy * p + py) * w + gx * p;
              T* trow = tok + (c * p + py) * p;
              for (std::int64_t px = 0; px < p; ++px) trow[px] += row[px];
            }
        }
  });
  return out;
}

}  // namespace mer
