// Displacement generation: a convolutional encoder-decoder that maps an
// onset/apex image stack to a dense per-pixel displacement field, the
// warping operator that reconstructs the apex from the onset, the three
// field losses, and the self-supervised frame-pair sampler.
//
// Conventions:
//   * The network's tanh output lives in [-1, 1] per axis and is interpreted
//     in normalized image coordinates; pixels = output * alpha * (W, H).
//   * Fields are backward sampling maps: warp(onset, D)(y, x) samples the
//     onset at (x + Dx, y + Dy). Content moving up in the image therefore
//     corresponds to positive Dy.
//   * Optional per-sample magnitude normalization divides the tanh output by
//     its own maximum absolute component before scaling, which amplifies
//     subtle motion and caps strong motion at the alpha bound.
#pragma once

#include "mer/flow.hpp"
#include "mer/optim.hpp"

namespace mer {

template <typename T>
struct DisplacementLossWeights {
  T rec = T(10);
  T nm = T(1);
  T sm = T(0.2);
};

template <typename T>
class DisplacementNet {
 public:
  DisplacementNet() = default;
  DisplacementNet(std::int64_t in_channels, int levels,
                  std::int64_t base_channels, T alpha, bool normalize,
                  Rng& rng)
      : levels_(levels), alpha_(alpha), normalize_(normalize) {
    if (levels < 1) throw UsageError("DisplacementNet: levels must be >= 1");
    std::int64_t ch = in_channels;
    for (int i = 0; i < levels; ++i) {
      const std::int64_t out = base_channels << std::min(i, 3);
      enc_.push_back({Conv2dLayer<T>(ch, out, 3, 2, 1, rng, false),
                      BatchNormLayer<T>(out)});
      ch = out;
    }
    for (int i = 0; i < levels; ++i) {
      const std::int64_t out =
          std::max<std::int64_t>(base_channels / 2,
                                 base_channels << std::min(levels - 2 - i, 3));
      dec_.push_back({Conv2dLayer<T>(ch, out, 3, 1, 1, rng, false),
                      BatchNormLayer<T>(out)});
      ch = out;
    }
    head_ = Conv2dLayer<T>(ch, 2, 3, 1, 1, rng, true);
  }

  // pair_stack [B, 2*M, H, W] -> displacement [B, 2, H, W] in pixels.
  Tensor<T> forward(const Tensor<T>& pair_stack, bool training) {
    check(pair_stack.rank() == 4, "DisplacementNet: input must be [B, C, H, W]");
    const std::int64_t h = pair_stack.dim(2), w = pair_stack.dim(3);
    const std::int64_t div = std::int64_t(1) << levels_;
    if (h % div != 0 || w % div != 0)
      throw ResolutionError("DisplacementNet: input " + std::to_string(w) +
                            "x" + std::to_string(h) +
                            " is not divisible by " + std::to_string(div) +
                            "; calibrate frames first");
    Tensor<T> x = pair_stack;
    for (auto& b : enc_) x = relu(b.bn.forward(b.conv.forward(x), training));
    for (auto& b : dec_) {
      x = nearest_upsample2(x);
      x = relu(b.bn.forward(b.conv.forward(x), training));
    }
    Tensor<T> raw = tanh_op(head_.forward(x));  // [-1, 1] per axis
    if (normalize_) raw = normalize_max_abs(raw, T(1e-6));
    // normalized coordinates -> pixels
    Tensor<T> axis_scale = Tensor<T>::from_data(
        {2, 1, 1}, {alpha_ * static_cast<T>(w), alpha_ * static_cast<T>(h)});
    return mul(raw, axis_scale);
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    for (std::size_t i = 0; i < enc_.size(); ++i) {
      enc_[i].conv.collect_params(prefix + ".enc" + std::to_string(i) + ".conv", out);
      enc_[i].bn.collect_params(prefix + ".enc" + std::to_string(i) + ".bn", out);
    }
    for (std::size_t i = 0; i < dec_.size(); ++i) {
      dec_[i].conv.collect_params(prefix + ".dec" + std::to_string(i) + ".conv", out);
      dec_[i].bn.collect_params(prefix + ".dec" + std::to_string(i) + ".bn", out);
    }
    head_.collect_params(prefix + ".head", out);
  }

  void collect_buffers(
      const std::string& prefix,
      std::vector<std::pair<std::string, std::vector<T>*>>& out) {
    for (std::size_t i = 0; i < enc_.size(); ++i)
      enc_[i].bn.collect_buffers(prefix + ".enc" + std::to_string(i) + ".bn", out);
    for (std::size_t i = 0; i < dec_.size(); ++i)
      dec_[i].bn.collect_buffers(prefix + ".dec" + std::to_string(i) + ".bn", out);
  }

  T alpha() const { return alpha_; }
  bool normalized() const { return normalize_; }
  void set_normalize(bool flag) { normalize_ = flag; }

 private:
  struct Block {
    Conv2dLayer<T> conv;
    BatchNormLayer<T> bn;
  };
  int levels_ = 0;
  T alpha_ = T(0.2);
  bool normalize_ = true;
  std::vector<Block> enc_, dec_;
  Conv2dLayer<T> head_;
};

// Backward warp: out(y, x) = bilinear(img, (x + Dx, y + Dy)), border-clamped.
// img [B, C, H, W], field [B, 2, H, W].
template <typename T>
Tensor<T> warp(const Tensor<T>& img, const Tensor<T>& field) {
  check(img.rank() == 4 && field.rank() == 4 && field.dim(1) == 2,
        "warp: expected img [B, C, H, W] and field [B, 2, H, W]");
  check(img.dim(0) == field.dim(0) && img.dim(2) == field.dim(2) &&
            img.dim(3) == field.dim(3),
        "warp: image " + shape_str(img.shape()) + " and field " +
            shape_str(field.shape()) + " disagree");
  Tensor<T> offsets = permute(field, {0, 2, 3, 1});  // [B, H, W, 2]
  Tensor<T> coords = add(offsets, identity_grid<T>(img.dim(2), img.dim(3)));
  return bilinear_grid_sample(img, coords);
}

// Mean absolute difference over all pixels and channels.
template <typename T>
Tensor<T> reconstruction_loss(const Tensor<T>& apex_hat, const Tensor<T>& apex) {
  check(apex_hat.shape() == apex.shape(),
        "reconstruction_loss: shape mismatch " + shape_str(apex_hat.shape()) +
            " vs " + shape_str(apex.shape()));
  return mean_all(abs_op(sub(apex_hat, apex)));
}

// Mean over pixels of the L1 norm of the displacement 2-vector, averaged over
// the batch: sum |Dx| + |Dy| / (w * h).
template <typename T>
Tensor<T> magnitude_loss(const Tensor<T>& field) {
  check(field.rank() == 4 && field.dim(1) == 2,
        "magnitude_loss: field must be [B, 2, H, W]");
  // mean_all divides by B*2*h*w; the per-pixel L1 wants B*h*w
  return scale(mean_all(abs_op(field)), T(2));
}

// Mean absolute neighbour difference, horizontal pairs normalized by
// h*(w-1) and vertical pairs by w*(h-1); components contribute via L1.
template <typename T>
Tensor<T> smoothness_loss(const Tensor<T>& field) {
  check(field.rank() == 4 && field.dim(1) == 2,
        "smoothness_loss: field must be [B, 2, H, W]");
  const std::int64_t b = field.dim(0), h = field.dim(2), w = field.dim(3);
  if (h < 2 || w < 2)
    throw UsageError("smoothness_loss: field must be at least 2x2, got " +
                     shape_str(field.shape()));
  Tensor<T> dh = sub(slice(field, 3, 1, w - 1), slice(field, 3, 0, w - 1));
  Tensor<T> dv = sub(slice(field, 2, 1, h - 1), slice(field, 2, 0, h - 1));
  Tensor<T> term_h =
      scale(sum_all(abs_op(dh)), T(1) / static_cast<T>(b * h * (w - 1)));
  Tensor<T> term_v =
      scale(sum_all(abs_op(dv)), T(1) / static_cast<T>(b * w * (h - 1)));
  return add(term_h, term_v);
}

template <typename T>
struct DisplacementLosses {
  Tensor<T> rec, nm, sm, total;
};

template <typename T>
DisplacementLosses<T> displacement_loss(const Tensor<T>& onset,
                                        const Tensor<T>& apex,
                                        const Tensor<T>& field,
                                        const DisplacementLossWeights<T>& w) {
  if (w.rec < T(0) || w.nm < T(0) || w.sm < T(0))
    throw UsageError("displacement_loss: weights must be non-negative");
  DisplacementLosses<T> out;
  out.rec = reconstruction_loss(warp(onset, field), apex);
  out.nm = magnitude_loss(field);
  out.sm = smoothness_loss(field);
  out.total = add(add(scale(out.rec, w.rec), scale(out.nm, w.nm)),
                  scale(out.sm, w.sm));
  return out;
}

// Uniformly random ordered frame pairs (i != j) from one sequence.
struct FramePairIndex {
  int onset, apex;
};

inline std::vector<FramePairIndex> sample_frame_pairs(int sequence_length,
                                                      int count, Rng& rng) {
  if (sequence_length < 2)
    throw UsageError("sample_frame_pairs: sequence must hold at least 2 frames");
  std::vector<FramePairIndex> pairs;
  pairs.reserve(count);
  for (int k = 0; k < count; ++k) {
    const int i = static_cast<int>(rng.uniform_int(0, sequence_length - 1));
    int j = static_cast<int>(rng.uniform_int(0, sequence_length - 2));
    if (j >= i) ++j;
    pairs.push_back({i, j});
  }
  return pairs;
}

// Single-sample displacement tensor [2, H, W] (or [1, 2, H, W]) to the file
// representation.
template <typename T>
FlowField field_to_flow(const Tensor<T>& field) {
  Shape s = field.shape();
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  check(s.size() == 3 && s[0] == 2, "field_to_flow: expected [2, H, W]");
  FlowField f;
  f.h = s[1];
  f.w = s[2];
  f.v.resize(static_cast<std::size_t>(f.h * f.w * 2));
  auto d = field.data();
  for (std::int64_t y = 0; y < f.h; ++y)
    for (std::int64_t x = 0; x < f.w; ++x) {
      f.v[(y * f.w + x) * 2 + 0] = static_cast<float>(d[y * f.w + x]);
      f.v[(y * f.w + x) * 2 + 1] =
          static_cast<float>(d[f.h * f.w + y * f.w + x]);
    }
  return f;
}

}  // namespace mer
