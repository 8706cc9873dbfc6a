// Transformer fusion stack: pre-norm attention blocks, the fusion layer that
// collapses a token sequence into one embedding vector (query-mixing before
// the attention scores, or token-mixing after full attention as the
// baseline), the per-region/global/full-face module wrapper, the classifier
// head, and symbolic FLOP accounting for both fusion variants.
#pragma once

#include "mer/optim.hpp"

namespace mer {

enum class FusionKind { kBeforeAttention, kAfterAttention };

inline FusionKind fusion_kind_from_name(const std::string& name) {
  if (name == "before") return FusionKind::kBeforeAttention;
  if (name == "after") return FusionKind::kAfterAttention;
  throw UsageError("unknown fusion variant: " + name);
}

namespace detail {

// [B, n, C] -> [B, h, n, c]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
  const std::int64_t b = x.dim(0), n = x.dim(1), c = x.dim(2) / heads;
  return permute(reshape(x, {b, n, heads, c}), {0, 2, 1, 3});
}

// [B, h, n, c] -> [B, n, C]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
  const std::int64_t b = x.dim(0), h = x.dim(1), n = x.dim(2), c = x.dim(3);
  return reshape(permute(x, {0, 2, 1, 3}), {b, n, h * c});
}

}  // namespace detail

template <typename T>
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::int64_t dim, int heads, Rng& rng)
      : heads_(heads), qkv_(dim, 3 * dim, rng), out_(dim, dim, rng) {
    check(dim % heads == 0, "attention: embed dim must divide by head count");
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    const std::int64_t b = x.dim(0), n = x.dim(1), dim = x.dim(2);
    const std::int64_t c = dim / heads_;
    Tensor<T> qkv = qkv_.forward(x);  // [B, n, 3C]
    Tensor<T> q = detail::split_heads(slice(qkv, 2, 0, dim), heads_);
    Tensor<T> k = detail::split_heads(slice(qkv, 2, dim, dim), heads_);
    Tensor<T> v = detail::split_heads(slice(qkv, 2, 2 * dim, dim), heads_);
    Tensor<T> scores = scale(batched_matmul(q, k, false, true),
                             T(1) / std::sqrt(static_cast<T>(c)));
    Tensor<T> probs = softmax(scores, -1);
    Tensor<T> ctx = batched_matmul(probs, v);  // [B, h, n, c]
    (void)b;
    (void)n;
    return out_.forward(detail::merge_heads(ctx));
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    qkv_.collect_params(prefix + ".qkv", out);
    out_.collect_params(prefix + ".out", out);
  }

  Linear<T>& qkv() { return qkv_; }
  Linear<T>& out_proj() { return out_; }

 private:
  int heads_ = 1;
  Linear<T> qkv_, out_;
};

// Pre-norm transformer layer: x += MHA(LN(x)); x += MLP(LN(x)).
template <typename T>
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(std::int64_t dim, int heads, double mlp_ratio, Rng& rng)
      : ln1_(dim),
        ln2_(dim),
        attn_(dim, heads, rng),
        mlp_(dim, static_cast<std::int64_t>(dim * mlp_ratio), rng) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = add(x, attn_.forward(ln1_.forward(x)));
    return add(y, mlp_.forward(ln2_.forward(y)));
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    ln1_.collect_params(prefix + ".ln1", out);
    attn_.collect_params(prefix + ".attn", out);
    ln2_.collect_params(prefix + ".ln2", out);
    mlp_.collect_params(prefix + ".mlp", out);
  }

 private:
  LayerNormLayer<T> ln1_, ln2_;
  MultiHeadAttention<T> attn_;
  Mlp<T> mlp_;
};

// Collapses [B, n, C] to [B, C].
//
// Before-attention: per head, a learned n-vector mixes the queries into one
// combined query; its dot products with the keys run through batch
// normalization and softmax to give one probability vector per head, which
// weights the values (score cost O(n*c) per head).
//
// After-attention: full scaled dot-product attention (score cost O(n^2*c)
// per head) followed by the same learned per-head token mixing applied to
// the attention outputs.
template <typename T>
class FusionLayer {
 public:
  FusionLayer() = default;
  FusionLayer(FusionKind kind, std::int64_t dim, int heads,
              std::int64_t n_tokens, Rng& rng)
      : kind_(kind),
        heads_(heads),
        n_tokens_(n_tokens),
        qkv_(dim, 3 * dim, rng),
        bn_(heads * n_tokens) {
    // equal weights start as plain averaging across tokens
    mix_ = Tensor<T>::full({heads, n_tokens},
                           T(1) / static_cast<T>(n_tokens));
    mix_.set_requires_grad(true);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    check(x.rank() == 3, "fusion: input must be [B, n, C]");
    const std::int64_t b = x.dim(0), n = x.dim(1), dim = x.dim(2);
    if (n != n_tokens_)
      throw UsageError("fusion: expected " + std::to_string(n_tokens_) +
                       " tokens, got " + std::to_string(n));
    if (n < 1) throw UsageError("fusion: empty sequence");
    const std::int64_t c = dim / heads_;
    Tensor<T> qkv = qkv_.forward(x);
    Tensor<T> q = detail::split_heads(slice(qkv, 2, 0, dim), heads_);
    Tensor<T> k = detail::split_heads(slice(qkv, 2, dim, dim), heads_);
    Tensor<T> v = detail::split_heads(slice(qkv, 2, 2 * dim, dim), heads_);

    if (kind_ == FusionKind::kBeforeAttention) {
      Tensor<T> q_mixed = head_token_mix(q, mix_);            // [B, h, 1, c]
      Tensor<T> logits = batched_matmul(q_mixed, k, false, true);  // [B,h,1,n]
      Tensor<T> flat = reshape(logits, {b, heads_ * n});
      Tensor<T> normed = bn_.forward(flat, training);
      Tensor<T> probs = softmax(reshape(normed, {b, heads_, 1, n}), -1);
      last_weights_ = probs.detach();
      Tensor<T> fused = batched_matmul(probs, v);  // [B, h, 1, c]
      return reshape(fused, {b, heads_ * c});      // concat over heads
    }
    Tensor<T> scores = scale(batched_matmul(q, k, false, true),
                             T(1) / std::sqrt(static_cast<T>(c)));
    Tensor<T> probs = softmax(scores, -1);
    last_weights_ = mean_axis(probs, 2).detach();  // column importances
    Tensor<T> ctx = batched_matmul(probs, v);      // [B, h, n, c]
    Tensor<T> fused = head_token_mix(ctx, mix_);   // [B, h, 1, c]
    return reshape(fused, {b, heads_ * c});
  }

  // Softmax probabilities per head from the last forward, [B, h, 1, n] for
  // the before variant (token-mean attention for the baseline).
  const Tensor<T>& last_weights() const { return last_weights_; }
  Tensor<T>& mix_weights() { return mix_; }
  Linear<T>& qkv() { return qkv_; }
  BatchNormLayer<T>& batch_norm() { return bn_; }
  FusionKind kind() const { return kind_; }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    qkv_.collect_params(prefix + ".qkv", out);
    append_param(out, prefix + ".mix", mix_);
    if (kind_ == FusionKind::kBeforeAttention)
      bn_.collect_params(prefix + ".bn", out);
  }

  void collect_buffers(
      const std::string& prefix,
      std::vector<std::pair<std::string, std::vector<T>*>>& out) {
    if (kind_ == FusionKind::kBeforeAttention)
      bn_.collect_buffers(prefix + ".bn", out);
  }

 private:
  FusionKind kind_ = FusionKind::kBeforeAttention;
  int heads_ = 1;
  std::int64_t n_tokens_ = 0;
  Linear<T> qkv_;
  BatchNormLayer<T> bn_;
  Tensor<T> mix_;
  Tensor<T> last_weights_;
};

struct FusionModuleConfig {
  std::int64_t embed_dim = 256;
  int heads = 8;
  int depth = 2;
  double mlp_ratio = 2.0;
  std::int64_t n_tokens = 25;
  std::int64_t in_dim = 0;  // > 0: tokens pass a linear embedding first
  bool pos_embed = true;    // only meaningful with an embedding stage
  FusionKind fusion = FusionKind::kBeforeAttention;
  bool bypass = false;      // ablation: mean over tokens instead of attn+fusion
};

// One fusion module: optional patch embedding with a learned positional
// table, a stack of transformer layers, and the fusion layer producing one
// embedding vector per sample.
template <typename T>
class TokenFusionModule {
 public:
  TokenFusionModule() = default;
  TokenFusionModule(const FusionModuleConfig& cfg, Rng& rng) : cfg_(cfg) {
    check(cfg.embed_dim % cfg.heads == 0,
          "fusion module: embed dim must divide by head count");
    if (cfg.in_dim > 0) {
      embed_ = Linear<T>(cfg.in_dim, cfg.embed_dim, rng);
      if (cfg.pos_embed) {
        pos_ = Tensor<T>::normal({cfg.n_tokens, cfg.embed_dim}, rng, 0.0, 0.02);
        pos_.set_requires_grad(true);
      }
    }
    if (!cfg.bypass) {
      for (int i = 0; i < cfg.depth; ++i)
        layers_.emplace_back(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng);
      fusion_ = FusionLayer<T>(cfg.fusion, cfg.embed_dim, cfg.heads,
                               cfg.n_tokens, rng);
    }
  }

  // tokens [B, n, in_dim] (or [B, n, C] when in_dim == 0) -> [B, C]
  Tensor<T> forward(const Tensor<T>& tokens, bool training) {
    check(tokens.rank() == 3, "fusion module: tokens must be [B, n, D]");
    if (tokens.dim(1) != cfg_.n_tokens)
      throw UsageError("fusion module: expected " +
                       std::to_string(cfg_.n_tokens) + " tokens, got " +
                       std::to_string(tokens.dim(1)));
    Tensor<T> x = tokens;
    if (cfg_.in_dim > 0) {
      x = embed_.forward(x);
      if (cfg_.pos_embed) x = add(x, pos_);
    }
    if (cfg_.bypass) return mean_axis(x, 1);
    for (auto& layer : layers_) x = layer.forward(x);
    return fusion_.forward(x, training);
  }

  // Tokens after embedding, before the attention stack (for tests).
  Tensor<T> embed_only(const Tensor<T>& tokens) const {
    Tensor<T> x = tokens;
    if (cfg_.in_dim > 0) {
      x = embed_.forward(x);
      if (cfg_.pos_embed) x = add(x, pos_);
    }
    return x;
  }

  FusionLayer<T>& fusion() { return fusion_; }
  const FusionModuleConfig& config() const { return cfg_; }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    if (cfg_.in_dim > 0) {
      embed_.collect_params(prefix + ".embed", out);
      if (cfg_.pos_embed) append_param(out, prefix + ".pos", pos_);
    }
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].collect_params(prefix + ".layer" + std::to_string(i), out);
    if (!cfg_.bypass) fusion_.collect_params(prefix + ".fusion", out);
  }

  void collect_buffers(
      const std::string& prefix,
      std::vector<std::pair<std::string, std::vector<T>*>>& out) {
    if (!cfg_.bypass) fusion_.collect_buffers(prefix + ".fusion", out);
  }

 private:
  FusionModuleConfig cfg_;
  Linear<T> embed_;
  Tensor<T> pos_;
  std::vector<TransformerLayer<T>> layers_;
  FusionLayer<T> fusion_;
};

// Two fully-connected layers over the concatenated global/full-face vectors.
template <typename T>
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::int64_t in_dim, std::int64_t hidden, int num_classes,
                 Rng& rng)
      : fc1_(in_dim, hidden, rng), fc2_(hidden, num_classes, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    return fc2_.forward(gelu(fc1_.forward(x)));
  }

  void collect_params(const std::string& prefix, ParamList<T>& out) const {
    fc1_.collect_params(prefix + ".fc1", out);
    fc2_.collect_params(prefix + ".fc2", out);
  }

 private:
  Linear<T> fc1_, fc2_;
};

// Predicted label with lowest-index tie breaking.
template <typename T>
int argmax_label(std::span<const T> logits) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(logits.size()); ++i)
    if (logits[i] > logits[best]) best = i;
  return best;
}

// ---------------------------------------------------------------------------
// FLOP accounting: multiply-accumulate counts of one fusion layer forward for
// a single sample (QKV projections, token mixing, attention scores, and the
// value weighting; softmax/normalization are not MACs and are excluded).
// ---------------------------------------------------------------------------
struct FusionFlops {
  std::int64_t qkv = 0;
  std::int64_t mix = 0;
  std::int64_t scores = 0;
  std::int64_t weighting = 0;
  std::int64_t total() const { return qkv + mix + scores + weighting; }
};

inline FusionFlops fusion_layer_flops(FusionKind kind, std::int64_t n,
                                      std::int64_t dim, std::int64_t heads) {
  check(dim % heads == 0, "fusion_layer_flops: dim must divide by heads");
  const std::int64_t c = dim / heads;
  FusionFlops f;
  f.qkv = 3 * n * dim * dim;
  if (kind == FusionKind::kBeforeAttention) {
    f.mix = heads * n * c;        // combine n queries into one per head
    f.scores = heads * n * c;     // one query row against n keys
    f.weighting = heads * n * c;  // probability vector times V
  } else {
    f.scores = heads * n * n * c;
    f.weighting = heads * n * n * c;
    f.mix = heads * n * c;  // combine n attention outputs per head
  }
  return f;
}

}  // namespace mer
