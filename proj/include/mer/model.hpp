// End-to-end recognition network: displacement generation, channel stacking,
// region cropping, patch tokenization, the local/global/full-face fusion
// pyramid, and the classification head.
#pragma once

#include "mer/checkpoint.hpp"
#include "mer/displacement.hpp"
#include "mer/fusion.hpp"
#include "mer/manifest.hpp"
#include "mer/regions.hpp"

namespace mer {

template <typename T>
class MicroExpressionNet {
 public:
  struct Batch {
    Tensor<T> onset, apex;            // [B, Mi, H, W]
    std::vector<AuRegionSet> regions; // one per sample
    Tensor<T> dyn;                    // substituted channels, when not learned
    std::vector<int> labels;          // empty = no classification loss
  };

  struct Output {
    Tensor<T> logits;
    Tensor<T> displacement;       // defined for learned and flow-file sources
    DisplacementLosses<T> field_losses;
    bool has_field_losses = false;
    Tensor<T> cls_loss;           // defined when labels were given
  };

  MicroExpressionNet() = default;

  MicroExpressionNet(const ModelConfig& cfg, std::int64_t image_h,
                     std::int64_t image_w, std::int64_t image_channels,
                     Rng& rng)
      : cfg_(cfg), image_h_(image_h), image_w_(image_w),
        image_channels_(image_channels) {
    if (cfg.region_size % cfg.patch_size != 0)
      throw UsageError("region size " + std::to_string(cfg.region_size) +
                       " not divisible by patch size " +
                       std::to_string(cfg.patch_size));
    n_patches_ = (cfg.region_size / cfg.patch_size) *
                 (cfg.region_size / cfg.patch_size);
    dyn_channels_ =
        cfg.displacement_source == DisplacementSource::kImageFile ? 1 : 2;
    stack_channels_ = 2 * image_channels_ + dyn_channels_;

    Rng init = rng.fork(0x6d6f64);
    if (cfg.displacement_source == DisplacementSource::kLearned) {
      Rng r = init.fork(1);
      displacement_ = DisplacementNet<T>(2 * image_channels_, cfg.dgm_levels,
                                         cfg.dgm_base_channels,
                                         static_cast<T>(cfg.alpha),
                                         cfg.normalize_displacement, r);
    }

    FusionModuleConfig local_cfg;
    local_cfg.embed_dim = cfg.embed_dim;
    local_cfg.heads = cfg.heads;
    local_cfg.depth = cfg.attn_depth;
    local_cfg.mlp_ratio = cfg.mlp_ratio;
    local_cfg.n_tokens = n_patches_;
    local_cfg.in_dim = stack_channels_ * cfg.patch_size * cfg.patch_size;
    local_cfg.pos_embed = cfg.use_pos_embed;
    local_cfg.fusion = fusion_kind_from_name(cfg.fusion_variant);
    local_cfg.bypass = !cfg.use_local;
    for (int r = 0; r < kNumAuRegions; ++r) {
      Rng lr = init.fork(10 + r);
      local_.emplace_back(local_cfg, lr);
    }
    if (cfg.use_fullface) {
      FusionModuleConfig ff_cfg = local_cfg;
      ff_cfg.bypass = false;
      Rng fr = init.fork(40);
      fullface_ = TokenFusionModule<T>(ff_cfg, fr);
    }
    if (cfg.use_global) {
      FusionModuleConfig g_cfg;
      g_cfg.embed_dim = cfg.embed_dim;
      g_cfg.heads = cfg.heads;
      g_cfg.depth = cfg.attn_depth;
      g_cfg.mlp_ratio = cfg.mlp_ratio;
      g_cfg.n_tokens = kNumAuRegions;
      g_cfg.in_dim = 0;
      g_cfg.fusion = fusion_kind_from_name(cfg.fusion_variant);
      Rng gr = init.fork(41);
      global_ = TokenFusionModule<T>(g_cfg, gr);
    }
    const std::int64_t head_in =
        cfg.use_fullface ? 2 * cfg.embed_dim : cfg.embed_dim;
    Rng hr = init.fork(42);
    head_ = ClassifierHead<T>(head_in, cfg.embed_dim, cfg.num_classes, hr);
  }

  Output forward(const Batch& batch, bool training, double cls_grad_scale,
                 const DisplacementLossWeights<T>& loss_weights = {},
                 bool compute_field_losses = true) {
    const std::int64_t b = batch.onset.dim(0);
    check(batch.onset.shape() == batch.apex.shape(),
          "forward: onset and apex shapes differ");
    if (static_cast<std::int64_t>(batch.regions.size()) != b)
      throw UsageError("forward: region sets do not match batch size");

    Output out;
    Tensor<T> dyn;
    int dx_ch = -1, dy_ch = -1;
    if (cfg_.displacement_source == DisplacementSource::kLearned) {
      Tensor<T> pair = concat({batch.onset, batch.apex}, 1);
      out.displacement = displacement_.forward(pair, training);
      if (compute_field_losses) {
        out.field_losses = displacement_loss(batch.onset, batch.apex,
                                             out.displacement, loss_weights);
        out.has_field_losses = true;
      }
      // classification gradients into the displacement path are attenuated
      dyn = scale_gradient(out.displacement, static_cast<T>(cls_grad_scale));
      dx_ch = static_cast<int>(2 * image_channels_);
      dy_ch = dx_ch + 1;
    } else {
      check(batch.dyn.defined(), "forward: this configuration needs dyn input");
      check(batch.dyn.dim(1) == dyn_channels_,
            "forward: dyn channel count mismatch");
      dyn = batch.dyn;
      if (dyn_channels_ == 2) {
        out.displacement = batch.dyn;
        dx_ch = static_cast<int>(2 * image_channels_);
        dy_ch = dx_ch + 1;
      }
    }

    Tensor<T> stack = concat({batch.onset, batch.apex, dyn}, 1);

    std::vector<Tensor<T>> locals;
    std::vector<Box> boxes(b);
    for (int r = 0; r < kNumAuRegions; ++r) {
      for (std::int64_t i = 0; i < b; ++i) boxes[i] = batch.regions[i].boxes[r];
      Tensor<T> region = crop_resize(stack, boxes, cfg_.region_size,
                                     cfg_.region_size, dx_ch, dy_ch);
      Tensor<T> tokens = patchify(region, cfg_.patch_size);
      locals.push_back(unsqueeze(local_[r].forward(tokens, training), 1));
    }
    Tensor<T> stacked = concat(locals, 1);  // [B, 9, C]
    Tensor<T> global_vec = cfg_.use_global
                               ? global_.forward(stacked, training)
                               : mean_axis(stacked, 1);

    Tensor<T> cls_in = global_vec;
    if (cfg_.use_fullface) {
      for (std::int64_t i = 0; i < b; ++i) boxes[i] = batch.regions[i].full_face;
      Tensor<T> region = crop_resize(stack, boxes, cfg_.region_size,
                                     cfg_.region_size, dx_ch, dy_ch);
      Tensor<T> tokens = patchify(region, cfg_.patch_size);
      Tensor<T> ff_vec = fullface_.forward(tokens, training);
      cls_in = concat({global_vec, ff_vec}, 1);
    }
    out.logits = head_.forward(cls_in);
    if (!batch.labels.empty())
      out.cls_loss = cross_entropy_mean(out.logits, batch.labels);
    return out;
  }

  // Displacement path only; used by self-supervised steps and visualization.
  Tensor<T> displacement_only(const Tensor<T>& onset, const Tensor<T>& apex,
                              bool training) {
    if (cfg_.displacement_source != DisplacementSource::kLearned)
      throw UsageError("displacement_only: model has no displacement network");
    return displacement_.forward(concat({onset, apex}, 1), training);
  }

  ParamList<T> displacement_params() const {
    ParamList<T> out;
    if (cfg_.displacement_source == DisplacementSource::kLearned)
      displacement_.collect_params("displacement", out);
    return out;
  }

  ParamList<T> fusion_params() const {
    ParamList<T> out;
    for (int r = 0; r < kNumAuRegions; ++r)
      local_[r].collect_params("local" + std::to_string(r), out);
    if (cfg_.use_global) global_.collect_params("global", out);
    if (cfg_.use_fullface) fullface_.collect_params("fullface", out);
    head_.collect_params("head", out);
    return out;
  }

  ParamList<T> all_params() const {
    ParamList<T> out = displacement_params();
    ParamList<T> f = fusion_params();
    out.insert(out.end(), f.begin(), f.end());
    check_unique_names(out);
    return out;
  }

  std::vector<std::pair<std::string, std::vector<T>*>> buffers() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    if (cfg_.displacement_source == DisplacementSource::kLearned)
      displacement_.collect_buffers("displacement", out);
    for (int r = 0; r < kNumAuRegions; ++r)
      local_[r].collect_buffers("local" + std::to_string(r), out);
    if (cfg_.use_global) global_.collect_buffers("global", out);
    if (cfg_.use_fullface) fullface_.collect_buffers("fullface", out);
    return out;
  }

  void save(const std::string& path) {
    std::vector<CheckpointEntry<T>> entries;
    for (const auto& p : all_params())
      entries.push_back({p.name, p.tensor.shape(),
                         {p.tensor.data().begin(), p.tensor.data().end()}});
    for (auto& [name, buf] : buffers())
      entries.push_back({name,
                         {static_cast<std::int64_t>(buf->size())},
                         *buf});
    save_checkpoint(path, entries);
  }

  void load(const std::string& path) {
    auto loaded = load_checkpoint<T>(path);
    ParamList<T> params = all_params();
    auto bufs = buffers();
    apply_checkpoint(loaded, params, bufs);
  }

  const ModelConfig& config() const { return cfg_; }
  std::int64_t dyn_channels() const { return dyn_channels_; }
  std::int64_t stack_channels() const { return stack_channels_; }
  std::int64_t n_patches() const { return n_patches_; }
  TokenFusionModule<T>& local_module(int r) { return local_[r]; }
  TokenFusionModule<T>& global_module() { return global_; }
  TokenFusionModule<T>& fullface_module() { return fullface_; }
  DisplacementNet<T>& displacement_net() { return displacement_; }

 private:
  ModelConfig cfg_;
  std::int64_t image_h_ = 0, image_w_ = 0;
  std::int64_t image_channels_ = 1;
  std::int64_t dyn_channels_ = 2;
  std::int64_t stack_channels_ = 0;
  std::int64_t n_patches_ = 0;
  DisplacementNet<T> displacement_;
  std::vector<TokenFusionModule<T>> local_;
  TokenFusionModule<T> global_;
  TokenFusionModule<T> fullface_;
  ClassifierHead<T> head_;
};

}  // namespace mer
