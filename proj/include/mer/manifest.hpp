// Dataset manifest and run configuration, both JSON on disk.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mer/error.hpp"

namespace mer {

struct SampleMeta {
  std::string id;
  std::string subject;
  int label = -1;  // index into DatasetManifest::classes; -1 = unlabeled
  std::vector<std::string> sequence;  // frame paths, onset first
  int apex_index = -1;
  std::string landmarks;
  std::string gt_flow;      // optional ground-truth displacement field
  std::string dyn_feature;  // optional substituted flow field (2 channels)
  std::string dyn_image;    // optional substituted feature image (1 channel)

  const std::string& onset_path() const { return sequence.front(); }
  const std::string& apex_path() const {
    return sequence.at(static_cast<std::size_t>(apex_index));
  }
};

struct DatasetManifest {
  std::vector<std::string> classes;
  std::int64_t image_h = 0, image_w = 0;
  std::vector<SampleMeta> samples;
  std::string root;  // directory holding the manifest; not serialized

  int class_index(const std::string& name) const;
  std::string resolve(const std::string& rel) const;
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const DatasetManifest& m);

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

// How the dynamic-feature channels are produced.
enum class DisplacementSource {
  kLearned,             // displacement network output
  kFlowFile,            // per-sample flow file, as-is
  kFlowFileNormalized,  // per-sample flow file, max-normalized and rescaled
  kImageFile,           // per-sample single-channel image
};

struct ModelConfig {
  std::int64_t embed_dim = 256;
  int heads = 8;
  int attn_depth = 2;
  double mlp_ratio = 2.0;
  std::int64_t patch_size = 18;
  std::int64_t region_size = 90;
  int num_classes = 3;
  std::string fusion_variant = "before";  // "before" | "after"
  std::string regions = "au";             // "au" | "grid3x3"
  bool use_local = true;
  bool use_global = true;
  bool use_fullface = true;
  bool use_pos_embed = true;
  // displacement network
  double alpha = 0.2;
  int dgm_levels = 4;
  std::int64_t dgm_base_channels = 16;
  bool normalize_displacement = true;
  DisplacementSource displacement_source = DisplacementSource::kLearned;
};

struct TrainConfig {
  std::int64_t batch_size = 32;
  int epochs = 12;
  double dgm_lr = 0.002;
  double fusion_lr = 1e-3;
  double cls_grad_scale = 1e-6;
  double lambda_rec = 10.0;
  double lambda_nm = 1.0;
  double lambda_sm = 0.2;
  bool self_supervised = true;
  std::int64_t self_sup_pairs = 32;  // drawn per training step
  bool apex_jitter = true;
  std::uint64_t seed = 7;
  std::string precision = "f32";  // "f32" | "f64"
  int jobs = 0;                   // LOSO workers; 0 = hardware concurrency
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string manifest_path;
  std::string geometry_path;  // empty = built-in region table
};

RunConfig load_run_config(const std::string& path);
void save_run_config(const std::string& path, const RunConfig& cfg);

// Named ablation presets (M0..M9) applied on top of a config.
void apply_ablation_preset(RunConfig& cfg, const std::string& name);

}  // namespace mer
