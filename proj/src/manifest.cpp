#include "mer/manifest.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace mer {

namespace fs = std::filesystem;
using nlohmann::json;

int DatasetManifest::class_index(const std::string& name) const {
  for (std::size_t i = 0; i < classes.size(); ++i)
    if (classes[i] == name) return static_cast<int>(i);
  throw UsageError("unknown class name: " + name);
}

std::string DatasetManifest::resolve(const std::string& rel) const {
  if (rel.empty()) return rel;
  fs::path p(rel);
  if (p.is_absolute()) return rel;
  return (fs::path(root) / p).string();
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  DatasetManifest m;
  m.root = fs::path(path).parent_path().string();
  if (m.root.empty()) m.root = ".";
  try {
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.image_h = j.at("image_h").get<std::int64_t>();
    m.image_w = j.at("image_w").get<std::int64_t>();
    for (const auto& s : j.at("samples")) {
      SampleMeta sm;
      sm.id = s.at("id").get<std::string>();
      sm.subject = s.at("subject").get<std::string>();
      if (s.contains("label")) {
        const std::string name = s.at("label").get<std::string>();
        sm.label = m.class_index(name);
      }
      sm.sequence = s.at("sequence").get<std::vector<std::string>>();
      if (sm.sequence.empty())
        throw ParseError(path + ": sample " + sm.id + " has no frames");
      sm.apex_index = s.value("apex_index",
                              static_cast<int>(sm.sequence.size()) - 1);
      if (sm.apex_index < 0 ||
          sm.apex_index >= static_cast<int>(sm.sequence.size()))
        throw ParseError(path + ": sample " + sm.id + " apex_index " +
                         std::to_string(sm.apex_index) + " out of range");
      sm.landmarks = s.value("landmarks", std::string{});
      sm.gt_flow = s.value("gt_flow", std::string{});
      sm.dyn_feature = s.value("dyn_feature", std::string{});
      sm.dyn_image = s.value("dyn_image", std::string{});
      m.samples.push_back(std::move(sm));
    }
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
  json j;
  j["classes"] = m.classes;
  j["image_h"] = m.image_h;
  j["image_w"] = m.image_w;
  j["samples"] = json::array();
  for (const auto& s : m.samples) {
    json sj;
    sj["id"] = s.id;
    sj["subject"] = s.subject;
    if (s.label >= 0) sj["label"] = m.classes.at(s.label);
    sj["sequence"] = s.sequence;
    sj["apex_index"] = s.apex_index;
    if (!s.landmarks.empty()) sj["landmarks"] = s.landmarks;
    if (!s.gt_flow.empty()) sj["gt_flow"] = s.gt_flow;
    if (!s.dyn_feature.empty()) sj["dyn_feature"] = s.dyn_feature;
    if (!s.dyn_image.empty()) sj["dyn_image"] = s.dyn_image;
    j["samples"].push_back(std::move(sj));
  }
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << j.dump(2) << "\n";
  if (!os) throw IoError("short write: " + path);
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace {

DisplacementSource parse_source(const std::string& s) {
  if (s == "learned") return DisplacementSource::kLearned;
  if (s == "flow_file") return DisplacementSource::kFlowFile;
  if (s == "flow_file_normalized") return DisplacementSource::kFlowFileNormalized;
  if (s == "image_file") return DisplacementSource::kImageFile;
  throw ParseError("unknown displacement source: " + s);
}

std::string source_name(DisplacementSource s) {
  switch (s) {
    case DisplacementSource::kLearned: return "learned";
    case DisplacementSource::kFlowFile: return "flow_file";
    case DisplacementSource::kFlowFileNormalized: return "flow_file_normalized";
    case DisplacementSource::kImageFile: return "image_file";
  }
  return "learned";
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  RunConfig cfg;
  try {
    if (j.contains("model")) {
      const auto& m = j["model"];
      auto& c = cfg.model;
      c.embed_dim = m.value("embed_dim", c.embed_dim);
      c.heads = m.value("heads", c.heads);
      c.attn_depth = m.value("attn_depth", c.attn_depth);
      c.mlp_ratio = m.value("mlp_ratio", c.mlp_ratio);
      c.patch_size = m.value("patch_size", c.patch_size);
      c.region_size = m.value("region_size", c.region_size);
      c.num_classes = m.value("num_classes", c.num_classes);
      c.fusion_variant = m.value("fusion_variant", c.fusion_variant);
      c.regions = m.value("regions", c.regions);
      c.use_local = m.value("use_local", c.use_local);
      c.use_global = m.value("use_global", c.use_global);
      c.use_fullface = m.value("use_fullface", c.use_fullface);
      c.use_pos_embed = m.value("use_pos_embed", c.use_pos_embed);
      c.alpha = m.value("alpha", c.alpha);
      c.dgm_levels = m.value("dgm_levels", c.dgm_levels);
      c.dgm_base_channels = m.value("dgm_base_channels", c.dgm_base_channels);
      c.normalize_displacement =
          m.value("normalize_displacement", c.normalize_displacement);
      if (m.contains("displacement_source"))
        c.displacement_source =
            parse_source(m["displacement_source"].get<std::string>());
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      auto& c = cfg.train;
      c.batch_size = t.value("batch_size", c.batch_size);
      c.epochs = t.value("epochs", c.epochs);
      c.dgm_lr = t.value("dgm_lr", c.dgm_lr);
      c.fusion_lr = t.value("fusion_lr", c.fusion_lr);
      c.cls_grad_scale = t.value("cls_grad_scale", c.cls_grad_scale);
      c.lambda_rec = t.value("lambda_rec", c.lambda_rec);
      c.lambda_nm = t.value("lambda_nm", c.lambda_nm);
      c.lambda_sm = t.value("lambda_sm", c.lambda_sm);
      c.self_supervised = t.value("self_supervised", c.self_supervised);
      c.self_sup_pairs = t.value("self_sup_pairs", c.self_sup_pairs);
      c.apex_jitter = t.value("apex_jitter", c.apex_jitter);
      c.seed = t.value("seed", c.seed);
      c.precision = t.value("precision", c.precision);
      c.jobs = t.value("jobs", c.jobs);
    }
    cfg.manifest_path = j.value("manifest", std::string{});
    cfg.geometry_path = j.value("geometry", std::string{});
  } catch (const json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
  if (cfg.train.precision != "f32" && cfg.train.precision != "f64")
    throw ParseError(path + ": precision must be f32 or f64");
  if (cfg.model.fusion_variant != "before" && cfg.model.fusion_variant != "after")
    throw ParseError(path + ": fusion_variant must be before or after");
  if (cfg.model.regions != "au" && cfg.model.regions != "grid3x3")
    throw ParseError(path + ": regions must be au or grid3x3");
  return cfg;
}

void save_run_config(const std::string& path, const RunConfig& cfg) {
  json j;
  const auto& c = cfg.model;
  j["model"] = {{"embed_dim", c.embed_dim},
                {"heads", c.heads},
                {"attn_depth", c.attn_depth},
                {"mlp_ratio", c.mlp_ratio},
                {"patch_size", c.patch_size},
                {"region_size", c.region_size},
                {"num_classes", c.num_classes},
                {"fusion_variant", c.fusion_variant},
                {"regions", c.regions},
                {"use_local", c.use_local},
                {"use_global", c.use_global},
                {"use_fullface", c.use_fullface},
                {"use_pos_embed", c.use_pos_embed},
                {"alpha", c.alpha},
                {"dgm_levels", c.dgm_levels},
                {"dgm_base_channels", c.dgm_base_channels},
                {"normalize_displacement", c.normalize_displacement},
                {"displacement_source", source_name(c.displacement_source)}};
  const auto& t = cfg.train;
  j["train"] = {{"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"dgm_lr", t.dgm_lr},
                {"fusion_lr", t.fusion_lr},
                {"cls_grad_scale", t.cls_grad_scale},
                {"lambda_rec", t.lambda_rec},
                {"lambda_nm", t.lambda_nm},
                {"lambda_sm", t.lambda_sm},
                {"self_supervised", t.self_supervised},
                {"self_sup_pairs", t.self_sup_pairs},
                {"apex_jitter", t.apex_jitter},
                {"seed", t.seed},
                {"precision", t.precision},
                {"jobs", t.jobs}};
  if (!cfg.manifest_path.empty()) j["manifest"] = cfg.manifest_path;
  if (!cfg.geometry_path.empty()) j["geometry"] = cfg.geometry_path;
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << j.dump(2) << "\n";
}

void apply_ablation_preset(RunConfig& cfg, const std::string& name) {
  if (name == "M0") {
    cfg.model.displacement_source = DisplacementSource::kFlowFile;
  } else if (name == "M1") {
    cfg.model.displacement_source = DisplacementSource::kFlowFileNormalized;
  } else if (name == "M2") {
    cfg.model.displacement_source = DisplacementSource::kImageFile;
  } else if (name == "M3") {
    cfg.train.self_supervised = false;
  } else if (name == "M4") {
    cfg.model.fusion_variant = "after";
  } else if (name == "M5") {
    cfg.model.regions = "grid3x3";
  } else if (name == "M6") {
    cfg.model.use_fullface = false;
  } else if (name == "M7") {
    cfg.model.use_local = false;
  } else if (name == "M8") {
    cfg.model.use_global = false;
  } else if (name == "M9") {
    // full configuration; nothing to change
  } else {
    throw UsageError("unknown ablation preset: " + name +
                     " (expected M0..M9)");
  }
}

}  // namespace mer
