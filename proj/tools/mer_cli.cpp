// Command-line entry point: dataset synthesis, training, evaluation, LOSO
// cross-validation, displacement visualization and fusion profiling.
//
// Exit codes: 0 success, 2 usage, 3 I/O or parse, 4 numerical failure,
// 5 checkpoint/version mismatch.
#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mer/pipeline.hpp"
#include "mer/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string manifest_path;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string ablation;
  std::string fusion;
  std::string regions;
  bool no_self_supervised = false;
  bool no_fullface = false;
  bool no_local = false;
  bool no_global = false;
  int folds = 0;
  int jobs = 0;
};

void add_common_flags(CLI::App* cmd, CommonFlags& f, bool with_folds) {
  cmd->add_option("--config", f.config_path, "run configuration (json)");
  cmd->add_option("--manifest", f.manifest_path, "dataset manifest override");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "seed override")
      ->each([&f](const std::string&) { f.seed_set = true; });
  cmd->add_option("--ablation", f.ablation, "ablation preset M0..M9");
  cmd->add_option("--fusion", f.fusion, "fusion variant: before|after")
      ->check(CLI::IsMember({"before", "after"}));
  cmd->add_option("--regions", f.regions, "region layout: au|grid3x3")
      ->check(CLI::IsMember({"au", "grid3x3"}));
  cmd->add_flag("--no-self-supervised", f.no_self_supervised,
                "disable the self-supervised displacement steps");
  cmd->add_flag("--no-fullface", f.no_fullface, "drop the full-face module");
  cmd->add_flag("--no-local", f.no_local, "bypass the per-region modules");
  cmd->add_flag("--no-global", f.no_global, "bypass the cross-region module");
  if (with_folds) {
    cmd->add_option("--folds", f.folds, "run only the first N folds");
    cmd->add_option("--jobs", f.jobs, "parallel fold workers");
  }
}

mer::RunConfig assemble_config(const CommonFlags& f) {
  mer::RunConfig cfg;
  if (!f.config_path.empty()) cfg = mer::load_run_config(f.config_path);
  if (!f.ablation.empty()) mer::apply_ablation_preset(cfg, f.ablation);
  if (!f.fusion.empty()) cfg.model.fusion_variant = f.fusion;
  if (!f.regions.empty()) cfg.model.regions = f.regions;
  if (f.no_self_supervised) cfg.train.self_supervised = false;
  if (f.no_fullface) cfg.model.use_fullface = false;
  if (f.no_local) cfg.model.use_local = false;
  if (f.no_global) cfg.model.use_global = false;
  if (f.seed_set) cfg.train.seed = f.seed;
  if (!f.manifest_path.empty()) cfg.manifest_path = f.manifest_path;
  if (f.jobs > 0) cfg.train.jobs = f.jobs;
  if (cfg.manifest_path.empty())
    throw mer::UsageError("no dataset manifest given (--manifest or config)");
  return cfg;
}

json report_to_json(const mer::MetricsReport& r,
                    const std::vector<std::string>& classes) {
  json cm = json::array();
  for (int t = 0; t < r.confusion.num_classes; ++t) {
    json row = json::array();
    for (int p = 0; p < r.confusion.num_classes; ++p)
      row.push_back(r.confusion.at(t, p));
    cm.push_back(row);
  }
  return json{{"uf1", r.uf1},
              {"uar", r.uar},
              {"accuracy", r.accuracy},
              {"per_class_f1", r.per_class_f1},
              {"per_class_recall", r.per_class_recall},
              {"classes", classes},
              {"confusion", cm}};
}

void print_report(const mer::MetricsReport& r,
                  const std::vector<std::string>& classes,
                  const std::string& title) {
  std::cout << title << "  UF1 " << r.uf1 << "  UAR " << r.uar << "  Acc "
            << r.accuracy << "\n"
            << mer::format_confusion(r.confusion, classes);
}

template <typename T>
int cmd_train_impl(const mer::RunConfig& cfg, const std::string& out) {
  fs::create_directories(out);
  auto manifest = mer::load_manifest(cfg.manifest_path);
  auto data = mer::load_dataset<T>(manifest, cfg);
  mer::Rng rng(cfg.train.seed);
  mer::Rng init = rng.fork(1);
  mer::MicroExpressionNet<T> net(cfg.model, data.h, data.w, 1, init);
  mer::Trainer<T> trainer(cfg, data);
  std::vector<int> all;
  for (int i = 0; i < static_cast<int>(data.samples.size()); ++i)
    if (data.samples[i].label >= 0) all.push_back(i);
  trainer.fit(net, all, rng.fork(2), &std::cout);
  net.save((fs::path(out) / "checkpoint.bin").string());
  mer::save_run_config((fs::path(out) / "config.json").string(), cfg);
  std::cout << "saved " << (fs::path(out) / "checkpoint.bin").string() << "\n";
  return 0;
}

template <typename T>
int cmd_eval_impl(const mer::RunConfig& cfg, const std::string& ckpt,
                  const std::string& out, const std::string& weights_out) {
  auto manifest = mer::load_manifest(cfg.manifest_path);
  auto data = mer::load_dataset<T>(manifest, cfg);
  mer::Rng rng(cfg.train.seed);
  mer::Rng init = rng.fork(1);
  mer::MicroExpressionNet<T> net(cfg.model, data.h, data.w, 1, init);
  net.load(ckpt);
  mer::Trainer<T> trainer(cfg, data);
  std::vector<int> all;
  for (int i = 0; i < static_cast<int>(data.samples.size()); ++i)
    if (data.samples[i].label >= 0) all.push_back(i);
  auto report = trainer.evaluate(net, all);
  print_report(report, data.classes, "eval");
  if (!out.empty()) {
    if (!fs::path(out).parent_path().empty())
      fs::create_directories(fs::path(out).parent_path());
    std::ofstream os(out);
    os << report_to_json(report, data.classes).dump(2) << "\n";
  }
  if (!weights_out.empty()) {
    // one forward over the first batch, then dump each module's fusion
    // probabilities
    mer::NoGradGuard ng;
    std::vector<int> idx;
    for (int i = 0; i < std::min<int>(static_cast<int>(all.size()),
                                      static_cast<int>(cfg.train.batch_size));
         ++i)
      idx.push_back(all[i]);
    auto batch = mer::make_batch(data, idx, false, nullptr);
    net.forward(batch, false, 0.0, {}, false);
    json dump;
    auto weights_json = [](const mer::Tensor<T>& w) {
      json a = json::array();
      if (!w.defined()) return a;
      const auto s = w.shape();  // [B, h, 1, n] or [B, h, n]
      const std::int64_t b = s[0], h = s[1], n = s.back();
      for (std::int64_t bi = 0; bi < b; ++bi) {
        json hj = json::array();
        for (std::int64_t hi = 0; hi < h; ++hi) {
          json nj = json::array();
          for (std::int64_t ni = 0; ni < n; ++ni)
            nj.push_back(w.data()[(bi * h + hi) * n + ni]);
          hj.push_back(nj);
        }
        a.push_back(hj);
      }
      return a;
    };
    if (cfg.model.use_local)
      for (int r = 0; r < mer::kNumAuRegions; ++r)
        dump["local" + std::to_string(r)] =
            weights_json(net.local_module(r).fusion().last_weights());
    if (cfg.model.use_global)
      dump["global"] = weights_json(net.global_module().fusion().last_weights());
    if (cfg.model.use_fullface)
      dump["fullface"] =
          weights_json(net.fullface_module().fusion().last_weights());
    std::ofstream os(weights_out);
    os << dump.dump(2) << "\n";
    std::cout << "fusion weights written to " << weights_out << "\n";
  }
  return 0;
}

template <typename T>
int cmd_loso_impl(const mer::RunConfig& cfg, const std::string& out,
                  int max_folds, int jobs) {
  auto manifest = mer::load_manifest(cfg.manifest_path);
  auto data = mer::load_dataset<T>(manifest, cfg);
  auto outcome = mer::run_loso<T>(cfg, data, &std::cout, jobs);
  if (max_folds > 0 &&
      max_folds < static_cast<int>(outcome.folds.size())) {
    // trim for reporting only; metrics re-pooled over the kept folds
    outcome.folds.resize(max_folds);
    mer::ConfusionMatrix pooled(static_cast<int>(data.classes.size()));
    for (const auto& f : outcome.folds) pooled += f.report.confusion;
    outcome.aggregate = mer::metrics_from_confusion(pooled);
  }
  for (const auto& fold : outcome.folds)
    std::cout << "subject " << fold.subject << "  uf1 " << fold.report.uf1
              << "  uar " << fold.report.uar << "  acc "
              << fold.report.accuracy << "\n";
  print_report(outcome.aggregate, data.classes, "aggregate");
  if (!out.empty()) {
    fs::create_directories(out);
    json folds = json::array();
    for (const auto& fold : outcome.folds) {
      json fj = report_to_json(fold.report, data.classes);
      fj["subject"] = fold.subject;
      folds.push_back(fj);
    }
    json j{{"folds", folds},
           {"aggregate", report_to_json(outcome.aggregate, data.classes)}};
    std::ofstream os((fs::path(out) / "loso_report.json").string());
    os << j.dump(2) << "\n";
    std::cout << "report written to "
              << (fs::path(out) / "loso_report.json").string() << "\n";
  }
  return 0;
}

template <typename T>
int cmd_viz_impl(const mer::RunConfig& cfg, const std::string& ckpt,
                 const std::string& onset_path, const std::string& apex_path,
                 const std::string& out_png) {
  const mer::ImageF onset_img = mer::read_pgm(onset_path);
  const mer::ImageF apex_img = mer::read_pgm(apex_path);
  if (onset_img.h != apex_img.h || onset_img.w != apex_img.w)
    throw mer::UsageError("onset and apex image sizes differ");
  const std::int64_t h = onset_img.h, w = onset_img.w;
  mer::Rng rng(cfg.train.seed);
  mer::MicroExpressionNet<T> net(cfg.model, h, w, 1, rng);
  if (!ckpt.empty()) net.load(ckpt);

  auto to_tensor = [&](const mer::ImageF& img) {
    std::vector<T> v(img.v.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(img.v[i]);
    return mer::Tensor<T>::from_data({1, 1, h, w}, std::move(v));
  };
  mer::NoGradGuard ng;
  auto field = net.displacement_only(to_tensor(onset_img), to_tensor(apex_img),
                                     /*training=*/false);
  mer::FlowField flow = mer::field_to_flow(field);
  const std::string raw_path =
      (fs::path(out_png).replace_extension(".bin")).string();
  mer::write_flow_file(raw_path, flow);
  mer::write_png_rgb(out_png, h, w, mer::flow_to_rgb(flow));
  std::cout << "wrote " << out_png << " and " << raw_path << "\n";
  return 0;
}

int cmd_profile_fusion(const mer::RunConfig& cfg, int reps) {
  using clock = std::chrono::steady_clock;
  const std::int64_t dim = cfg.model.embed_dim;
  const int heads = cfg.model.heads;
  const std::int64_t n_local = (cfg.model.region_size / cfg.model.patch_size) *
                               (cfg.model.region_size / cfg.model.patch_size);

  struct VariantResult {
    std::int64_t flops = 0;
    double median_ms = 0.0;
  };
  std::map<std::string, VariantResult> results;

  for (auto kind :
       {mer::FusionKind::kBeforeAttention, mer::FusionKind::kAfterAttention}) {
    const std::string name =
        kind == mer::FusionKind::kBeforeAttention ? "before" : "after";
    // 9 per-region layers + full-face at the patch token count, plus the
    // cross-region layer at 9 tokens
    std::int64_t flops =
        10 * mer::fusion_layer_flops(kind, n_local, dim, heads).total() +
        mer::fusion_layer_flops(kind, mer::kNumAuRegions, dim, heads).total();

    mer::Rng rng(7);
    std::vector<mer::FusionLayer<float>> layers;
    for (int i = 0; i < 10; ++i)
      layers.emplace_back(kind, dim, heads, n_local, rng);
    layers.emplace_back(kind, dim, heads, mer::kNumAuRegions, rng);
    auto tokens = mer::Tensor<float>::normal({1, n_local, dim}, rng);
    auto tokens9 =
        mer::Tensor<float>::normal({1, mer::kNumAuRegions, dim}, rng);

    mer::NoGradGuard ng;
    std::vector<double> times;
    for (int r = 0; r < reps; ++r) {
      const auto t0 = clock::now();
      for (int i = 0; i < 10; ++i) layers[i].forward(tokens, false);
      layers[10].forward(tokens9, false);
      const auto t1 = clock::now();
      times.push_back(
          std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::nth_element(times.begin(), times.begin() + times.size() / 2,
                     times.end());
    results[name] = {flops, times[times.size() / 2]};
  }

  std::cout << "fusion-layer cost at n=" << n_local << " (+" << mer::kNumAuRegions
            << "-token cross-region layer), C=" << dim << ", h=" << heads
            << ", " << reps << " runs\n";
  std::cout << "  variant   MACs/sample   median ms\n";
  for (const auto& [name, r] : results)
    std::cout << "  " << name << (name == "before" ? "    " : "     ")
              << r.flops << "      " << r.median_ms << "\n";
  std::cout << "  MAC ratio (after/before): "
            << static_cast<double>(results["after"].flops) /
                   static_cast<double>(results["before"].flops)
            << "\n";
  std::cout << "  time ratio (after/before): "
            << results["after"].median_ms / results["before"].median_ms << "\n";
  return 0;
}

template <typename Fn>
int dispatch_precision(const mer::RunConfig& cfg, Fn&& fn) {
  if (cfg.train.precision == "f64") return fn(double{});
  return fn(float{});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"micro-expression recognition pipeline"};
  app.require_subcommand(1);

  // gen-synthetic
  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic dataset");
  std::string gen_spec, gen_out = "dataset";
  bool gen_force = false;
  std::uint64_t gen_seed = 0;
  bool gen_seed_set = false;
  gen->add_option("--spec", gen_spec, "dataset spec (json)");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_flag("--force", gen_force, "overwrite a non-empty directory");
  gen->add_option("--seed", gen_seed, "seed override")
      ->each([&](const std::string&) { gen_seed_set = true; });

  // train
  auto* train = app.add_subcommand("train", "train on the full manifest");
  CommonFlags train_flags;
  add_common_flags(train, train_flags, false);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  CommonFlags eval_flags;
  std::string eval_ckpt, eval_weights_out;
  add_common_flags(eval, eval_flags, false);
  eval->add_option("--checkpoint", eval_ckpt, "model checkpoint")->required();
  eval->add_option("--dump-fusion-weights", eval_weights_out,
                   "write per-region fusion probabilities (json)");

  // loso
  auto* loso = app.add_subcommand("loso", "leave-one-subject-out evaluation");
  CommonFlags loso_flags;
  add_common_flags(loso, loso_flags, true);

  // viz-displacement
  auto* viz = app.add_subcommand("viz-displacement",
                                 "render a displacement field");
  CommonFlags viz_flags;
  std::string viz_ckpt, viz_onset, viz_apex, viz_out = "displacement.png";
  viz->add_option("--config", viz_flags.config_path, "run configuration");
  viz->add_option("--checkpoint", viz_ckpt, "model checkpoint");
  viz->add_option("--onset", viz_onset, "onset frame (pgm)")->required();
  viz->add_option("--apex", viz_apex, "apex frame (pgm)")->required();
  viz->add_option("--out", viz_out, "output png (raw field saved alongside)");

  // profile-fusion
  auto* prof = app.add_subcommand("profile-fusion",
                                  "compare fusion variants (MACs + wall time)");
  CommonFlags prof_flags;
  int prof_reps = 100;
  prof->add_option("--config", prof_flags.config_path, "run configuration");
  prof->add_option("--reps", prof_reps, "timing repetitions (>= 100)")
      ->check(CLI::Range(100, 1000000));

  // export-defaults
  auto* exp = app.add_subcommand("export-defaults",
                                 "write default config, geometry and spec files");
  std::string exp_dir = ".";
  exp->add_option("--out", exp_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      mer::SynthSpec spec;
      if (!gen_spec.empty()) spec = mer::load_synth_spec(gen_spec);
      if (gen_seed_set) spec.seed = gen_seed;
      if (fs::exists(gen_out) && !fs::is_empty(gen_out) && !gen_force)
        throw mer::IoError("output directory " + gen_out +
                           " is not empty (use --force to overwrite)");
      if (gen_force && fs::exists(gen_out)) fs::remove_all(gen_out);
      auto manifest = mer::generate_synthetic_dataset(spec, gen_out);
      std::cout << "wrote " << manifest.samples.size() << " samples to "
                << gen_out << "\n";
      return 0;
    }
    if (train->parsed()) {
      auto cfg = assemble_config(train_flags);
      const std::string out =
          train_flags.out.empty() ? "train_out" : train_flags.out;
      return dispatch_precision(cfg, [&](auto tag) {
        return cmd_train_impl<decltype(tag)>(cfg, out);
      });
    }
    if (eval->parsed()) {
      auto cfg = assemble_config(eval_flags);
      return dispatch_precision(cfg, [&](auto tag) {
        return cmd_eval_impl<decltype(tag)>(cfg, eval_ckpt, eval_flags.out,
                                            eval_weights_out);
      });
    }
    if (loso->parsed()) {
      auto cfg = assemble_config(loso_flags);
      return dispatch_precision(cfg, [&](auto tag) {
        return cmd_loso_impl<decltype(tag)>(cfg, loso_flags.out,
                                            loso_flags.folds, loso_flags.jobs);
      });
    }
    if (viz->parsed()) {
      mer::RunConfig cfg;
      if (!viz_flags.config_path.empty())
        cfg = mer::load_run_config(viz_flags.config_path);
      return dispatch_precision(cfg, [&](auto tag) {
        return cmd_viz_impl<decltype(tag)>(cfg, viz_ckpt, viz_onset, viz_apex,
                                           viz_out);
      });
    }
    if (prof->parsed()) {
      mer::RunConfig cfg;
      if (!prof_flags.config_path.empty())
        cfg = mer::load_run_config(prof_flags.config_path);
      return cmd_profile_fusion(cfg, prof_reps);
    }
    if (exp->parsed()) {
      fs::create_directories(exp_dir);
      mer::save_run_config((fs::path(exp_dir) / "config.json").string(),
                           mer::RunConfig{});
      mer::save_region_geometry((fs::path(exp_dir) / "geometry.json").string(),
                                mer::RegionGeometry::defaults());
      mer::save_synth_spec((fs::path(exp_dir) / "dataset_spec.json").string(),
                           mer::SynthSpec{});
      std::cout << "wrote defaults to " << exp_dir << "\n";
      return 0;
    }
  } catch (const mer::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const mer::VersionError& e) {
    std::cerr << "version error: " << e.what() << "\n";
    return 5;
  } catch (const mer::ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 3;
  } catch (const mer::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const mer::NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
