// Training and evaluation harness: in-memory dataset, apex jitter, training
// steps (supervised and self-supervised), leave-one-subject-out splitting and
// the parallel LOSO driver.
#pragma once

#include <algorithm>
#include <atomic>
#include <iostream>
#include <map>
#include <mutex>
#include <span>
#include <thread>

#include "mer/image.hpp"
#include "mer/metrics.hpp"
#include "mer/model.hpp"

namespace mer {

// Training-time apex replacement by a uniformly chosen neighbour; boundary
// apexes move toward the only available side.
inline int apex_jitter(int sequence_length, int apex_index, Rng& rng) {
  if (sequence_length < 2)
    throw UsageError("apex_jitter: sequence needs a neighbour frame");
  if (apex_index <= 0) return apex_index + 1;
  if (apex_index >= sequence_length - 1) return apex_index - 1;
  return rng.coin() ? apex_index + 1 : apex_index - 1;
}

template <typename T>
struct LoadedSample {
  std::vector<std::vector<T>> frames;  // [H*W] grayscale planes
  int apex_index = 0;
  LandmarkSet landmarks;
  AuRegionSet regions;
  int label = -1;
  std::string subject;
  std::vector<T> dyn;  // substituted dynamic-feature channels, planar
  std::int64_t dyn_channels = 0;
};

template <typename T>
struct LoadedDataset {
  std::int64_t h = 0, w = 0;
  std::vector<std::string> classes;
  std::vector<LoadedSample<T>> samples;
};

namespace detail {

template <typename T>
std::vector<T> image_to_plane(const ImageF& img) {
  std::vector<T> out(img.v.size());
  for (std::size_t i = 0; i < img.v.size(); ++i)
    out[i] = static_cast<T>(img.v[i]);
  return out;
}

}  // namespace detail

template <typename T>
LoadedDataset<T> load_dataset(const DatasetManifest& manifest,
                              const RunConfig& cfg) {
  LoadedDataset<T> data;
  data.h = manifest.image_h;
  data.w = manifest.image_w;
  data.classes = manifest.classes;
  const RegionGeometry geometry =
      cfg.geometry_path.empty() ? RegionGeometry::defaults()
                                : load_region_geometry(cfg.geometry_path);
  const bool grid = cfg.model.regions == "grid3x3";
  const auto source = cfg.model.displacement_source;

  for (const auto& meta : manifest.samples) {
    LoadedSample<T> s;
    s.subject = meta.subject;
    s.label = meta.label;
    s.apex_index = meta.apex_index;
    for (const auto& rel : meta.sequence) {
      const ImageF img = read_pgm(manifest.resolve(rel));
      if (img.h != data.h || img.w != data.w)
        throw ResolutionError(rel + ": frame is " + std::to_string(img.w) +
                              "x" + std::to_string(img.h) + ", manifest says " +
                              std::to_string(data.w) + "x" +
                              std::to_string(data.h));
      s.frames.push_back(detail::image_to_plane<T>(img));
    }
    if (meta.landmarks.empty())
      throw UsageError("sample " + meta.id + " has no landmark file");
    s.landmarks = load_landmarks(manifest.resolve(meta.landmarks));
    validate_landmarks(s.landmarks, static_cast<double>(data.w),
                       static_cast<double>(data.h));
    s.regions = grid ? compute_grid3x3_boxes(s.landmarks, geometry)
                     : compute_au_boxes(s.landmarks, geometry);

    if (source == DisplacementSource::kFlowFile ||
        source == DisplacementSource::kFlowFileNormalized) {
      const std::string rel =
          meta.dyn_feature.empty() ? meta.gt_flow : meta.dyn_feature;
      if (rel.empty())
        throw UsageError("sample " + meta.id +
                         " has no flow file for the substituted input");
      FlowField f = read_flow_file(manifest.resolve(rel));
      if (f.h != data.h || f.w != data.w)
        throw ResolutionError(rel + ": flow size mismatch");
      s.dyn_channels = 2;
      s.dyn.resize(static_cast<std::size_t>(2 * data.h * data.w));
      double max_norm = 0.0;
      for (std::int64_t i = 0; i < data.h * data.w; ++i) {
        s.dyn[i] = static_cast<T>(f.v[i * 2]);
        s.dyn[data.h * data.w + i] = static_cast<T>(f.v[i * 2 + 1]);
        max_norm = std::max({max_norm,
                             std::abs(f.v[i * 2]) / static_cast<double>(data.w),
                             std::abs(f.v[i * 2 + 1]) / static_cast<double>(data.h)});
      }
      if (source == DisplacementSource::kFlowFileNormalized) {
        const double scale = cfg.model.alpha / std::max(max_norm, 1e-6);
        for (auto& v : s.dyn) v = static_cast<T>(v * scale);
      }
    } else if (source == DisplacementSource::kImageFile) {
      if (meta.dyn_image.empty())
        throw UsageError("sample " + meta.id +
                         " has no image file for the substituted input");
      const ImageF img = read_pgm(manifest.resolve(meta.dyn_image));
      if (img.h != data.h || img.w != data.w)
        throw ResolutionError(meta.dyn_image + ": image size mismatch");
      s.dyn_channels = 1;
      s.dyn = detail::image_to_plane<T>(img);
    }
    data.samples.push_back(std::move(s));
  }
  return data;
}

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

template <typename T>
typename MicroExpressionNet<T>::Batch make_batch(
    const LoadedDataset<T>& data, std::span<const int> indices,
    bool jitter_apex, Rng* rng, bool with_labels = true) {
  if (indices.empty()) throw UsageError("make_batch: empty batch");
  const std::int64_t b = static_cast<std::int64_t>(indices.size());
  const std::int64_t plane = data.h * data.w;
  typename MicroExpressionNet<T>::Batch batch;
  batch.onset = Tensor<T>::zeros({b, 1, data.h, data.w});
  batch.apex = Tensor<T>::zeros({b, 1, data.h, data.w});
  auto onset_out = batch.onset.mutable_data();
  auto apex_out = batch.apex.mutable_data();
  std::int64_t dyn_channels = 0;

  for (std::int64_t i = 0; i < b; ++i) {
    const auto& s = data.samples[indices[i]];
    int apex_idx = s.apex_index;
    if (jitter_apex) {
      if (rng == nullptr)
        throw UsageError("make_batch: jitter needs a random stream");
      apex_idx = apex_jitter(static_cast<int>(s.frames.size()), apex_idx, *rng);
    }
    std::copy_n(s.frames[0].data(), plane, onset_out.data() + i * plane);
    std::copy_n(s.frames[apex_idx].data(), plane, apex_out.data() + i * plane);
    batch.regions.push_back(s.regions);
    if (with_labels && s.label >= 0) batch.labels.push_back(s.label);
    dyn_channels = std::max(dyn_channels, s.dyn_channels);
  }
  if (with_labels &&
      batch.labels.size() != static_cast<std::size_t>(b))
    batch.labels.clear();  // mixed labeled/unlabeled: no classification loss

  if (dyn_channels > 0) {
    batch.dyn = Tensor<T>::zeros({b, dyn_channels, data.h, data.w});
    auto dyn_out = batch.dyn.mutable_data();
    for (std::int64_t i = 0; i < b; ++i) {
      const auto& s = data.samples[indices[i]];
      std::copy_n(s.dyn.data(), dyn_channels * plane,
                  dyn_out.data() + i * dyn_channels * plane);
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// LOSO splitting
// ---------------------------------------------------------------------------

struct LosoFold {
  std::string subject;
  std::vector<int> train_idx, test_idx;
};

inline std::vector<LosoFold> loso_split(
    const std::vector<std::string>& subject_of_sample) {
  std::map<std::string, std::vector<int>> by_subject;
  for (std::size_t i = 0; i < subject_of_sample.size(); ++i)
    by_subject[subject_of_sample[i]].push_back(static_cast<int>(i));
  if (by_subject.size() < 2)
    throw UsageError("loso_split: need at least 2 subjects, found " +
                     std::to_string(by_subject.size()));
  std::vector<LosoFold> folds;
  for (const auto& [subject, test_idx] : by_subject) {
    LosoFold fold;
    fold.subject = subject;
    fold.test_idx = test_idx;
    for (std::size_t i = 0; i < subject_of_sample.size(); ++i)
      if (subject_of_sample[i] != subject)
        fold.train_idx.push_back(static_cast<int>(i));
    folds.push_back(std::move(fold));
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct StepLosses {
  double cls = 0.0, rec = 0.0, nm = 0.0, sm = 0.0, field_total = 0.0,
         total = 0.0;
};

template <typename T>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const LoadedDataset<T>& data)
      : cfg_(cfg), data_(data) {
    weights_.rec = static_cast<T>(cfg.train.lambda_rec);
    weights_.nm = static_cast<T>(cfg.train.lambda_nm);
    weights_.sm = static_cast<T>(cfg.train.lambda_sm);
  }

  // One supervised step over `indices`: joint classification + field losses,
  // one update per optimizer group.
  StepLosses train_step(MicroExpressionNet<T>& net, std::span<const int> indices,
                        Adam<T>& opt_displacement, Adam<T>& opt_fusion,
                        double fusion_lr, Rng& rng) {
    if (indices.empty()) throw UsageError("train_step: empty batch");
    auto batch = make_batch(data_, indices, cfg_.train.apex_jitter, &rng);
    if (batch.labels.empty())
      throw UsageError("train_step: batch holds unlabeled samples");
    opt_displacement.zero_grad();
    opt_fusion.zero_grad();
    auto out = net.forward(batch, /*training=*/true, cfg_.train.cls_grad_scale,
                           weights_);
    Tensor<T> total = out.cls_loss;
    if (out.has_field_losses) total = add(total, out.field_losses.total);
    total.backward();
    opt_displacement.step(static_cast<T>(cfg_.train.dgm_lr));
    opt_fusion.step(static_cast<T>(fusion_lr));

    StepLosses losses;
    losses.cls = static_cast<double>(out.cls_loss.item());
    if (out.has_field_losses) {
      losses.rec = static_cast<double>(out.field_losses.rec.item());
      losses.nm = static_cast<double>(out.field_losses.nm.item());
      losses.sm = static_cast<double>(out.field_losses.sm.item());
      losses.field_total = static_cast<double>(out.field_losses.total.item());
    }
    losses.total = static_cast<double>(total.item());
    if (!std::isfinite(losses.total))
      throw NumericError("training diverged: non-finite loss");
    return losses;
  }

  // One self-supervised step: random ordered frame pairs drawn from the
  // training sequences, field losses only, displacement optimizer only.
  double self_supervised_step(MicroExpressionNet<T>& net,
                              std::span<const int> pool, Adam<T>& opt_displacement,
                              Rng& rng) {
    if (pool.empty()) throw UsageError("self_supervised_step: empty pool");
    const std::int64_t count = cfg_.train.self_sup_pairs;
    const std::int64_t plane = data_.h * data_.w;
    Tensor<T> onset = Tensor<T>::zeros({count, 1, data_.h, data_.w});
    Tensor<T> apex = Tensor<T>::zeros({count, 1, data_.h, data_.w});
    auto po = onset.mutable_data();
    auto pa = apex.mutable_data();
    for (std::int64_t k = 0; k < count; ++k) {
      const auto& s = data_.samples[pool[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1))]];
      const auto pair =
          sample_frame_pairs(static_cast<int>(s.frames.size()), 1, rng)[0];
      std::copy_n(s.frames[pair.onset].data(), plane, po.data() + k * plane);
      std::copy_n(s.frames[pair.apex].data(), plane, pa.data() + k * plane);
    }
    opt_displacement.zero_grad();
    Tensor<T> field = net.displacement_only(onset, apex, /*training=*/true);
    auto losses = displacement_loss(onset, apex, field, weights_);
    losses.total.backward();
    opt_displacement.step(static_cast<T>(cfg_.train.dgm_lr));
    const double value = static_cast<double>(losses.total.item());
    if (!std::isfinite(value))
      throw NumericError("self-supervised training diverged");
    return value;
  }

  // Full training schedule: one self-supervised step per supervised step,
  // cosine-annealed fusion learning rate over the supervised step horizon.
  void fit(MicroExpressionNet<T>& net, std::vector<int> train_idx, Rng rng,
           std::ostream* log = nullptr) {
    std::vector<int> labeled;
    for (int i : train_idx)
      if (data_.samples[i].label >= 0) labeled.push_back(i);
    if (labeled.empty()) throw UsageError("fit: no labeled training samples");

    Adam<T> opt_displacement(net.displacement_params());
    Adam<T> opt_fusion(net.fusion_params());
    const std::int64_t bs = cfg_.train.batch_size;
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(labeled.size()) + bs - 1) / bs;
    const std::int64_t total_steps = cfg_.train.epochs * steps_per_epoch;
    const bool learned =
        net.config().displacement_source == DisplacementSource::kLearned;

    std::int64_t step = 0;
    for (int epoch = 0; epoch < cfg_.train.epochs; ++epoch) {
      Rng epoch_rng = rng.fork(1000 + epoch);
      std::vector<int> order = labeled;
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1],
                  order[static_cast<std::size_t>(epoch_rng.uniform_int(
                      0, static_cast<std::int64_t>(i) - 1))]);
      double epoch_cls = 0.0, epoch_field = 0.0, epoch_ss = 0.0;
      for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
        const std::int64_t lo = s * bs;
        const std::int64_t hi =
            std::min<std::int64_t>(lo + bs, static_cast<std::int64_t>(order.size()));
        std::span<const int> idx(order.data() + lo, order.data() + hi);
        const double lr =
            cosine_anneal(step, total_steps, cfg_.train.fusion_lr);
        auto losses = train_step(net, idx, opt_displacement, opt_fusion, lr,
                                 epoch_rng);
        epoch_cls += losses.cls;
        epoch_field += losses.field_total;
        if (cfg_.train.self_supervised && learned)
          epoch_ss += self_supervised_step(net, labeled, opt_displacement,
                                           epoch_rng);
      }
      if (log)
        (*log) << "epoch " << epoch + 1 << "/" << cfg_.train.epochs
               << "  cls " << epoch_cls / steps_per_epoch << "  field "
               << epoch_field / steps_per_epoch << "  selfsup "
               << epoch_ss / steps_per_epoch << "\n";
    }
  }

  MetricsReport evaluate(MicroExpressionNet<T>& net,
                         std::span<const int> indices) {
    NoGradGuard ng;
    std::vector<int> preds, labels;
    const std::int64_t bs = cfg_.train.batch_size;
    for (std::size_t lo = 0; lo < indices.size(); lo += bs) {
      const std::size_t hi = std::min(indices.size(), lo + bs);
      std::span<const int> idx(indices.data() + lo, indices.data() + hi);
      // evaluation always uses the labeled apex, never jitter
      auto batch = make_batch(data_, idx, /*jitter_apex=*/false, nullptr);
      auto out = net.forward(batch, /*training=*/false, 0.0, weights_,
                             /*compute_field_losses=*/false);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        auto row = out.logits.data().subspan(
            i * net.config().num_classes, net.config().num_classes);
        preds.push_back(argmax_label<T>(row));
        labels.push_back(data_.samples[idx[i]].label);
      }
    }
    return compute_metrics(preds, labels,
                           static_cast<int>(data_.classes.size()));
  }

  const DisplacementLossWeights<T>& loss_weights() const { return weights_; }

 private:
  RunConfig cfg_;
  const LoadedDataset<T>& data_;
  DisplacementLossWeights<T> weights_;
};

// ---------------------------------------------------------------------------
// LOSO driver
// ---------------------------------------------------------------------------

struct FoldOutcome {
  std::string subject;
  MetricsReport report;
};

struct LosoOutcome {
  std::vector<FoldOutcome> folds;
  MetricsReport aggregate;  // from the confusion matrix pooled over folds
};

template <typename T>
LosoOutcome run_loso(const RunConfig& cfg, const LoadedDataset<T>& data,
                     std::ostream* log = nullptr, int jobs_override = 0) {
  std::vector<std::string> subjects;
  for (const auto& s : data.samples) subjects.push_back(s.subject);
  const std::vector<LosoFold> folds = loso_split(subjects);

  int jobs = jobs_override > 0 ? jobs_override : cfg.train.jobs;
  if (jobs <= 0)
    jobs = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  jobs = std::min<int>(jobs, static_cast<int>(folds.size()));

  std::vector<FoldOutcome> outcomes(folds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t f = next.fetch_add(1);
      if (f >= folds.size()) break;
      const auto& fold = folds[f];
      // every fold derives its stream from the base seed and its own index,
      // so results do not depend on scheduling
      Rng fold_rng = Rng(cfg.train.seed).fork(2000 + f);
      Rng init_rng = fold_rng.fork(1);
      MicroExpressionNet<T> net(cfg.model, data.h, data.w, 1, init_rng);
      Trainer<T> trainer(cfg, data);
      trainer.fit(net, fold.train_idx, fold_rng.fork(2), nullptr);
      outcomes[f] = {fold.subject, trainer.evaluate(net, fold.test_idx)};
      if (log) {
        static std::mutex mu;
        std::lock_guard<std::mutex> lk(mu);
        (*log) << "fold " << fold.subject << "  uf1 "
               << outcomes[f].report.uf1 << "  uar " << outcomes[f].report.uar
               << "  acc " << outcomes[f].report.accuracy << "\n";
      }
    }
  };
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  LosoOutcome result;
  result.folds = std::move(outcomes);
  ConfusionMatrix pooled(static_cast<int>(data.classes.size()));
  for (const auto& f : result.folds) pooled += f.report.confusion;
  result.aggregate = metrics_from_confusion(pooled);
  return result;
}

}  // namespace mer
