#include "mer/metrics.hpp"

#include <iomanip>
#include <numeric>
#include <sstream>

namespace mer {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes)
    throw UsageError("confusion matrix class-count mismatch");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::int64_t{0});
}

std::int64_t ConfusionMatrix::row_sum(int truth) const {
  std::int64_t s = 0;
  for (int p = 0; p < num_classes; ++p) s += at(truth, p);
  return s;
}

std::int64_t ConfusionMatrix::col_sum(int pred) const {
  std::int64_t s = 0;
  for (int t = 0; t < num_classes; ++t) s += at(t, pred);
  return s;
}

ConfusionMatrix tally_confusion(std::span<const int> preds,
                                std::span<const int> labels, int num_classes) {
  if (preds.size() != labels.size())
    throw UsageError("compute_metrics: " + std::to_string(preds.size()) +
                     " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 ||
        preds[i] >= num_classes)
      throw UsageError("compute_metrics: class index outside [0, " +
                       std::to_string(num_classes) + ")");
    ++cm.at(labels[i], preds[i]);
  }
  return cm;
}

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm) {
  MetricsReport r;
  r.confusion = cm;
  const int k = cm.num_classes;
  r.per_class_f1.resize(k, 0.0);
  r.per_class_recall.resize(k, 0.0);
  std::int64_t correct = 0;
  for (int c = 0; c < k; ++c) {
    const std::int64_t tp = cm.at(c, c);
    const std::int64_t fn = cm.row_sum(c) - tp;
    const std::int64_t fp = cm.col_sum(c) - tp;
    correct += tp;
    // absent classes score zero recall / F1
    r.per_class_recall[c] =
        (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn)
                      : 0.0;
    const std::int64_t denom = 2 * tp + fp + fn;
    r.per_class_f1[c] =
        denom > 0 ? 2.0 * static_cast<double>(tp) / static_cast<double>(denom)
                  : 0.0;
  }
  const std::int64_t n = cm.total();
  r.accuracy = n > 0 ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  r.uf1 = std::accumulate(r.per_class_f1.begin(), r.per_class_f1.end(), 0.0) / k;
  r.uar = std::accumulate(r.per_class_recall.begin(), r.per_class_recall.end(),
                          0.0) / k;
  return r;
}

MetricsReport compute_metrics(std::span<const int> preds,
                              std::span<const int> labels, int num_classes) {
  return metrics_from_confusion(tally_confusion(preds, labels, num_classes));
}

std::string format_confusion(const ConfusionMatrix& cm,
                             const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << std::setw(12) << "true \\ pred";
  for (int p = 0; p < cm.num_classes; ++p)
    os << std::setw(10)
       << (p < static_cast<int>(class_names.size()) ? class_names[p]
                                                    : std::to_string(p));
  os << "\n";
  for (int t = 0; t < cm.num_classes; ++t) {
    os << std::setw(12)
       << (t < static_cast<int>(class_names.size()) ? class_names[t]
                                                    : std::to_string(t));
    for (int p = 0; p < cm.num_classes; ++p) os << std::setw(10) << cm.at(t, p);
    os << "\n";
  }
  return os.str();
}

}  // namespace mer
