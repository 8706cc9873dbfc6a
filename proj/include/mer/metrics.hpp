// Classification metrics: pooled confusion matrix, unweighted (macro) F1 and
// unweighted average recall. Classes absent from the ground truth contribute
// zero recall and zero F1 by convention.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mer/error.hpp"

namespace mer {

struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::int64_t> counts;  // row = true class, col = predicted

  explicit ConfusionMatrix(int k = 0)
      : num_classes(k), counts(static_cast<std::size_t>(k) * k, 0) {}
  std::int64_t& at(int truth, int pred) {
    return counts[truth * num_classes + pred];
  }
  std::int64_t at(int truth, int pred) const {
    return counts[truth * num_classes + pred];
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  std::int64_t total() const;
  std::int64_t row_sum(int truth) const;
  std::int64_t col_sum(int pred) const;
};

struct MetricsReport {
  ConfusionMatrix confusion;
  double uf1 = 0.0;
  double uar = 0.0;
  double accuracy = 0.0;
  std::vector<double> per_class_f1;
  std::vector<double> per_class_recall;
};

ConfusionMatrix tally_confusion(std::span<const int> preds,
                                std::span<const int> labels, int num_classes);

MetricsReport metrics_from_confusion(const ConfusionMatrix& cm);

MetricsReport compute_metrics(std::span<const int> preds,
                              std::span<const int> labels, int num_classes);

std::string format_confusion(const ConfusionMatrix& cm,
                             const std::vector<std::string>& class_names);

}  // namespace mer
