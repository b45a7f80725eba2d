#include "vcnn/metrics.hpp"

#include <stdexcept>
#include <string>

#include "vcnn/errors.hpp"

namespace vcnn {

MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& labels, int class_count) {
  if (predictions.size() != labels.size()) {
    throw std::invalid_argument("compute_metrics: prediction/label count mismatch");
  }
  if (predictions.empty()) throw std::invalid_argument("compute_metrics: empty input");
  if (class_count < 1) throw std::invalid_argument("compute_metrics: class_count < 1");

  MetricsReport report;
  report.per_class_total.assign(class_count, 0);
  report.per_class_correct.assign(class_count, 0);
  size_t correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    const int l = labels[i];
    if (l < 0 || l >= class_count) {
      throw std::invalid_argument("compute_metrics: label out of range");
    }
    ++report.per_class_total[l];
    if (predictions[i] == l) {
      ++report.per_class_correct[l];
      ++correct;
    }
  }
  report.per_class_accuracy.resize(class_count);
  double sum = 0.0;
  for (int c = 0; c < class_count; ++c) {
    if (report.per_class_total[c] == 0) {
      throw DataError("compute_metrics: class " + std::to_string(c) +
                      " absent from labels (ACA undefined)");
    }
    report.per_class_accuracy[c] = static_cast<double>(report.per_class_correct[c]) /
                                   static_cast<double>(report.per_class_total[c]);
    sum += report.per_class_accuracy[c];
  }
  report.aca = sum / static_cast<double>(class_count);
  report.aia = static_cast<double>(correct) / static_cast<double>(labels.size());
  return report;
}

}  // namespace vcnn
