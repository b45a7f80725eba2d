#pragma once

#include <vector>

namespace vcnn {

struct MetricsReport {
  std::vector<double> per_class_accuracy;
  std::vector<size_t> per_class_total;
  std::vector<size_t> per_class_correct;
  double aca = 0.0;  // mean of per-class accuracies
  double aia = 0.0;  // total correct / total samples
};

// ACA averages the per-class accuracies; AIA is the overall fraction
// correct. Every class in [0, class_count) must appear in labels, otherwise
// ACA is undefined and a DataError is thrown.
MetricsReport compute_metrics(const std::vector<int>& predictions,
                              const std::vector<int>& labels, int class_count);

}  // namespace vcnn
