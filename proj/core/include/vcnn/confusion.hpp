#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vcnn/network.hpp"
#include "vcnn/voxel.hpp"

namespace vcnn {

// Output-layer weight columns: one anchor vector per class, pointing toward
// that class's feature centroid.
struct SavMatrix {
  std::vector<FlatVector> columns;  // one per class, length = fc width
  FlatVector bias;                  // reported separately, not part of the SAV
  int class_count = 0;
};

// Soft decision scores with ground truth attached.
struct ScoreMatrix {
  std::vector<FlatVector> rows;  // N x C softmax rows
  std::vector<int> labels;       // ground truth per row
  int class_count = 0;
};

// Symmetric class-by-class confusion factors in [0, 1]. The diagonal is set
// to each row's off-diagonal maximum so self-affinity dominates without
// dwarfing real confusions.
struct CFMatrix {
  int size = 0;
  std::vector<double> values;  // row-major size x size

  double at(int r, int c) const { return values[static_cast<size_t>(r) * size + c]; }
  double& at(int r, int c) { return values[static_cast<size_t>(r) * size + c]; }
};

struct ConfusionSet {
  std::vector<int> classes;  // ascending
  bool mixed = false;        // mixed iff more than one member
};

struct ConfusionSetPartition {
  std::vector<ConfusionSet> sets;

  int set_of(int class_index) const;  // index into sets, -1 if absent
  void validate(int class_count) const;
};

SavMatrix extract_savs(const NetworkSpec& spec, const NetworkWeights& weights);
SavMatrix extract_savs(const std::string& checkpoint_path);

// Softmax rows over the given samples, paired with their labels.
ScoreMatrix soft_scores(const NetworkSpec& spec, const NetworkWeights& weights,
                        const std::vector<const VoxelGrid*>& grids,
                        const std::vector<int>& labels, int threads = 1);

// CF(k, l) = (1/2N_k) sum_{i in k} s(y_i, l) + (1/2N_l) sum_{j in l} s(y_j, k).
// Every class must have at least one sample.
CFMatrix confusion_factor_matrix(const ScoreMatrix& scores);

// Normalized-Laplacian spectral clustering over the affinity: D^-1/2 A D^-1/2,
// top-k eigenvectors, row normalization, seeded k-means (10 restarts).
// k = nullopt picks k by the largest eigengap within [2, C-1]. Classes with
// (near-)zero off-diagonal degree are split out as pure sets first.
ConfusionSetPartition spectral_cluster(const CFMatrix& affinity,
                                       std::optional<int> k, uint64_t seed);

struct ConfusionAnalysis {
  CFMatrix cf;
  ConfusionSetPartition partition;
};

// soft_scores -> confusion_factor_matrix -> spectral_cluster over the
// training split.
ConfusionAnalysis identify_confusion_sets(const NetworkSpec& spec,
                                          const NetworkWeights& weights,
                                          const std::vector<const VoxelGrid*>& train_grids,
                                          const std::vector<int>& train_labels,
                                          std::optional<int> k, uint64_t seed,
                                          int threads = 1);

// Inspection-only diagnostic: pairwise SAV angles (radians) and per-class
// feature variance. Not used by any decision path.
struct SavDiagnostics {
  std::vector<double> pairwise_angle;   // row-major C x C
  std::vector<double> class_variance;   // mean squared distance to class centroid
};
SavDiagnostics sav_diagnostics(const SavMatrix& savs,
                               const std::vector<FlatVector>& features,
                               const std::vector<int>& labels);

}  // namespace vcnn
