#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "vcnn/confusion.hpp"
#include "vcnn/voxel.hpp"

namespace vcnn {

// One node of the divisive 2-means tree over feature space. A node is a
// leaf iff it has no children; every leaf satisfies the termination rule
// (variance < zeta or size <= eta).
struct SubsetNode {
  std::vector<uint64_t> members;  // sample ids handed in by the caller
  FlatVector centroid;
  double variance = 0.0;  // mean squared distance to the centroid
  std::unique_ptr<SubsetNode> left;
  std::unique_ptr<SubsetNode> right;
  bool pure = false;           // leaf: all member labels identical
  int class_label = -1;        // pure leaf
  std::vector<int> class_set;  // mixed leaf: distinct member labels, ascending
  int forest_index = -1;       // mixed leaf: index into RefineModel::forests

  bool is_leaf() const { return !left; }
};

// Recursively bisects by 2-means (k-means++, 3 restarts, Euclidean) until a
// node has variance < zeta or at most eta members; a split that leaves one
// side empty also terminates. Deterministic given the seed. `ids` names the
// samples (defaults to 0..n-1).
std::unique_ptr<SubsetNode> hierarchical_split(const std::vector<FlatVector>& features,
                                               const std::vector<int>& labels,
                                               double zeta, size_t eta, uint64_t seed,
                                               const std::vector<uint64_t>& ids = {});

// The zeta default: 0.1 x the mean squared distance of the features to
// their global centroid, so the threshold tracks the data scale.
double default_zeta(const std::vector<FlatVector>& features);

struct RandomForestConfig {
  int tree_count = 200;
  int max_depth = 0;          // 0 = unlimited
  int features_per_split = 0; // 0 = round(sqrt(dim))
  int min_samples_split = 2;
  uint64_t seed = 1;
};

struct ForestNode {
  int feature = -1;  // -1 marks a leaf
  float threshold = 0.0f;
  int left = -1;
  int right = -1;
  std::vector<float> histogram;  // leaf only: weighted class counts
};

struct DecisionTree {
  std::vector<ForestNode> nodes;  // preorder, node 0 is the root
};

struct RandomForestModel {
  std::vector<DecisionTree> trees;
  std::vector<double> class_weights;  // per global class id
  int feature_dim = 0;
  int class_count = 0;
  uint64_t seed = 0;
};

// Axis-aligned trees on bootstrap samples; sqrt(dim) random split
// candidates per node; splits maximize the class-weighted Gini decrease and
// leaves store weighted histograms. With all-ones weights this is exactly
// the unweighted forest. Throws std::invalid_argument when fewer than two
// classes are present.
RandomForestModel train_forest(const std::vector<FlatVector>& features,
                               const std::vector<int>& labels,
                               const std::vector<double>& class_weights,
                               int class_count, const RandomForestConfig& config);

// Argmax of the averaged normalized leaf histograms (ties -> smallest id).
int forest_predict(const RandomForestModel& model, const FlatVector& feature);
std::vector<double> forest_predict_proba(const RandomForestModel& model,
                                         const FlatVector& feature);

enum class RoutingRule : uint8_t {
  TreeDescent = 0,   // descend by nearest child centroid (default)
  NearestLeaf = 1,   // nearest leaf centroid among the set's leaves
};

struct RefineModel {
  ConfusionSetPartition partition;
  std::vector<std::unique_ptr<SubsetNode>> trees;  // parallel to partition.sets, null for pure
  std::vector<RandomForestModel> forests;          // leaf.forest_index points here
  int feature_dim = 0;
  int class_count = 0;
  double zeta = 0.0;
  uint64_t eta = 0;
  RoutingRule routing = RoutingRule::TreeDescent;
};

// Pure confusion sets stay single leaves; each mixed set is hierarchically
// split over its own training samples and every mixed leaf gets a forest
// with weights inversely proportional to the within-leaf class frequency.
RefineModel build_refine_model(const ConfusionSetPartition& partition,
                               const std::vector<FlatVector>& features,
                               const std::vector<int>& labels, double zeta,
                               uint64_t eta, const RandomForestConfig& rf_config,
                               uint64_t seed);

// Routes a sample: its confusion set is the one holding the network
// prediction; inside a mixed set the tree is walked per the routing rule.
// Returns nullptr for pure sets (no tree to descend).
const SubsetNode* assign_subset(const RefineModel& model, int predicted_class,
                                const FlatVector& feature);
const SubsetNode* assign_subset(const RefineModel& model, int predicted_class,
                                const FlatVector& feature, RoutingRule rule);

// Pure set -> its class; pure leaf -> the leaf class; mixed leaf -> the
// leaf's forest decision.
int refined_predict(const RefineModel& model, int predicted_class,
                    const FlatVector& feature);

// VCNR container (magic "VCNR", version, partition, subset trees, forests
// with feature index / threshold / histogram records, little-endian).
inline constexpr uint32_t kRefineModelVersion = 1;
void save_refine_model(const RefineModel& model, const std::string& path);
RefineModel load_refine_model(const std::string& path);

}  // namespace vcnn
