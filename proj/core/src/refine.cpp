#include "vcnn/refine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <stdexcept>

#include "vcnn/design.hpp"
#include "vcnn/errors.hpp"
#include "vcnn/rng.hpp"
#include "vcnn/serial.hpp"

namespace vcnn {

namespace {

// Centroid and mean squared distance, both against the f64 mean.
void node_statistics(const std::vector<FlatVector>& features,
                     const std::vector<size_t>& rows, SubsetNode& node) {
  const size_t dim = features[rows[0]].size();
  std::vector<double> mean(dim, 0.0);
  for (size_t r : rows) {
    for (size_t c = 0; c < dim; ++c) mean[c] += features[r][c];
  }
  for (size_t c = 0; c < dim; ++c) mean[c] /= static_cast<double>(rows.size());
  double var = 0.0;
  for (size_t r : rows) {
    for (size_t c = 0; c < dim; ++c) {
      const double d = features[r][c] - mean[c];
      var += d * d;
    }
  }
  node.variance = var / static_cast<double>(rows.size());
  node.centroid.resize(dim);
  for (size_t c = 0; c < dim; ++c) node.centroid[c] = static_cast<float>(mean[c]);
}

void finalize_leaf(const std::vector<int>& labels, const std::vector<uint64_t>& ids,
                   const std::vector<size_t>& rows, SubsetNode& node) {
  std::set<int> classes;
  for (size_t r : rows) classes.insert(labels[r]);
  if (classes.size() == 1) {
    node.pure = true;
    node.class_label = *classes.begin();
  } else {
    node.pure = false;
    node.class_set.assign(classes.begin(), classes.end());
  }
  (void)ids;
}

std::unique_ptr<SubsetNode> build_tree(const std::vector<FlatVector>& features,
                                       const std::vector<int>& labels,
                                       const std::vector<uint64_t>& ids,
                                       std::vector<size_t> rows, double zeta,
                                       size_t eta, uint64_t seed, uint64_t& counter) {
  auto node = std::make_unique<SubsetNode>();
  node->members.reserve(rows.size());
  for (size_t r : rows) node->members.push_back(ids[r]);
  node_statistics(features, rows, *node);

  const bool split = node->variance >= zeta && rows.size() > eta;
  if (split) {
    std::vector<FlatVector> local;
    local.reserve(rows.size());
    for (size_t r : rows) local.push_back(features[r]);
    const KMeansResult two = kmeans(local, 2, derive_seed(seed, counter++), 3);
    std::vector<size_t> left_rows, right_rows;
    for (size_t i = 0; i < rows.size(); ++i) {
      (two.assignments[i] == 0 ? left_rows : right_rows).push_back(rows[i]);
    }
    if (!left_rows.empty() && !right_rows.empty()) {
      node->left = build_tree(features, labels, ids, std::move(left_rows), zeta, eta,
                              seed, counter);
      node->right = build_tree(features, labels, ids, std::move(right_rows), zeta, eta,
                               seed, counter);
      return node;
    }
    // a degenerate 2-means split cannot partition this node; keep it a leaf
  }
  finalize_leaf(labels, ids, rows, *node);
  return node;
}

}  // namespace

std::unique_ptr<SubsetNode> hierarchical_split(const std::vector<FlatVector>& features,
                                               const std::vector<int>& labels,
                                               double zeta, size_t eta, uint64_t seed,
                                               const std::vector<uint64_t>& ids) {
  if (features.empty()) throw std::invalid_argument("hierarchical_split: no samples");
  if (features.size() != labels.size()) {
    throw std::invalid_argument("hierarchical_split: feature/label count mismatch");
  }
  if (zeta <= 0.0) throw std::invalid_argument("hierarchical_split: zeta must be > 0");
  if (eta < 1) throw std::invalid_argument("hierarchical_split: eta must be >= 1");
  std::vector<uint64_t> use_ids = ids;
  if (use_ids.empty()) {
    use_ids.resize(features.size());
    std::iota(use_ids.begin(), use_ids.end(), uint64_t{0});
  }
  if (use_ids.size() != features.size()) {
    throw std::invalid_argument("hierarchical_split: id/feature count mismatch");
  }
  std::vector<size_t> rows(features.size());
  std::iota(rows.begin(), rows.end(), size_t{0});
  uint64_t counter = 0;
  return build_tree(features, labels, use_ids, std::move(rows), zeta, eta, seed, counter);
}

double default_zeta(const std::vector<FlatVector>& features) {
  if (features.empty()) throw std::invalid_argument("default_zeta: no features");
  const size_t dim = features[0].size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& f : features) {
    for (size_t c = 0; c < dim; ++c) mean[c] += f[c];
  }
  for (size_t c = 0; c < dim; ++c) mean[c] /= static_cast<double>(features.size());
  double var = 0.0;
  for (const auto& f : features) {
    for (size_t c = 0; c < dim; ++c) {
      const double d = f[c] - mean[c];
      var += d * d;
    }
  }
  return 0.1 * var / static_cast<double>(features.size());
}

namespace {

struct SplitCandidate {
  int feature = -1;
  float threshold = 0.0f;
  double decrease = 0.0;
};

double weighted_gini(const std::vector<double>& hist, double total) {
  if (total <= 0.0) return 0.0;
  double sq = 0.0;
  for (double h : hist) sq += h * h;
  return 1.0 - sq / (total * total);
}

struct TreeBuilder {
  const std::vector<FlatVector>& features;
  const std::vector<int>& labels;
  const std::vector<double>& sample_weight;
  int class_count;
  int mtry;
  int max_depth;
  int min_samples_split;
  Rng& rng;
  DecisionTree& tree;

  int build(std::vector<size_t> rows, int depth) {
    const int node_index = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();

    std::vector<double> hist(class_count, 0.0);
    double total = 0.0;
    for (size_t r : rows) {
      hist[labels[r]] += sample_weight[r];
      total += sample_weight[r];
    }
    int distinct = 0;
    for (double h : hist) distinct += h > 0.0 ? 1 : 0;

    const bool leaf = distinct <= 1 ||
                      rows.size() < static_cast<size_t>(min_samples_split) ||
                      (max_depth > 0 && depth >= max_depth);
    SplitCandidate best;
    if (!leaf) best = find_split(rows, hist, total);

    if (leaf || best.feature < 0) {
      auto& node = tree.nodes[node_index];
      node.feature = -1;
      node.histogram.resize(class_count);
      for (int c = 0; c < class_count; ++c) node.histogram[c] = static_cast<float>(hist[c]);
      return node_index;
    }

    std::vector<size_t> left_rows, right_rows;
    for (size_t r : rows) {
      (features[r][best.feature] <= best.threshold ? left_rows : right_rows).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    const int left = build(std::move(left_rows), depth + 1);
    const int right = build(std::move(right_rows), depth + 1);
    auto& node = tree.nodes[node_index];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = left;
    node.right = right;
    return node_index;
  }

  SplitCandidate find_split(const std::vector<size_t>& rows,
                            const std::vector<double>& hist, double total) {
    const int dim = static_cast<int>(features[rows[0]].size());
    const double parent_gini = weighted_gini(hist, total);
    SplitCandidate best;

    std::vector<size_t> order(rows);
    std::vector<double> left_hist(class_count);
    const auto candidates = rng.sample_indices(dim, mtry);
    for (size_t f : candidates) {
      std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (features[a][f] != features[b][f]) return features[a][f] < features[b][f];
        return a < b;
      });
      std::fill(left_hist.begin(), left_hist.end(), 0.0);
      double left_total = 0.0;
      for (size_t i = 0; i + 1 < order.size(); ++i) {
        const size_t r = order[i];
        left_hist[labels[r]] += sample_weight[r];
        left_total += sample_weight[r];
        const float a = features[r][f];
        const float b = features[order[i + 1]][f];
        if (a == b) continue;
        const double right_total = total - left_total;
        double right_sq = 0.0, left_sq = 0.0;
        for (int c = 0; c < class_count; ++c) {
          left_sq += left_hist[c] * left_hist[c];
          const double rh = hist[c] - left_hist[c];
          right_sq += rh * rh;
        }
        const double gini_left = left_total > 0.0 ? 1.0 - left_sq / (left_total * left_total) : 0.0;
        const double gini_right =
            right_total > 0.0 ? 1.0 - right_sq / (right_total * right_total) : 0.0;
        const double decrease = parent_gini - (left_total * gini_left + right_total * gini_right) / total;
        if (decrease > best.decrease + 1e-15) {
          best.decrease = decrease;
          best.feature = static_cast<int>(f);
          best.threshold = a + 0.5f * (b - a);
          if (!(best.threshold > a)) best.threshold = a;  // guard against rounding
        }
      }
    }
    return best;
  }
};

}  // namespace

RandomForestModel train_forest(const std::vector<FlatVector>& features,
                               const std::vector<int>& labels,
                               const std::vector<double>& class_weights,
                               int class_count, const RandomForestConfig& config) {
  if (features.empty()) throw std::invalid_argument("train_forest: no samples");
  if (features.size() != labels.size()) {
    throw std::invalid_argument("train_forest: feature/label count mismatch");
  }
  if (static_cast<int>(class_weights.size()) != class_count) {
    throw std::invalid_argument("train_forest: class_weights size mismatch");
  }
  std::set<int> present(labels.begin(), labels.end());
  if (present.size() < 2) {
    throw std::invalid_argument("train_forest: fewer than two classes present");
  }
  for (int l : labels) {
    if (l < 0 || l >= class_count) throw std::invalid_argument("train_forest: label out of range");
  }
  if (config.tree_count < 1) throw std::invalid_argument("train_forest: tree_count must be >= 1");

  const int dim = static_cast<int>(features[0].size());
  RandomForestModel model;
  model.class_weights = class_weights;
  model.feature_dim = dim;
  model.class_count = class_count;
  model.seed = config.seed;

  std::vector<double> sample_weight(features.size());
  for (size_t i = 0; i < features.size(); ++i) sample_weight[i] = class_weights[labels[i]];

  const int mtry = config.features_per_split > 0
                       ? std::min(config.features_per_split, dim)
                       : std::max(1, static_cast<int>(std::lround(std::sqrt(dim))));

  model.trees.resize(config.tree_count);
  for (int t = 0; t < config.tree_count; ++t) {
    Rng rng(derive_seed(config.seed, static_cast<uint64_t>(t)));
    std::vector<size_t> rows(features.size());
    for (auto& r : rows) r = rng.uniform_int(features.size());  // bootstrap
    TreeBuilder builder{features, labels,   sample_weight,
                        class_count, mtry,  config.max_depth,
                        config.min_samples_split, rng, model.trees[t]};
    builder.build(std::move(rows), 0);
  }
  return model;
}

std::vector<double> forest_predict_proba(const RandomForestModel& model,
                                         const FlatVector& feature) {
  if (static_cast<int>(feature.size()) != model.feature_dim) {
    throw std::invalid_argument("forest_predict: feature dimension mismatch");
  }
  std::vector<double> proba(model.class_count, 0.0);
  for (const auto& tree : model.trees) {
    int node = 0;
    while (tree.nodes[node].feature >= 0) {
      const auto& n = tree.nodes[node];
      node = feature[n.feature] <= n.threshold ? n.left : n.right;
    }
    const auto& hist = tree.nodes[node].histogram;
    double total = 0.0;
    for (float h : hist) total += h;
    if (total > 0.0) {
      for (int c = 0; c < model.class_count; ++c) proba[c] += hist[c] / total;
    }
  }
  for (auto& p : proba) p /= static_cast<double>(model.trees.size());
  return proba;
}

int forest_predict(const RandomForestModel& model, const FlatVector& feature) {
  const auto proba = forest_predict_proba(model, feature);
  int best = 0;
  for (int c = 1; c < model.class_count; ++c) {
    if (proba[c] > proba[best]) best = c;
  }
  return best;
}

namespace {

void attach_forests(SubsetNode& node, const std::vector<FlatVector>& features,
                    const std::vector<int>& labels,
                    const std::vector<size_t>& global_of_member,
                    const RandomForestConfig& rf_config, int class_count,
                    std::vector<RandomForestModel>& forests, uint64_t seed,
                    uint64_t& counter) {
  if (!node.is_leaf()) {
    attach_forests(*node.left, features, labels, global_of_member, rf_config,
                   class_count, forests, seed, counter);
    attach_forests(*node.right, features, labels, global_of_member, rf_config,
                   class_count, forests, seed, counter);
    return;
  }
  if (node.pure) return;

  std::vector<FlatVector> leaf_features;
  std::vector<int> leaf_labels;
  leaf_features.reserve(node.members.size());
  for (uint64_t id : node.members) {
    leaf_features.push_back(features[id]);
    leaf_labels.push_back(labels[id]);
  }
  (void)global_of_member;
  // inverse within-leaf frequency weights
  std::vector<double> freq(class_count, 0.0);
  for (int l : leaf_labels) freq[l] += 1.0;
  std::vector<double> weights(class_count, 0.0);
  const double n = static_cast<double>(leaf_labels.size());
  const double k = static_cast<double>(node.class_set.size());
  for (int c : node.class_set) weights[c] = n / (k * freq[c]);

  RandomForestConfig cfg = rf_config;
  cfg.seed = derive_seed(seed, 0xf07e5 + counter++);
  forests.push_back(train_forest(leaf_features, leaf_labels, weights, class_count, cfg));
  node.forest_index = static_cast<int>(forests.size() - 1);
}

}  // namespace

RefineModel build_refine_model(const ConfusionSetPartition& partition,
                               const std::vector<FlatVector>& features,
                               const std::vector<int>& labels, double zeta,
                               uint64_t eta, const RandomForestConfig& rf_config,
                               uint64_t seed) {
  if (features.empty()) throw std::invalid_argument("build_refine_model: no features");
  if (features.size() != labels.size()) {
    throw std::invalid_argument("build_refine_model: feature/label count mismatch");
  }
  int class_count = 0;
  for (const auto& set : partition.sets) {
    for (int c : set.classes) class_count = std::max(class_count, c + 1);
  }
  partition.validate(class_count);

  RefineModel model;
  model.partition = partition;
  model.feature_dim = static_cast<int>(features[0].size());
  model.class_count = class_count;
  model.zeta = zeta;
  model.eta = eta;
  model.trees.resize(partition.sets.size());

  uint64_t forest_counter = 0;
  for (size_t s = 0; s < partition.sets.size(); ++s) {
    const ConfusionSet& set = partition.sets[s];
    if (!set.mixed) continue;  // pure sets answer directly, no tree

    std::vector<size_t> member_rows;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (std::find(set.classes.begin(), set.classes.end(), labels[i]) != set.classes.end()) {
        member_rows.push_back(i);
      }
    }
    if (member_rows.empty()) {
      throw DataError("build_refine_model: mixed set has no training samples");
    }
    std::vector<FlatVector> set_features;
    std::vector<int> set_labels;
    std::vector<uint64_t> set_ids;
    set_features.reserve(member_rows.size());
    for (size_t r : member_rows) {
      set_features.push_back(features[r]);
      set_labels.push_back(labels[r]);
      set_ids.push_back(static_cast<uint64_t>(r));
    }
    model.trees[s] = hierarchical_split(set_features, set_labels, zeta, eta,
                                        derive_seed(seed, 0x7e11 + s), set_ids);
    // leaves hold global sample ids, so forests index the full feature list
    attach_forests(*model.trees[s], features, labels, member_rows, rf_config,
                   class_count, model.forests, derive_seed(seed, 0x0f0 + s),
                   forest_counter);
  }
  return model;
}

namespace {

const SubsetNode* descend_tree(const SubsetNode* node, const FlatVector& feature) {
  while (!node->is_leaf()) {
    const double dl = squared_distance(feature, node->left->centroid);
    const double dr = squared_distance(feature, node->right->centroid);
    node = dl <= dr ? node->left.get() : node->right.get();
  }
  return node;
}

void collect_leaves(const SubsetNode* node, std::vector<const SubsetNode*>& out) {
  if (node->is_leaf()) {
    out.push_back(node);
    return;
  }
  collect_leaves(node->left.get(), out);
  collect_leaves(node->right.get(), out);
}

}  // namespace

const SubsetNode* assign_subset(const RefineModel& model, int predicted_class,
                                const FlatVector& feature, RoutingRule rule) {
  const int s = model.partition.set_of(predicted_class);
  if (s < 0) throw std::invalid_argument("assign_subset: class not in partition");
  if (!model.partition.sets[s].mixed) return nullptr;
  const SubsetNode* root = model.trees[s].get();
  if (rule == RoutingRule::TreeDescent) return descend_tree(root, feature);
  std::vector<const SubsetNode*> leaves;
  collect_leaves(root, leaves);
  const SubsetNode* best = leaves[0];
  double best_d = squared_distance(feature, best->centroid);
  for (size_t i = 1; i < leaves.size(); ++i) {
    const double d = squared_distance(feature, leaves[i]->centroid);
    if (d < best_d) {
      best_d = d;
      best = leaves[i];
    }
  }
  return best;
}

const SubsetNode* assign_subset(const RefineModel& model, int predicted_class,
                                const FlatVector& feature) {
  return assign_subset(model, predicted_class, feature, model.routing);
}

int refined_predict(const RefineModel& model, int predicted_class,
                    const FlatVector& feature) {
  const int s = model.partition.set_of(predicted_class);
  if (s < 0) throw std::invalid_argument("refined_predict: class not in partition");
  const ConfusionSet& set = model.partition.sets[s];
  if (!set.mixed) return set.classes.front();
  const SubsetNode* leaf = assign_subset(model, predicted_class, feature);
  if (leaf->pure) return leaf->class_label;
  return forest_predict(model.forests[leaf->forest_index], feature);
}

namespace {

void write_subset_node(ByteWriter& w, const SubsetNode& node) {
  w.u8(node.is_leaf() ? 1 : 0);
  w.u64(node.members.size());
  for (uint64_t id : node.members) w.u64(id);
  w.u64(node.centroid.size());
  w.f32_array(node.centroid);
  w.f64(node.variance);
  if (node.is_leaf()) {
    w.u8(node.pure ? 1 : 0);
    if (node.pure) {
      w.u32(static_cast<uint32_t>(node.class_label));
    } else {
      w.u32(static_cast<uint32_t>(node.class_set.size()));
      for (int c : node.class_set) w.u32(static_cast<uint32_t>(c));
      w.u32(static_cast<uint32_t>(node.forest_index));
    }
  } else {
    write_subset_node(w, *node.left);
    write_subset_node(w, *node.right);
  }
}

std::unique_ptr<SubsetNode> read_subset_node(ByteReader& r) {
  auto node = std::make_unique<SubsetNode>();
  const bool leaf = r.u8() != 0;
  const uint64_t members = r.u64();
  node->members.resize(members);
  for (auto& id : node->members) id = r.u64();
  node->centroid = r.f32_array(r.u64());
  node->variance = r.f64();
  if (leaf) {
    node->pure = r.u8() != 0;
    if (node->pure) {
      node->class_label = static_cast<int>(r.u32());
    } else {
      const uint32_t n = r.u32();
      node->class_set.resize(n);
      for (auto& c : node->class_set) c = static_cast<int>(r.u32());
      node->forest_index = static_cast<int>(r.u32());
    }
  } else {
    node->left = read_subset_node(r);
    node->right = read_subset_node(r);
  }
  return node;
}

}  // namespace

void save_refine_model(const RefineModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("refine model: cannot open for writing: " + path);
  ByteWriter w(out);
  w.magic("VCNR");
  w.u32(kRefineModelVersion);
  w.u32(static_cast<uint32_t>(model.class_count));
  w.u32(static_cast<uint32_t>(model.feature_dim));
  w.u8(static_cast<uint8_t>(model.routing));
  w.f64(model.zeta);
  w.u64(model.eta);
  w.u32(static_cast<uint32_t>(model.partition.sets.size()));
  for (const auto& set : model.partition.sets) {
    w.u8(set.mixed ? 1 : 0);
    w.u32(static_cast<uint32_t>(set.classes.size()));
    for (int c : set.classes) w.u32(static_cast<uint32_t>(c));
  }
  for (size_t s = 0; s < model.partition.sets.size(); ++s) {
    w.u8(model.trees[s] ? 1 : 0);
    if (model.trees[s]) write_subset_node(w, *model.trees[s]);
  }
  w.u32(static_cast<uint32_t>(model.forests.size()));
  for (const auto& forest : model.forests) {
    w.u32(static_cast<uint32_t>(forest.class_count));
    w.u32(static_cast<uint32_t>(forest.feature_dim));
    w.u64(forest.seed);
    for (double cw : forest.class_weights) w.f64(cw);
    w.u32(static_cast<uint32_t>(forest.trees.size()));
    for (const auto& tree : forest.trees) {
      w.u32(static_cast<uint32_t>(tree.nodes.size()));
      for (const auto& node : tree.nodes) {
        w.u8(node.feature < 0 ? 1 : 0);
        if (node.feature < 0) {
          w.f32_array(node.histogram);
        } else {
          w.u32(static_cast<uint32_t>(node.feature));
          w.f32(node.threshold);
          w.u32(static_cast<uint32_t>(node.left));
          w.u32(static_cast<uint32_t>(node.right));
        }
      }
    }
  }
  if (!out) throw DataError("refine model: short write: " + path);
}

RefineModel load_refine_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("refine model: cannot open: " + path);
  ByteReader r(in, "refine model");
  r.expect_magic("VCNR");
  const uint32_t version = r.u32();
  if (version != kRefineModelVersion) {
    throw DataError("refine model: unsupported format version " + std::to_string(version));
  }
  RefineModel model;
  model.class_count = static_cast<int>(r.u32());
  model.feature_dim = static_cast<int>(r.u32());
  model.routing = static_cast<RoutingRule>(r.u8());
  model.zeta = r.f64();
  model.eta = r.u64();
  const uint32_t n_sets = r.u32();
  for (uint32_t s = 0; s < n_sets; ++s) {
    ConfusionSet set;
    set.mixed = r.u8() != 0;
    const uint32_t n = r.u32();
    set.classes.resize(n);
    for (auto& c : set.classes) c = static_cast<int>(r.u32());
    model.partition.sets.push_back(std::move(set));
  }
  model.trees.resize(n_sets);
  for (uint32_t s = 0; s < n_sets; ++s) {
    if (r.u8()) model.trees[s] = read_subset_node(r);
  }
  const uint32_t n_forests = r.u32();
  model.forests.resize(n_forests);
  for (auto& forest : model.forests) {
    forest.class_count = static_cast<int>(r.u32());
    forest.feature_dim = static_cast<int>(r.u32());
    forest.seed = r.u64();
    forest.class_weights.resize(forest.class_count);
    for (auto& cw : forest.class_weights) cw = r.f64();
    const uint32_t n_trees = r.u32();
    forest.trees.resize(n_trees);
    for (auto& tree : forest.trees) {
      const uint32_t n_nodes = r.u32();
      tree.nodes.resize(n_nodes);
      for (auto& node : tree.nodes) {
        const bool leaf = r.u8() != 0;
        if (leaf) {
          node.feature = -1;
          node.histogram = r.f32_array(static_cast<uint64_t>(forest.class_count));
        } else {
          node.feature = static_cast<int>(r.u32());
          node.threshold = r.f32();
          node.left = static_cast<int>(r.u32());
          node.right = static_cast<int>(r.u32());
        }
      }
    }
  }
  r.expect_eof();
  model.partition.validate(model.class_count);
  return model;
}

}  // namespace vcnn
