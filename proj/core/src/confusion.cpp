#include "vcnn/confusion.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "vcnn/checkpoint.hpp"
#include "vcnn/design.hpp"
#include "vcnn/errors.hpp"
#include "vcnn/rng.hpp"

namespace vcnn {

int ConfusionSetPartition::set_of(int class_index) const {
  for (size_t s = 0; s < sets.size(); ++s) {
    for (int c : sets[s].classes) {
      if (c == class_index) return static_cast<int>(s);
    }
  }
  return -1;
}

void ConfusionSetPartition::validate(int class_count) const {
  std::vector<int> seen(class_count, 0);
  for (const auto& set : sets) {
    if (set.classes.empty()) throw DataError("partition: empty confusion set");
    if (set.mixed != (set.classes.size() > 1)) {
      throw DataError("partition: pure/mixed flag inconsistent with cardinality");
    }
    for (int c : set.classes) {
      if (c < 0 || c >= class_count) throw DataError("partition: class index out of range");
      if (seen[c]++) throw DataError("partition: class appears in two sets");
    }
  }
  for (int c = 0; c < class_count; ++c) {
    if (!seen[c]) throw DataError("partition: class " + std::to_string(c) + " missing");
  }
}

SavMatrix extract_savs(const NetworkSpec& spec, const NetworkWeights& weights) {
  const auto shapes = validate_network(spec);
  if (weights.layers.size() != spec.layers.size()) {
    throw DataError("extract_savs: weights do not match spec");
  }
  const size_t out_idx = spec.layers.size() - 1;
  if (spec.layers[out_idx].kind != LayerKind::Output) {
    throw DataError("extract_savs: spec has no output layer");
  }
  const int in_dim = shapes[out_idx].input_dim;
  const LayerWeights& lw = weights.layers[out_idx];
  SavMatrix savs;
  savs.class_count = spec.class_count;
  savs.bias = lw.bias;
  savs.columns.reserve(spec.class_count);
  for (int k = 0; k < spec.class_count; ++k) {
    savs.columns.emplace_back(lw.weights.begin() + static_cast<size_t>(k) * in_dim,
                              lw.weights.begin() + static_cast<size_t>(k + 1) * in_dim);
  }
  return savs;
}

SavMatrix extract_savs(const std::string& checkpoint_path) {
  const auto [spec, weights] = load_checkpoint(checkpoint_path);
  return extract_savs(spec, weights);
}

ScoreMatrix soft_scores(const NetworkSpec& spec, const NetworkWeights& weights,
                        const std::vector<const VoxelGrid*>& grids,
                        const std::vector<int>& labels, int threads) {
  if (grids.size() != labels.size()) {
    throw std::invalid_argument("soft_scores: grid/label count mismatch");
  }
  for (int l : labels) {
    if (l < 0 || l >= spec.class_count) {
      throw std::invalid_argument("soft_scores: label out of range");
    }
  }
  ScoreMatrix scores;
  scores.class_count = spec.class_count;
  scores.labels = labels;
  scores.rows = predict_probs(spec, weights, grids, threads);
  return scores;
}

CFMatrix confusion_factor_matrix(const ScoreMatrix& scores) {
  const int c = scores.class_count;
  if (c < 1) throw std::invalid_argument("confusion_factor_matrix: no classes");
  if (scores.rows.size() != scores.labels.size()) {
    throw std::invalid_argument("confusion_factor_matrix: malformed score matrix");
  }
  std::vector<double> count(c, 0.0);
  std::vector<double> sum(static_cast<size_t>(c) * c, 0.0);  // sum[k][l]: scores of class-k samples toward l
  for (size_t i = 0; i < scores.rows.size(); ++i) {
    const int k = scores.labels[i];
    if (k < 0 || k >= c) throw std::invalid_argument("confusion_factor_matrix: bad label");
    if (scores.rows[i].size() != static_cast<size_t>(c)) {
      throw std::invalid_argument("confusion_factor_matrix: row width mismatch");
    }
    count[k] += 1.0;
    for (int l = 0; l < c; ++l) {
      sum[static_cast<size_t>(k) * c + l] += scores.rows[i][l];
    }
  }
  for (int k = 0; k < c; ++k) {
    if (count[k] == 0.0) {
      throw DataError("confusion_factor_matrix: class " + std::to_string(k) +
                      " has no samples");
    }
  }
  CFMatrix cf;
  cf.size = c;
  cf.values.assign(static_cast<size_t>(c) * c, 0.0);
  for (int k = 0; k < c; ++k) {
    for (int l = k + 1; l < c; ++l) {
      const double v = 0.5 * sum[static_cast<size_t>(k) * c + l] / count[k] +
                       0.5 * sum[static_cast<size_t>(l) * c + k] / count[l];
      cf.at(k, l) = v;
      cf.at(l, k) = v;
    }
  }
  for (int k = 0; k < c; ++k) {
    double mx = 0.0;
    for (int l = 0; l < c; ++l) {
      if (l != k) mx = std::max(mx, cf.at(k, l));
    }
    cf.at(k, k) = mx;
  }
  return cf;
}

namespace {

constexpr double kIsolationDegree = 1e-8;

ConfusionSet make_set(std::vector<int> classes) {
  ConfusionSet set;
  std::sort(classes.begin(), classes.end());
  set.classes = std::move(classes);
  set.mixed = set.classes.size() > 1;
  return set;
}

void canonicalize(ConfusionSetPartition& partition) {
  std::sort(partition.sets.begin(), partition.sets.end(),
            [](const ConfusionSet& a, const ConfusionSet& b) {
              return a.classes.front() < b.classes.front();
            });
}

}  // namespace

ConfusionSetPartition spectral_cluster(const CFMatrix& affinity,
                                       std::optional<int> k_opt, uint64_t seed) {
  const int c = affinity.size;
  if (c < 1) throw std::invalid_argument("spectral_cluster: empty affinity");
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      const double v = affinity.at(i, j);
      if (!(v >= -1e-12)) throw std::invalid_argument("spectral_cluster: negative affinity");
      if (std::abs(v - affinity.at(j, i)) > 1e-6) {
        throw std::invalid_argument("spectral_cluster: affinity not symmetric");
      }
    }
  }

  ConfusionSetPartition partition;

  // classes with no meaningful confusion are pure sets up front
  std::vector<int> active;
  for (int i = 0; i < c; ++i) {
    double degree = 0.0;
    for (int j = 0; j < c; ++j) {
      if (j != i) degree += affinity.at(i, j);
    }
    if (degree <= kIsolationDegree) {
      partition.sets.push_back(make_set({i}));
    } else {
      active.push_back(i);
    }
  }
  const int m = static_cast<int>(active.size());
  if (m == 1) {
    partition.sets.push_back(make_set({active[0]}));
    canonicalize(partition);
    partition.validate(c);
    return partition;
  }
  if (m == 2) {
    // two mutually confused classes form one mixed set
    partition.sets.push_back(make_set({active[0], active[1]}));
    canonicalize(partition);
    partition.validate(c);
    return partition;
  }
  if (m == 0) {
    canonicalize(partition);
    partition.validate(c);
    return partition;
  }

  // submatrix with self-affinity set to the row's off-diagonal maximum
  Eigen::MatrixXd a(m, m);
  for (int i = 0; i < m; ++i) {
    double mx = 0.0;
    for (int j = 0; j < m; ++j) {
      if (i == j) continue;
      const double v = affinity.at(active[i], active[j]);
      a(i, j) = v;
      mx = std::max(mx, v);
    }
    a(i, i) = mx;
  }
  a = 0.5 * (a + a.transpose());  // exact symmetry for the solver

  Eigen::VectorXd d = a.rowwise().sum();
  Eigen::VectorXd dinv = d.array().rsqrt();
  Eigen::MatrixXd b = dinv.asDiagonal() * a * dinv.asDiagonal();
  b = 0.5 * (b + b.transpose());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(b);
  if (solver.info() != Eigen::Success) {
    throw DataError("spectral_cluster: eigendecomposition failed");
  }
  // Laplacian spectrum ascending: lambda_L = 1 - lambda_B, reversed
  std::vector<double> lap(m);
  for (int i = 0; i < m; ++i) lap[i] = 1.0 - solver.eigenvalues()(m - 1 - i);

  int k;
  if (k_opt) {
    k = *k_opt;
    if (k < 1 || k > m) throw std::invalid_argument("spectral_cluster: k out of range");
  } else {
    const int k_hi = std::min(m - 1, c - 1);
    k = 2;
    double best_gap = -1.0;
    for (int cand = 2; cand <= k_hi; ++cand) {
      const double gap = lap[cand] - lap[cand - 1];
      if (gap > best_gap + 1e-15) {
        best_gap = gap;
        k = cand;
      }
    }
  }

  // Ng-Jordan-Weiss embedding: top-k eigenvectors of B, rows normalized
  std::vector<FlatVector> rows(m, FlatVector(k, 0.0f));
  for (int i = 0; i < m; ++i) {
    double norm = 0.0;
    for (int j = 0; j < k; ++j) {
      const double v = solver.eigenvectors()(i, m - 1 - j);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (int j = 0; j < k; ++j) {
      const double v = solver.eigenvectors()(i, m - 1 - j);
      rows[i][j] = static_cast<float>(norm > 0.0 ? v / norm : v);
    }
  }

  const KMeansResult clusters = kmeans(rows, k, derive_seed(seed, 0x5bec), 10);
  std::vector<std::vector<int>> groups(k);
  for (int i = 0; i < m; ++i) groups[clusters.assignments[i]].push_back(active[i]);
  for (auto& g : groups) {
    if (!g.empty()) partition.sets.push_back(make_set(std::move(g)));
  }
  canonicalize(partition);
  partition.validate(c);
  return partition;
}

ConfusionAnalysis identify_confusion_sets(const NetworkSpec& spec,
                                          const NetworkWeights& weights,
                                          const std::vector<const VoxelGrid*>& train_grids,
                                          const std::vector<int>& train_labels,
                                          std::optional<int> k, uint64_t seed,
                                          int threads) {
  const ScoreMatrix scores = soft_scores(spec, weights, train_grids, train_labels, threads);
  ConfusionAnalysis out;
  out.cf = confusion_factor_matrix(scores);
  out.partition = spectral_cluster(out.cf, k, seed);
  return out;
}

SavDiagnostics sav_diagnostics(const SavMatrix& savs,
                               const std::vector<FlatVector>& features,
                               const std::vector<int>& labels) {
  const int c = savs.class_count;
  SavDiagnostics diag;
  diag.pairwise_angle.assign(static_cast<size_t>(c) * c, 0.0);
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < c; ++j) {
      if (i == j) continue;
      const double denom = std::sqrt(dot(savs.columns[i], savs.columns[i]) *
                                     dot(savs.columns[j], savs.columns[j]));
      double cosine = denom > 0.0 ? dot(savs.columns[i], savs.columns[j]) / denom : 0.0;
      cosine = std::clamp(cosine, -1.0, 1.0);
      diag.pairwise_angle[static_cast<size_t>(i) * c + j] = std::acos(cosine);
    }
  }
  diag.class_variance.assign(c, 0.0);
  if (features.empty()) return diag;
  const size_t dim = features[0].size();
  std::vector<std::vector<double>> centroid(c, std::vector<double>(dim, 0.0));
  std::vector<double> count(c, 0.0);
  for (size_t i = 0; i < features.size(); ++i) {
    const int l = labels[i];
    count[l] += 1.0;
    for (size_t j = 0; j < dim; ++j) centroid[l][j] += features[i][j];
  }
  for (int l = 0; l < c; ++l) {
    if (count[l] == 0.0) continue;
    for (size_t j = 0; j < dim; ++j) centroid[l][j] /= count[l];
  }
  for (size_t i = 0; i < features.size(); ++i) {
    const int l = labels[i];
    double acc = 0.0;
    for (size_t j = 0; j < dim; ++j) {
      const double d = features[i][j] - centroid[l][j];
      acc += d * d;
    }
    diag.class_variance[l] += acc;
  }
  for (int l = 0; l < c; ++l) {
    if (count[l] > 0.0) diag.class_variance[l] /= count[l];
  }
  return diag;
}

}  // namespace vcnn
