#include "vcnn/design.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "vcnn/errors.hpp"
#include "vcnn/parallel.hpp"
#include "vcnn/rng.hpp"

namespace vcnn {

namespace {

// Variance of the L2-normalized patch, or nullopt for an exact-zero patch.
// Shared by the materialized and streaming screening paths so both make
// identical selections.
std::optional<double> screening_variance(const FlatVector& raw) {
  double sumsq = 0.0;
  for (float v : raw) sumsq += static_cast<double>(v) * v;
  if (sumsq == 0.0) return std::nullopt;
  const double norm = std::sqrt(sumsq);
  double mean = 0.0;
  for (float v : raw) mean += static_cast<double>(static_cast<float>(v / norm));
  mean /= static_cast<double>(raw.size());
  double acc = 0.0;
  for (float v : raw) {
    const double d = static_cast<double>(static_cast<float>(v / norm)) - mean;
    acc += d * d;
  }
  return acc / static_cast<double>(raw.size());
}

// Indices that survive the two-stage screen plus the uniform cap, returned
// in ascending original order. variance[i] is nullopt for dropped zeros.
std::vector<size_t> screening_plan(const std::vector<std::optional<double>>& variance,
                                   const ScreeningConfig& cfg) {
  if (cfg.epsilon < 0.0) throw ConfigError("screening: epsilon must be >= 0");
  if (cfg.top_percent <= 0.0 || cfg.top_percent > 100.0) {
    throw ConfigError("screening: top_percent must be in (0, 100]");
  }
  if (cfg.max_samples < 1) throw ConfigError("screening: max_samples must be >= 1");

  std::vector<size_t> survivors;
  for (size_t i = 0; i < variance.size(); ++i) {
    if (variance[i] && *variance[i] >= cfg.epsilon) survivors.push_back(i);
  }
  if (survivors.empty()) {
    throw DataError("screening: no candidate patches survive (relax epsilon or top_percent)");
  }
  size_t keep = static_cast<size_t>(
      std::floor(static_cast<double>(survivors.size()) * cfg.top_percent / 100.0));
  if (keep < 1) keep = 1;
  if (keep < survivors.size()) {
    std::stable_sort(survivors.begin(), survivors.end(), [&](size_t a, size_t b) {
      return *variance[a] > *variance[b];
    });
    survivors.resize(keep);
  }
  if (survivors.size() > cfg.max_samples) {
    Rng rng(cfg.seed);
    const auto picks = rng.sample_indices(survivors.size(), cfg.max_samples);
    std::vector<size_t> sampled;
    sampled.reserve(picks.size());
    for (size_t p : picks) sampled.push_back(survivors[p]);
    survivors = std::move(sampled);
  }
  std::sort(survivors.begin(), survivors.end());
  return survivors;
}

}  // namespace

std::vector<FlatVector> collect_patches(const std::vector<Tensor4>& activations, int m) {
  if (m < 1 || m % 2 == 0) throw std::invalid_argument("collect_patches: m must be odd");
  std::vector<FlatVector> out;
  for (const auto& t : activations) {
    if (m > t.depth || m > t.height || m > t.width) {
      throw std::invalid_argument("collect_patches: window larger than activation volume");
    }
    const int pd = t.depth - m + 1;
    const int ph = t.height - m + 1;
    const int pw = t.width - m + 1;
    const int row = m * t.channels;
    const size_t dim = static_cast<size_t>(m) * m * row;
    for (int d = 0; d < pd; ++d) {
      for (int h = 0; h < ph; ++h) {
        for (int w = 0; w < pw; ++w) {
          FlatVector patch(dim);
          float* dst = patch.data();
          for (int dz = 0; dz < m; ++dz) {
            for (int dy = 0; dy < m; ++dy) {
              const float* src = &t.values[t.index(d + dz, h + dy, w, 0)];
              std::copy(src, src + row, dst);
              dst += row;
            }
          }
          out.push_back(std::move(patch));
        }
      }
    }
  }
  return out;
}

PatchSet screen_patches(const std::vector<FlatVector>& raw, int patch_edge,
                        const ScreeningConfig& cfg) {
  if (raw.empty()) throw std::invalid_argument("screen_patches: empty input");
  std::vector<std::optional<double>> variance(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) variance[i] = screening_variance(raw[i]);
  const auto plan = screening_plan(variance, cfg);
  PatchSet out;
  out.patch_edge = patch_edge;
  out.patches.reserve(plan.size());
  for (size_t i : plan) out.patches.push_back(l2_normalize(raw[i]));
  return out;
}

namespace {

struct LloydOutcome {
  std::vector<FlatVector> centroids;
  std::vector<int> assignments;
  std::vector<size_t> sizes;
  bool converged = false;
  int iterations = 0;
  double wcss = 0.0;
  std::vector<double> wcss_history;
};

int nearest_centroid(const FlatVector& p, const std::vector<FlatVector>& centroids,
                     double* dist_out) {
  int best = 0;
  double best_d = std::numeric_limits<double>::max();
  for (size_t k = 0; k < centroids.size(); ++k) {
    const double d = squared_distance(p, centroids[k]);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  if (dist_out) *dist_out = best_d;
  return best;
}

std::vector<FlatVector> kmeanspp_seed(const std::vector<FlatVector>& samples, int k,
                                      Rng& rng) {
  std::vector<FlatVector> centroids;
  centroids.reserve(k);
  centroids.push_back(samples[rng.uniform_int(samples.size())]);
  std::vector<double> d2(samples.size());
  while (centroids.size() < static_cast<size_t>(k)) {
    double total = 0.0;
    for (size_t i = 0; i < samples.size(); ++i) {
      double d = squared_distance(samples[i], centroids.back());
      if (centroids.size() > 1) d = std::min(d, d2[i]);
      d2[i] = d;
      total += d;
    }
    size_t pick = 0;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double run = 0.0;
      pick = samples.size() - 1;
      for (size_t i = 0; i < samples.size(); ++i) {
        run += d2[i];
        if (run >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(samples.size());
    }
    centroids.push_back(samples[pick]);
  }
  return centroids;
}

LloydOutcome lloyd(const std::vector<FlatVector>& samples, int k, Rng& rng,
                   int max_iterations) {
  const size_t n = samples.size();
  const size_t dim = samples[0].size();
  LloydOutcome out;
  out.centroids = kmeanspp_seed(samples, k, rng);
  out.assignments.assign(n, -1);

  std::vector<double> accum(static_cast<size_t>(k) * dim);
  std::vector<double> dist(n);
  for (int iter = 0; iter < max_iterations; ++iter) {
    // assignment step
    bool changed = false;
    double wcss = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const int a = nearest_centroid(samples[i], out.centroids, &dist[i]);
      if (a != out.assignments[i]) {
        out.assignments[i] = a;
        changed = true;
      }
      wcss += dist[i];
    }
    out.wcss = wcss;
    out.wcss_history.push_back(wcss);
    out.iterations = iter + 1;
    if (!changed) {
      out.converged = true;
      break;
    }
    // update step
    std::fill(accum.begin(), accum.end(), 0.0);
    out.sizes.assign(k, 0);
    for (size_t i = 0; i < n; ++i) {
      const int a = out.assignments[i];
      ++out.sizes[a];
      double* row = &accum[static_cast<size_t>(a) * dim];
      for (size_t c = 0; c < dim; ++c) row[c] += samples[i][c];
    }
    for (int c = 0; c < k; ++c) {
      if (out.sizes[c] == 0) {
        // reseed an empty cluster from the farthest sample
        size_t far = 0;
        double far_d = -1.0;
        for (size_t i = 0; i < n; ++i) {
          if (dist[i] > far_d) {
            far_d = dist[i];
            far = i;
          }
        }
        out.centroids[c] = samples[far];
        continue;
      }
      const double inv = 1.0 / static_cast<double>(out.sizes[c]);
      const double* row = &accum[static_cast<size_t>(c) * dim];
      for (size_t j = 0; j < dim; ++j) {
        out.centroids[c][j] = static_cast<float>(row[j] * inv);
      }
    }
  }
  // final bookkeeping against the final centroids
  out.sizes.assign(k, 0);
  double wcss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    out.assignments[i] = nearest_centroid(samples[i], out.centroids, &dist[i]);
    ++out.sizes[out.assignments[i]];
    wcss += dist[i];
  }
  out.wcss = wcss;
  return out;
}

}  // namespace

KMeansResult kmeans(const std::vector<FlatVector>& samples, int k, uint64_t seed,
                    int restarts) {
  if (samples.empty()) throw std::invalid_argument("kmeans: no samples");
  if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (static_cast<size_t>(k) > samples.size()) {
    throw std::invalid_argument("kmeans: k (" + std::to_string(k) +
                                ") exceeds sample count (" +
                                std::to_string(samples.size()) + ")");
  }
  for (const auto& s : samples) {
    if (s.size() != samples[0].size()) {
      throw std::invalid_argument("kmeans: inconsistent sample dimensions");
    }
  }

  LloydOutcome best;
  bool have = false;
  for (int r = 0; r < std::max(1, restarts); ++r) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(r)));
    LloydOutcome candidate = lloyd(samples, k, rng, 100);
    if (!have || candidate.wcss < best.wcss) {
      best = std::move(candidate);
      have = true;
    }
  }

  KMeansResult out;
  out.centroids = std::move(best.centroids);
  out.assignments = std::move(best.assignments);
  out.sizes = std::move(best.sizes);
  out.converged = best.converged;
  out.iterations = best.iterations;
  out.wcss = best.wcss;
  out.wcss_history = std::move(best.wcss_history);
  return out;
}

KMeansResult kmeans(const PatchSet& patches, int k, uint64_t seed, int restarts) {
  return kmeans(patches.patches, k, seed, restarts);
}

double bic_score(const KMeansResult& result, const PatchSet& patches) {
  const size_t n = patches.patches.size();
  if (n == 0) throw std::invalid_argument("bic_score: empty patch set");
  if (result.assignments.size() != n) {
    throw std::invalid_argument("bic_score: result does not match patch set");
  }
  const size_t dim = patches.patches[0].size();
  const size_t k = result.centroids.size();
  constexpr double kFloor = 1e-8;

  // population variance per feature, global and per cluster
  std::vector<double> mean(dim, 0.0);
  std::vector<double> cluster_mean(k * dim, 0.0);
  std::vector<double> counts(k, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const int a = result.assignments[i];
    counts[a] += 1.0;
    double* cm = &cluster_mean[static_cast<size_t>(a) * dim];
    for (size_t c = 0; c < dim; ++c) {
      mean[c] += patches.patches[i][c];
      cm[c] += patches.patches[i][c];
    }
  }
  for (size_t c = 0; c < dim; ++c) mean[c] /= static_cast<double>(n);
  for (size_t j = 0; j < k; ++j) {
    if (counts[j] == 0.0) continue;
    double* cm = &cluster_mean[j * dim];
    for (size_t c = 0; c < dim; ++c) cm[c] /= counts[j];
  }

  std::vector<double> var(dim, 0.0);
  std::vector<double> cluster_var(k * dim, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const int a = result.assignments[i];
    const double* cm = &cluster_mean[static_cast<size_t>(a) * dim];
    double* cv = &cluster_var[static_cast<size_t>(a) * dim];
    for (size_t c = 0; c < dim; ++c) {
      const double g = patches.patches[i][c] - mean[c];
      var[c] += g * g;
      const double d = patches.patches[i][c] - cm[c];
      cv[c] += d * d;
    }
  }
  for (size_t c = 0; c < dim; ++c) var[c] /= static_cast<double>(n);

  double likelihood = 0.0;
  for (size_t j = 0; j < k; ++j) {
    if (counts[j] == 0.0) continue;
    double sum_log = 0.0;
    const double* cv = &cluster_var[j * dim];
    for (size_t c = 0; c < dim; ++c) {
      const double vc = std::max(var[c], kFloor);
      const double vck = std::max(cv[c] / counts[j], kFloor);
      sum_log += std::log(vc + vck);
    }
    likelihood += -0.5 * counts[j] * sum_log;
  }
  const double penalty = 2.0 * static_cast<double>(k) * static_cast<double>(dim) *
                         std::log(static_cast<double>(n));
  const double bic = -2.0 * likelihood + penalty;
  const double cube = static_cast<double>(patches.patch_edge) * patches.patch_edge *
                      patches.patch_edge;
  return bic / cube;
}

std::optional<int> detect_valley(BicCurve& curve) {
  const auto& pts = curve.points;
  if (pts.size() < 2) throw std::invalid_argument("detect_valley: need at least 2 points");
  for (size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].first <= pts[i - 1].first) {
      throw std::invalid_argument("detect_valley: K values must be strictly increasing");
    }
  }
  for (size_t i = 1; i + 1 < pts.size(); ++i) {
    if (pts[i].second < pts[i - 1].second && pts[i].second < pts[i + 1].second) {
      curve.valley_k = pts[i].first;
      curve.valley_at_boundary = false;
      return curve.valley_k;
    }
  }
  bool decreasing = true, increasing = true;
  for (size_t i = 1; i < pts.size(); ++i) {
    if (pts[i].second >= pts[i - 1].second) decreasing = false;
    if (pts[i].second <= pts[i - 1].second) increasing = false;
  }
  size_t pick;
  if (decreasing) {
    pick = pts.size() - 1;
  } else if (increasing) {
    pick = 0;
  } else {
    // no strict interior minimum (plateau); fall back to the global minimum
    pick = 0;
    for (size_t i = 1; i < pts.size(); ++i) {
      if (pts[i].second < pts[pick].second) pick = i;
    }
  }
  curve.valley_k = pts[pick].first;
  curve.valley_at_boundary = true;
  return curve.valley_k;
}

BicCurve scan_bic_curve(const PatchSet& patches, const std::vector<int>& k_grid,
                        uint64_t seed, int restarts) {
  BicCurve curve;
  curve.patch_edge = patches.patch_edge;
  std::vector<int> grid = k_grid;
  std::sort(grid.begin(), grid.end());
  for (int k : grid) {
    if (k < 1 || static_cast<size_t>(k) > patches.patches.size()) continue;
    const KMeansResult result = kmeans(patches, k, derive_seed(seed, k), restarts);
    curve.points.emplace_back(k, bic_score(result, patches));
  }
  if (curve.points.size() < 2) {
    throw DataError("bic scan: fewer than 2 feasible K values (grid vs sample count)");
  }
  detect_valley(curve);
  return curve;
}

namespace {

double valley_score(const BicCurve& curve) {
  for (const auto& [k, s] : curve.points) {
    if (curve.valley_k && k == *curve.valley_k) return s;
  }
  return std::numeric_limits<double>::max();
}

// Forward a grid through the conv stages chosen so far (centroid filters,
// zero bias, ReLU, pool).
Tensor4 design_forward(const VoxelGrid& grid,
                       const std::vector<std::pair<int, std::vector<FlatVector>>>& stages) {
  Tensor4 t = grid_to_tensor(grid);
  for (const auto& [edge, filters] : stages) {
    t = conv_stage(t, filters, edge, true);
  }
  return t;
}

struct WindowIndex {
  // flattened window id -> (sample, position) bookkeeping
  std::vector<size_t> sample_base;  // per sample, first window id
  size_t total = 0;
};

}  // namespace

DesignResult design_network(const std::vector<const VoxelGrid*>& grids,
                            const DesignConfig& cfg) {
  if (grids.empty()) throw std::invalid_argument("design_network: no grids");
  if (cfg.conv_layers < 1) throw ConfigError("design_network: conv_layers must be >= 1");
  if (cfg.conv_edges.empty() || cfg.conv_k_grid.empty() || cfg.fc_k_grid.empty()) {
    throw ConfigError("design_network: empty candidate grids");
  }

  // optional uniform subsample of the corpus used for design
  std::vector<const VoxelGrid*> pool = grids;
  if (cfg.design_sample_count > 0 && cfg.design_sample_count < pool.size()) {
    Rng rng(derive_seed(cfg.seed, 0xde51));
    const auto picks = rng.sample_indices(pool.size(), cfg.design_sample_count);
    std::vector<const VoxelGrid*> sub;
    for (size_t p : picks) sub.push_back(pool[p]);
    pool = std::move(sub);
  }

  DesignResult result;
  result.screening = cfg.screening;
  std::vector<std::pair<int, std::vector<FlatVector>>> stages;  // chosen (edge, filters)

  for (int layer = 0; layer < cfg.conv_layers; ++layer) {
    // candidate edges must leave a poolable, positive output
    std::vector<int> edges;
    {
      Tensor4 probe = design_forward(*pool[0], stages);
      for (int m : cfg.conv_edges) {
        const int out = probe.depth - m + 1;
        if (m <= probe.depth && out >= 2 && out % 2 == 0) edges.push_back(m);
      }
      if (edges.empty()) {
        throw DataError("design_network: no candidate edge fits layer " +
                        std::to_string(layer));
      }
    }

    // pass 1: per-edge screening variances over every window
    struct EdgeScan {
      int edge = 0;
      std::vector<std::optional<double>> variance;
      std::vector<size_t> plan;
    };
    std::vector<EdgeScan> scans;
    for (int m : edges) {
      EdgeScan scan;
      scan.edge = m;
      std::vector<std::vector<std::optional<double>>> per_sample(pool.size());
      parallel_for_chunks(pool.size(), cfg.threads, [&](size_t b, size_t e) {
        for (size_t i = b; i < e; ++i) {
          const Tensor4 act = design_forward(*pool[i], stages);
          const auto windows = collect_patches({act}, m);
          per_sample[i].reserve(windows.size());
          for (const auto& w : windows) per_sample[i].push_back(screening_variance(w));
        }
      });
      for (auto& v : per_sample) {
        scan.variance.insert(scan.variance.end(), v.begin(), v.end());
      }
      scans.push_back(std::move(scan));
    }

    // keep N independent of the edge: cap every edge at the smallest
    // post-screen candidate count
    size_t common = cfg.screening.max_samples;
    for (auto& scan : scans) {
      ScreeningConfig probe_cfg = cfg.screening;
      probe_cfg.seed = derive_seed(cfg.seed, 0x5c + layer * 16 + scan.edge);
      probe_cfg.max_samples = std::numeric_limits<size_t>::max();
      const auto full = screening_plan(scan.variance, probe_cfg);
      common = std::min(common, full.size());
    }
    for (auto& scan : scans) {
      ScreeningConfig plan_cfg = cfg.screening;
      plan_cfg.seed = derive_seed(cfg.seed, 0x5c + layer * 16 + scan.edge);
      plan_cfg.max_samples = common;
      scan.plan = screening_plan(scan.variance, plan_cfg);
    }

    // pass 2: gather the selected windows and scan the K grid
    BicCurve best_curve;
    int best_edge = -1;
    double best_score = std::numeric_limits<double>::max();
    uint64_t best_seed = 0;
    PatchSet best_patches;
    for (auto& scan : scans) {
      PatchSet patches;
      patches.layer_index = layer;
      patches.patch_edge = scan.edge;
      patches.patches.reserve(scan.plan.size());
      size_t cursor = 0;  // window id offset of the current sample
      size_t plan_pos = 0;
      for (size_t i = 0; i < pool.size() && plan_pos < scan.plan.size(); ++i) {
        const Tensor4 act = design_forward(*pool[i], stages);
        const auto windows = collect_patches({act}, scan.edge);
        const size_t next = cursor + windows.size();
        while (plan_pos < scan.plan.size() && scan.plan[plan_pos] < next) {
          patches.patches.push_back(l2_normalize(windows[scan.plan[plan_pos] - cursor]));
          ++plan_pos;
        }
        cursor = next;
      }
      const uint64_t scan_seed = derive_seed(cfg.seed, 0xb1c + layer * 16 + scan.edge);
      BicCurve curve = scan_bic_curve(patches, cfg.conv_k_grid, scan_seed);
      const double score = valley_score(curve);
      result.curves.push_back(curve);
      result.curve_layers.push_back(layer);
      if (score < best_score) {
        best_score = score;
        best_curve = curve;
        best_edge = scan.edge;
        best_seed = scan_seed;
        best_patches = std::move(patches);
      }
    }

    const int chosen_k = *best_curve.valley_k;
    result.conv_choices.emplace_back(best_edge, chosen_k);
    // deterministic re-run of the winning clustering for the centroids
    KMeansResult winner = kmeans(best_patches, chosen_k, derive_seed(best_seed, chosen_k));
    result.conv_centroids.push_back(std::move(winner.centroids));
    stages.emplace_back(best_edge, result.conv_centroids.back());
  }

  // fc stage: one flattened activation vector per sample
  {
    std::vector<FlatVector> flats(pool.size());
    int spatial_edge = 0;
    parallel_for_chunks(pool.size(), cfg.threads, [&](size_t b, size_t e) {
      for (size_t i = b; i < e; ++i) {
        Tensor4 act = design_forward(*pool[i], stages);
        flats[i] = std::move(act.values);
      }
    });
    {
      Tensor4 probe = design_forward(*pool[0], stages);
      spatial_edge = probe.depth;
    }
    ScreeningConfig fc_cfg = cfg.screening;
    fc_cfg.seed = derive_seed(cfg.seed, 0xfc);
    PatchSet fc_patches = screen_patches(flats, spatial_edge, fc_cfg);
    fc_patches.layer_index = cfg.conv_layers;
    BicCurve curve =
        scan_bic_curve(fc_patches, cfg.fc_k_grid, derive_seed(cfg.seed, 0xfc5ca));
    result.curves.push_back(curve);
    result.curve_layers.push_back(cfg.conv_layers);
    result.fc_k = *curve.valley_k;
  }
  return result;
}

NetworkSpec spec_from_design(const DesignResult& design, int input_resolution,
                             int class_count) {
  return make_network_spec(input_resolution, class_count, design.conv_choices,
                           design.fc_k);
}

}  // namespace vcnn
