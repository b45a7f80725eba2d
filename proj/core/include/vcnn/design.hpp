#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "vcnn/network.hpp"
#include "vcnn/voxel.hpp"

namespace vcnn {

// L2-normalized, saliency-screened receptive-field samples for one layer.
struct PatchSet {
  std::vector<FlatVector> patches;  // unit norm, uniform dimension
  int layer_index = 0;
  int patch_edge = 0;  // m; for the fc scan this is the remaining spatial edge
};

struct ScreeningConfig {
  double epsilon = 1e-4;       // stage-1 variance floor
  double top_percent = 20.0;   // stage-2: keep the top T% by variance
  size_t max_samples = 100000; // uniform subsample cap after stage 2
  uint64_t seed = 1;
};

struct KMeansResult {
  std::vector<FlatVector> centroids;
  std::vector<int> assignments;     // nearest centroid per sample
  std::vector<size_t> sizes;        // per-cluster counts, sum == sample count
  bool converged = false;
  int iterations = 0;
  double wcss = 0.0;                 // within-cluster sum of squares
  std::vector<double> wcss_history;  // per Lloyd iteration of the winning restart
};

struct BicCurve {
  int patch_edge = 0;
  std::vector<std::pair<int, double>> points;  // (K, normalized BIC), K ascending
  std::optional<int> valley_k;
  bool valley_at_boundary = false;
};

struct DesignConfig {
  int conv_layers = 2;
  std::vector<int> conv_edges = {3, 5, 7};
  std::vector<int> conv_k_grid = {32, 64, 128, 256, 512, 768, 1024};
  std::vector<int> fc_k_grid = {128, 256, 512, 1024, 2048};
  ScreeningConfig screening;
  size_t design_sample_count = 0;  // 0 = use every provided grid
  uint64_t seed = 1;
  int threads = 1;
};

struct DesignResult {
  std::vector<std::pair<int, int>> conv_choices;          // (m, K) per conv layer
  int fc_k = 0;
  std::vector<std::vector<FlatVector>> conv_centroids;    // init for each conv layer
  std::vector<BicCurve> curves;                           // every scanned curve
  std::vector<int> curve_layers;                          // source layer per curve
  ScreeningConfig screening;
};

// Every spatially valid m^3 window (stride 1, all channels) from every
// sample, flattened in the Tensor4 linear order.
std::vector<FlatVector> collect_patches(const std::vector<Tensor4>& activations, int m);

// Two-stage screening: drop exact-zero windows, normalize, drop variance
// < epsilon, keep the top T% by variance, then uniformly subsample to
// max_samples under the seed. Throws DataError when nothing survives.
PatchSet screen_patches(const std::vector<FlatVector>& raw, int patch_edge,
                        const ScreeningConfig& cfg);

// k-means++ seeding, Lloyd to convergence (or 100 iterations), best of
// `restarts` by WCSS; empty clusters are reseeded from the farthest point.
KMeansResult kmeans(const std::vector<FlatVector>& samples, int k, uint64_t seed,
                    int restarts = 3);
KMeansResult kmeans(const PatchSet& patches, int k, uint64_t seed, int restarts = 3);

// BIC = -2 sum_k L_k + 2*K*C*log N with the normal-model log-likelihood
//   L_k = -(N_k/2) * sum_c log(var_c + var_ck),
// variances floored at 1e-8, population convention, natural log; the
// reported score is divided by patch_edge^3 so curves for different filter
// sizes share a scale.
double bic_score(const KMeansResult& result, const PatchSet& patches);

// First K whose score is strictly below both neighbours. A monotone
// decreasing curve yields the last K and a monotone increasing curve the
// first K, both flagged as boundary valleys; a flat-free curve without a
// strict interior minimum falls back to the global minimum, flagged.
std::optional<int> detect_valley(BicCurve& curve);

// kmeans + bic_score over the K grid (skipping K > sample count), followed
// by valley detection.
BicCurve scan_bic_curve(const PatchSet& patches, const std::vector<int>& k_grid,
                        uint64_t seed, int restarts = 3);

// Greedy feed-forward parameter selection: per conv layer, screen patches at
// every candidate edge (sample counts equalized across edges), scan the K
// grid, pick the (m, K) with the lowest valley score, then push activations
// through the winning centroids (correlate, rectify, pool) and recurse; the
// fc width is chosen by the same valley rule over flattened activations.
DesignResult design_network(const std::vector<const VoxelGrid*>& grids,
                            const DesignConfig& cfg);

// The spec implied by a design result (pooling after every conv layer).
NetworkSpec spec_from_design(const DesignResult& design, int input_resolution,
                             int class_count);

}  // namespace vcnn
