#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vcnn/voxel.hpp"

namespace vcnn {

enum class LayerKind : uint8_t { Conv3 = 0, Fc = 1, Output = 2 };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv3;
  int filter_edge = 0;     // conv only; cubic, odd, >= 3
  int filter_count = 0;    // K
  bool pool_after = false; // conv only; 2x2x2 -> 1 max pooling
};

struct NetworkSpec {
  int input_resolution = 30;
  int class_count = 0;
  std::vector<LayerSpec> layers;
};

// Shape bookkeeping produced by validation.
struct LayerShape {
  int in_spatial = 0;   // cubic edge entering the layer (conv only)
  int out_spatial = 0;  // cubic edge leaving the layer (post-pool for conv)
  int in_channels = 0;
  int out_channels = 0;
  int input_dim = 0;    // conv: m^3 * in_channels; fc/output: flattened input
};

// Enforces the schedule arithmetic: valid convolution out = in - m + 1,
// exact pool halving, conv layers first, then one fc, then the output layer
// whose K equals class_count. Throws ConfigError on any violation.
std::vector<LayerShape> validate_network(const NetworkSpec& spec);

// Convenience builder: conv stages (edge, count) with pooling after every
// conv, one fc layer, softmax output.
NetworkSpec make_network_spec(int input_resolution, int class_count,
                              const std::vector<std::pair<int, int>>& conv,
                              int fc_count);

struct LayerWeights {
  // conv: filter_count rows of filter_edge^3 * in_channels, taps ordered
  // (dz, dy, dx, c) channel-fastest to match Tensor4 patch flattening;
  // fc/output: filter_count rows of input_dim.
  std::vector<float> weights;
  std::vector<float> bias;
};

struct NetworkWeights {
  std::vector<LayerWeights> layers;
};

size_t parameter_count(const NetworkWeights& w);

// Conv filters come from design centroids when provided (unit-norm clusters
// scaled by 0.1); everything else is zero-mean normal with std
// sqrt(2 / fan_in). Biases start at zero.
NetworkWeights init_weights(const NetworkSpec& spec, uint64_t seed,
                            const std::vector<std::vector<FlatVector>>& conv_centroids = {});

struct ForwardResult {
  std::vector<Tensor4> stage_outputs;  // one per conv layer, post-pool
  FlatVector fc_activation;            // post-ReLU
  FlatVector logits;
  FlatVector probabilities;            // softmax row, sums to 1
};

// One conv stage in isolation: correlate with the given filter rows (zero
// bias), ReLU, optional 2x2x2 max pool. The design recursion uses this to
// push samples through already-chosen centroid filters.
Tensor4 conv_stage(const Tensor4& input, const std::vector<FlatVector>& filters,
                   int edge, bool pool);

// Valid correlation, stride 1, bias, ReLU, optional 2x2x2 max pooling per
// conv layer; flatten -> affine -> ReLU for fc; affine -> softmax output.
ForwardResult forward(const NetworkSpec& spec, const NetworkWeights& weights,
                      const VoxelGrid& grid);

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  int batch_size = 32;
  int epochs = 40;
  double lr_decay = 0.5;
  int lr_decay_interval = 10;
  double weight_decay = 1e-4;
  uint64_t seed = 1;
  int threads = 1;
};

struct LossAndGrad {
  double loss = 0.0;
  NetworkWeights grads;  // mirrors the weight structure exactly
};

// Mean cross-entropy over the batch plus 0.5 * weight_decay * ||W||^2
// (biases are not decayed). Throws DivergenceError on a non-finite loss.
LossAndGrad loss_and_grad(const NetworkSpec& spec, const NetworkWeights& weights,
                          const std::vector<const VoxelGrid*>& batch,
                          const std::vector<int>& labels,
                          double weight_decay, int threads = 1);

struct TrainResult {
  NetworkWeights weights;
  std::vector<double> epoch_loss;
};

// Mini-batch SGD with momentum. Shuffling, batching and updates are fully
// deterministic given config.seed when threads == 1; with more threads the
// per-chunk gradient reduction is order-fixed and matches the
// single-threaded loss within ~1e-5 relative.
TrainResult train(const NetworkSpec& spec, const NetworkWeights& init,
                  const std::vector<const VoxelGrid*>& grids,
                  const std::vector<int>& labels, const TrainConfig& config);

// Softmax probability rows, one per grid.
std::vector<FlatVector> predict_probs(const NetworkSpec& spec,
                                      const NetworkWeights& weights,
                                      const std::vector<const VoxelGrid*>& grids,
                                      int threads = 1);

// Post-ReLU activations of the fc layer (the feature used by the confusion
// analysis and the refinement stage).
std::vector<FlatVector> extract_features(const NetworkSpec& spec,
                                         const NetworkWeights& weights,
                                         const std::vector<const VoxelGrid*>& grids,
                                         int threads = 1);

// Central-difference gradient of the batch loss, step h per parameter.
NetworkWeights numeric_gradient(const NetworkSpec& spec, const NetworkWeights& weights,
                                const std::vector<const VoxelGrid*>& batch,
                                const std::vector<int>& labels,
                                double weight_decay, float step = 1e-2f);

// Worst per-entry deviation |a - b| scaled by max(1, linf(a), linf(b)).
double max_gradient_error(const NetworkWeights& a, const NetworkWeights& b);

// Analytic-vs-numeric check on one random batch; the spec must stay small
// (<= 10^4 parameters). Returns the worst scaled error.
double gradient_check(const NetworkSpec& spec, uint64_t seed);

}  // namespace vcnn
