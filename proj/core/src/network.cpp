#include "vcnn/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "vcnn/errors.hpp"
#include "vcnn/parallel.hpp"
#include "vcnn/rng.hpp"

namespace vcnn {

std::vector<LayerShape> validate_network(const NetworkSpec& spec) {
  if (spec.input_resolution < 1) throw ConfigError("network: input resolution must be positive");
  if (spec.class_count < 2) throw ConfigError("network: class count must be >= 2");
  if (spec.layers.empty()) throw ConfigError("network: no layers");

  std::vector<LayerShape> shapes;
  int spatial = spec.input_resolution;
  int channels = 1;
  bool seen_fc = false;
  bool seen_output = false;

  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    if (seen_output) throw ConfigError("network: layer after output layer");
    LayerShape shape;
    shape.in_spatial = spatial;
    shape.in_channels = channels;
    switch (layer.kind) {
      case LayerKind::Conv3: {
        if (seen_fc) throw ConfigError("network: conv layer after fc layer");
        if (layer.filter_edge < 3 || layer.filter_edge % 2 == 0) {
          throw ConfigError("network: conv filter edge must be odd and >= 3");
        }
        if (layer.filter_count < 1) throw ConfigError("network: conv filter count must be >= 1");
        int out = spatial - layer.filter_edge + 1;
        if (out < 1) {
          throw ConfigError("network: conv layer " + std::to_string(i) +
                            " filter does not fit input of size " + std::to_string(spatial));
        }
        if (layer.pool_after) {
          if (out % 2 != 0) {
            throw ConfigError("network: pooling after layer " + std::to_string(i) +
                              " needs an even extent, got " + std::to_string(out));
          }
          out /= 2;
        }
        shape.input_dim = layer.filter_edge * layer.filter_edge * layer.filter_edge * channels;
        shape.out_spatial = out;
        shape.out_channels = layer.filter_count;
        spatial = out;
        channels = layer.filter_count;
        break;
      }
      case LayerKind::Fc: {
        if (seen_fc) throw ConfigError("network: more than one fc layer");
        if (layer.filter_count < 1) throw ConfigError("network: fc width must be >= 1");
        seen_fc = true;
        shape.input_dim = spatial * spatial * spatial * channels;
        shape.out_spatial = 1;
        shape.out_channels = layer.filter_count;
        spatial = 1;
        channels = layer.filter_count;
        break;
      }
      case LayerKind::Output: {
        if (!seen_fc) throw ConfigError("network: output layer requires a preceding fc layer");
        if (layer.filter_count != spec.class_count) {
          throw ConfigError("network: output layer width must equal class count");
        }
        seen_output = true;
        shape.input_dim = channels;
        shape.out_spatial = 1;
        shape.out_channels = layer.filter_count;
        channels = layer.filter_count;
        break;
      }
    }
    shapes.push_back(shape);
  }
  if (!seen_output) throw ConfigError("network: missing output layer");
  return shapes;
}

NetworkSpec make_network_spec(int input_resolution, int class_count,
                              const std::vector<std::pair<int, int>>& conv,
                              int fc_count) {
  NetworkSpec spec;
  spec.input_resolution = input_resolution;
  spec.class_count = class_count;
  for (const auto& [edge, count] : conv) {
    spec.layers.push_back({LayerKind::Conv3, edge, count, true});
  }
  spec.layers.push_back({LayerKind::Fc, 0, fc_count, false});
  spec.layers.push_back({LayerKind::Output, 0, class_count, false});
  validate_network(spec);
  return spec;
}

size_t parameter_count(const NetworkWeights& w) {
  size_t n = 0;
  for (const auto& layer : w.layers) n += layer.weights.size() + layer.bias.size();
  return n;
}

NetworkWeights init_weights(const NetworkSpec& spec, uint64_t seed,
                            const std::vector<std::vector<FlatVector>>& conv_centroids) {
  const auto shapes = validate_network(spec);
  Rng rng(seed);
  NetworkWeights out;
  size_t conv_index = 0;
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const LayerShape& shape = shapes[i];
    LayerWeights lw;
    lw.bias.assign(layer.filter_count, 0.0f);
    lw.weights.assign(static_cast<size_t>(layer.filter_count) * shape.input_dim, 0.0f);
    bool from_centroids = false;
    if (layer.kind == LayerKind::Conv3 && conv_index < conv_centroids.size()) {
      const auto& centroids = conv_centroids[conv_index];
      if (!centroids.empty()) {
        if (centroids.size() != static_cast<size_t>(layer.filter_count)) {
          throw ConfigError("init_weights: centroid count does not match filter count");
        }
        for (size_t k = 0; k < centroids.size(); ++k) {
          if (centroids[k].size() != static_cast<size_t>(shape.input_dim)) {
            throw ConfigError("init_weights: centroid dimension does not match filter");
          }
          double norm = 0.0;
          for (float x : centroids[k]) norm += static_cast<double>(x) * x;
          norm = std::sqrt(norm);
          const double s = norm > 0.0 ? 0.1 / norm : 0.0;
          for (int c = 0; c < shape.input_dim; ++c) {
            lw.weights[k * shape.input_dim + c] = static_cast<float>(centroids[k][c] * s);
          }
        }
        from_centroids = true;
      }
    }
    if (!from_centroids) {
      const double stddev = std::sqrt(2.0 / shape.input_dim);
      for (auto& w : lw.weights) w = static_cast<float>(rng.normal() * stddev);
    }
    if (layer.kind == LayerKind::Conv3) ++conv_index;
    out.layers.push_back(std::move(lw));
  }
  return out;
}

namespace {

// Everything the backward pass needs from one sample's forward pass.
struct ForwardTrace {
  std::vector<Tensor4> conv_inputs;     // input volume of each conv layer
  std::vector<Tensor4> conv_activation; // post-ReLU, pre-pool
  std::vector<Tensor4> stage_outputs;   // post-pool
  FlatVector flat_input;                // fc input (flattened last volume)
  FlatVector fc_post;                   // post-ReLU fc activation
  FlatVector logits;
  FlatVector probs;
};

void conv_forward(const Tensor4& in, const LayerWeights& lw, int edge, int filters,
                  Tensor4& out) {
  const int out_edge = in.depth - edge + 1;
  out = Tensor4(out_edge, out_edge, out_edge, filters);
  const int patch_dim = edge * edge * edge * in.channels;
  const int row = edge * in.channels;  // contiguous (dx, c) run
  std::vector<float> patch(patch_dim);
  for (int d = 0; d < out_edge; ++d) {
    for (int h = 0; h < out_edge; ++h) {
      for (int w = 0; w < out_edge; ++w) {
        float* dst = patch.data();
        for (int dz = 0; dz < edge; ++dz) {
          for (int dy = 0; dy < edge; ++dy) {
            const float* src = &in.values[in.index(d + dz, h + dy, w, 0)];
            std::copy(src, src + row, dst);
            dst += row;
          }
        }
        float* out_ptr = &out.values[out.index(d, h, w, 0)];
        for (int k = 0; k < filters; ++k) {
          const float* wk = &lw.weights[static_cast<size_t>(k) * patch_dim];
          double acc = lw.bias[k];
          for (int c = 0; c < patch_dim; ++c) acc += static_cast<double>(patch[c]) * wk[c];
          out_ptr[k] = acc > 0.0 ? static_cast<float>(acc) : 0.0f;  // ReLU fused
        }
      }
    }
  }
}

// 2x2x2 max pooling, first index in (d, h, w, same-channel) scan order wins
// ties; backward recomputes the same argmax.
void pool_forward(const Tensor4& in, Tensor4& out) {
  const int oe = in.depth / 2;
  out = Tensor4(oe, oe, oe, in.channels);
  for (int d = 0; d < oe; ++d) {
    for (int h = 0; h < oe; ++h) {
      for (int w = 0; w < oe; ++w) {
        for (int c = 0; c < in.channels; ++c) {
          float best = in.at(2 * d, 2 * h, 2 * w, c);
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const float v = in.at(2 * d + dz, 2 * h + dy, 2 * w + dx, c);
                if (v > best) best = v;
              }
          out.at(d, h, w, c) = best;
        }
      }
    }
  }
}

FlatVector softmax(const FlatVector& logits) {
  double mx = -1e300;
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double sum = 0.0;
  std::vector<double> e(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += e[i];
  }
  FlatVector out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = static_cast<float>(e[i] / sum);
  return out;
}

ForwardTrace run_forward(const NetworkSpec& spec, const std::vector<LayerShape>& shapes,
                         const NetworkWeights& weights, const VoxelGrid& grid) {
  if (!grid.is_cubic() || grid.depth != spec.input_resolution) {
    throw std::invalid_argument("forward: grid resolution does not match network spec");
  }
  ForwardTrace tr;
  Tensor4 current = grid_to_tensor(grid);
  for (size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    const LayerWeights& lw = weights.layers[i];
    if (layer.kind == LayerKind::Conv3) {
      tr.conv_inputs.push_back(current);
      Tensor4 act;
      conv_forward(current, lw, layer.filter_edge, layer.filter_count, act);
      tr.conv_activation.push_back(act);
      if (layer.pool_after) {
        Tensor4 pooled;
        pool_forward(act, pooled);
        current = std::move(pooled);
      } else {
        current = std::move(act);
      }
      tr.stage_outputs.push_back(current);
    } else if (layer.kind == LayerKind::Fc) {
      tr.flat_input = current.values;  // Tensor4 linear order is the flatten order
      const int in_dim = shapes[i].input_dim;
      tr.fc_post.resize(layer.filter_count);
      for (int k = 0; k < layer.filter_count; ++k) {
        const float* wk = &lw.weights[static_cast<size_t>(k) * in_dim];
        double acc = lw.bias[k];
        for (int c = 0; c < in_dim; ++c) acc += static_cast<double>(tr.flat_input[c]) * wk[c];
        tr.fc_post[k] = acc > 0.0 ? static_cast<float>(acc) : 0.0f;
      }
    } else {
      const int in_dim = shapes[i].input_dim;
      tr.logits.resize(layer.filter_count);
      for (int k = 0; k < layer.filter_count; ++k) {
        const float* wk = &lw.weights[static_cast<size_t>(k) * in_dim];
        double acc = lw.bias[k];
        for (int c = 0; c < in_dim; ++c) acc += static_cast<double>(tr.fc_post[c]) * wk[c];
        tr.logits[k] = static_cast<float>(acc);
      }
      tr.probs = softmax(tr.logits);
    }
  }
  return tr;
}

// f64 gradient accumulators shaped like the weights.
struct GradBuffer {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> bias;

  explicit GradBuffer(const NetworkWeights& like) {
    for (const auto& layer : like.layers) {
      weights.emplace_back(layer.weights.size(), 0.0);
      bias.emplace_back(layer.bias.size(), 0.0);
    }
  }
  void add(const GradBuffer& other) {
    for (size_t i = 0; i < weights.size(); ++i) {
      for (size_t j = 0; j < weights[i].size(); ++j) weights[i][j] += other.weights[i][j];
      for (size_t j = 0; j < bias[i].size(); ++j) bias[i][j] += other.bias[i][j];
    }
  }
};

// Accumulates one sample's gradient (already scaled by inv_batch) into acc.
void run_backward(const NetworkSpec& spec, const std::vector<LayerShape>& shapes,
                  const NetworkWeights& weights, const ForwardTrace& tr, int label,
                  double inv_batch, GradBuffer& acc) {
  const size_t n_layers = spec.layers.size();
  const size_t out_idx = n_layers - 1;
  const size_t fc_idx = n_layers - 2;

  // softmax + cross-entropy head
  std::vector<double> g_logits(tr.probs.size());
  for (size_t k = 0; k < tr.probs.size(); ++k) {
    g_logits[k] = (static_cast<double>(tr.probs[k]) - (static_cast<int>(k) == label ? 1.0 : 0.0)) *
                  inv_batch;
  }

  // output layer
  {
    const int in_dim = shapes[out_idx].input_dim;
    const LayerWeights& lw = weights.layers[out_idx];
    std::vector<double> g_fc(in_dim, 0.0);
    for (size_t k = 0; k < g_logits.size(); ++k) {
      const double g = g_logits[k];
      acc.bias[out_idx][k] += g;
      double* gw = &acc.weights[out_idx][k * in_dim];
      const float* wk = &lw.weights[k * in_dim];
      for (int c = 0; c < in_dim; ++c) {
        gw[c] += g * tr.fc_post[c];
        g_fc[c] += g * wk[c];
      }
    }
    // fc layer (ReLU mask from the stored activation)
    const int fc_in_dim = shapes[fc_idx].input_dim;
    const LayerWeights& fw = weights.layers[fc_idx];
    std::vector<double> g_flat(fc_in_dim, 0.0);
    for (size_t k = 0; k < tr.fc_post.size(); ++k) {
      if (tr.fc_post[k] <= 0.0f) continue;
      const double g = g_fc[k];
      acc.bias[fc_idx][k] += g;
      double* gw = &acc.weights[fc_idx][k * fc_in_dim];
      const float* wk = &fw.weights[k * fc_in_dim];
      for (int c = 0; c < fc_in_dim; ++c) {
        gw[c] += g * tr.flat_input[c];
        g_flat[c] += g * wk[c];
      }
    }

    // conv stack, last to first
    std::vector<float> g_current(g_flat.begin(), g_flat.end());
    for (int li = static_cast<int>(fc_idx) - 1; li >= 0; --li) {
      const LayerSpec& layer = spec.layers[li];
      const Tensor4& act = tr.conv_activation[li];   // pre-pool
      const Tensor4& input = tr.conv_inputs[li];
      const int edge = layer.filter_edge;
      const int filters = layer.filter_count;
      const int out_edge = act.depth;

      // undo pooling: route each pooled gradient to the block argmax
      Tensor4 g_act(act.depth, act.height, act.width, act.channels);
      if (layer.pool_after) {
        const int pe = out_edge / 2;
        for (int d = 0; d < pe; ++d)
          for (int h = 0; h < pe; ++h)
            for (int w = 0; w < pe; ++w)
              for (int c = 0; c < filters; ++c) {
                int bd = 2 * d, bh = 2 * h, bw = 2 * w;
                float best = act.at(bd, bh, bw, c);
                for (int dz = 0; dz < 2; ++dz)
                  for (int dy = 0; dy < 2; ++dy)
                    for (int dx = 0; dx < 2; ++dx) {
                      const float v = act.at(2 * d + dz, 2 * h + dy, 2 * w + dx, c);
                      if (v > best) {
                        best = v;
                        bd = 2 * d + dz;
                        bh = 2 * h + dy;
                        bw = 2 * w + dx;
                      }
                    }
                g_act.at(bd, bh, bw, c) =
                    g_current[((static_cast<size_t>(d) * pe + h) * pe + w) * filters + c];
              }
      } else {
        std::copy(g_current.begin(), g_current.end(), g_act.values.begin());
      }

      // ReLU mask
      for (size_t i = 0; i < g_act.values.size(); ++i) {
        if (act.values[i] <= 0.0f) g_act.values[i] = 0.0f;
      }

      const int patch_dim = edge * edge * edge * input.channels;
      const int row = edge * input.channels;
      const LayerWeights& lw = weights.layers[li];
      std::vector<float> patch(patch_dim);
      std::vector<double> patch_grad(patch_dim);
      std::vector<float> g_input(input.values.size(), 0.0f);
      for (int d = 0; d < out_edge; ++d) {
        for (int h = 0; h < out_edge; ++h) {
          for (int w = 0; w < out_edge; ++w) {
            const float* g_out = &g_act.values[g_act.index(d, h, w, 0)];
            bool any = false;
            for (int k = 0; k < filters; ++k) {
              if (g_out[k] != 0.0f) { any = true; break; }
            }
            if (!any) continue;
            float* dst = patch.data();
            for (int dz = 0; dz < edge; ++dz) {
              for (int dy = 0; dy < edge; ++dy) {
                const float* src = &input.values[input.index(d + dz, h + dy, w, 0)];
                std::copy(src, src + row, dst);
                dst += row;
              }
            }
            std::fill(patch_grad.begin(), patch_grad.end(), 0.0);
            for (int k = 0; k < filters; ++k) {
              const double g = g_out[k];
              if (g == 0.0) continue;
              acc.bias[li][k] += g;
              double* gw = &acc.weights[li][static_cast<size_t>(k) * patch_dim];
              const float* wk = &lw.weights[static_cast<size_t>(k) * patch_dim];
              for (int c = 0; c < patch_dim; ++c) {
                gw[c] += g * patch[c];
                patch_grad[c] += g * wk[c];
              }
            }
            const double* src = patch_grad.data();
            for (int dz = 0; dz < edge; ++dz) {
              for (int dy = 0; dy < edge; ++dy) {
                float* out = &g_input[input.index(d + dz, h + dy, w, 0)];
                for (int c = 0; c < row; ++c) out[c] += static_cast<float>(src[c]);
                src += row;
              }
            }
          }
        }
      }
      g_current = std::move(g_input);
    }
  }
}

double sample_loss(const ForwardTrace& tr, int label) {
  const double p = std::max(static_cast<double>(tr.probs[label]), 1e-12);
  return -std::log(p);
}

}  // namespace

Tensor4 conv_stage(const Tensor4& input, const std::vector<FlatVector>& filters,
                   int edge, bool pool) {
  if (filters.empty()) throw std::invalid_argument("conv_stage: no filters");
  const size_t expect = static_cast<size_t>(edge) * edge * edge * input.channels;
  LayerWeights lw;
  lw.bias.assign(filters.size(), 0.0f);
  lw.weights.reserve(filters.size() * expect);
  for (const auto& f : filters) {
    if (f.size() != expect) {
      throw std::invalid_argument("conv_stage: filter dimension does not match input");
    }
    lw.weights.insert(lw.weights.end(), f.begin(), f.end());
  }
  Tensor4 act;
  conv_forward(input, lw, edge, static_cast<int>(filters.size()), act);
  if (!pool) return act;
  if (act.depth % 2 != 0) {
    throw std::invalid_argument("conv_stage: pooling needs an even extent");
  }
  Tensor4 pooled;
  pool_forward(act, pooled);
  return pooled;
}

ForwardResult forward(const NetworkSpec& spec, const NetworkWeights& weights,
                      const VoxelGrid& grid) {
  const auto shapes = validate_network(spec);
  ForwardTrace tr = run_forward(spec, shapes, weights, grid);
  ForwardResult out;
  out.stage_outputs = std::move(tr.stage_outputs);
  out.fc_activation = std::move(tr.fc_post);
  out.logits = std::move(tr.logits);
  out.probabilities = std::move(tr.probs);
  return out;
}

LossAndGrad loss_and_grad(const NetworkSpec& spec, const NetworkWeights& weights,
                          const std::vector<const VoxelGrid*>& batch,
                          const std::vector<int>& labels,
                          double weight_decay, int threads) {
  if (batch.empty()) throw std::invalid_argument("loss_and_grad: empty batch");
  if (batch.size() != labels.size()) {
    throw std::invalid_argument("loss_and_grad: batch/label size mismatch");
  }
  for (int l : labels) {
    if (l < 0 || l >= spec.class_count) {
      throw std::invalid_argument("loss_and_grad: label out of range");
    }
  }
  const auto shapes = validate_network(spec);
  const double inv_batch = 1.0 / static_cast<double>(batch.size());

  const size_t workers = threads <= 1 ? 1 : std::min<size_t>(threads, batch.size());
  std::vector<GradBuffer> buffers;
  std::vector<double> losses(workers, 0.0);
  buffers.reserve(workers);
  for (size_t i = 0; i < workers; ++i) buffers.emplace_back(weights);

  const size_t chunk = (batch.size() + workers - 1) / workers;
  parallel_for_chunks(workers, static_cast<int>(workers), [&](size_t wb, size_t we) {
    for (size_t w = wb; w < we; ++w) {
      const size_t begin = w * chunk;
      const size_t end = std::min(batch.size(), begin + chunk);
      for (size_t s = begin; s < end; ++s) {
        ForwardTrace tr = run_forward(spec, shapes, weights, *batch[s]);
        losses[w] += sample_loss(tr, labels[s]);
        run_backward(spec, shapes, weights, tr, labels[s], inv_batch, buffers[w]);
      }
    }
  });
  for (size_t w = 1; w < workers; ++w) buffers[0].add(buffers[w]);

  double loss = 0.0;
  for (double l : losses) loss += l;
  loss *= inv_batch;

  // weight decay: 0.5 * wd * ||W||^2 on weights, not biases
  if (weight_decay != 0.0) {
    double sq = 0.0;
    for (size_t li = 0; li < weights.layers.size(); ++li) {
      const auto& w = weights.layers[li].weights;
      for (size_t j = 0; j < w.size(); ++j) {
        sq += static_cast<double>(w[j]) * w[j];
        buffers[0].weights[li][j] += weight_decay * w[j];
      }
    }
    loss += 0.5 * weight_decay * sq;
  }
  if (!std::isfinite(loss)) throw DivergenceError("loss_and_grad: non-finite loss");

  LossAndGrad out;
  out.loss = loss;
  out.grads.layers.resize(weights.layers.size());
  for (size_t li = 0; li < weights.layers.size(); ++li) {
    auto& g = out.grads.layers[li];
    g.weights.resize(buffers[0].weights[li].size());
    g.bias.resize(buffers[0].bias[li].size());
    for (size_t j = 0; j < g.weights.size(); ++j) {
      g.weights[j] = static_cast<float>(buffers[0].weights[li][j]);
    }
    for (size_t j = 0; j < g.bias.size(); ++j) {
      g.bias[j] = static_cast<float>(buffers[0].bias[li][j]);
    }
  }
  return out;
}

TrainResult train(const NetworkSpec& spec, const NetworkWeights& init,
                  const std::vector<const VoxelGrid*>& grids,
                  const std::vector<int>& labels, const TrainConfig& config) {
  if (grids.empty()) throw std::invalid_argument("train: empty training set");
  if (config.learning_rate <= 0.0 && config.learning_rate != 0.0) {
    throw ConfigError("train: negative learning rate");
  }
  if (config.batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  validate_network(spec);

  TrainResult result;
  result.weights = init;

  // f64 momentum state; updates are computed in f64 and rounded once, so a
  // momentum-0 step is exactly w - lr*g.
  std::vector<std::vector<double>> vel_w, vel_b;
  for (const auto& layer : init.layers) {
    vel_w.emplace_back(layer.weights.size(), 0.0);
    vel_b.emplace_back(layer.bias.size(), 0.0);
  }

  Rng rng(config.seed);
  std::vector<size_t> order(grids.size());
  std::iota(order.begin(), order.end(), size_t{0});
  double lr = config.learning_rate;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    size_t seen = 0;
    for (size_t start = 0; start < order.size(); start += config.batch_size) {
      const size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const VoxelGrid*> batch;
      std::vector<int> batch_labels;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) {
        batch.push_back(grids[order[i]]);
        batch_labels.push_back(labels[order[i]]);
      }
      LossAndGrad lg;
      try {
        lg = loss_and_grad(spec, result.weights, batch, batch_labels,
                           config.weight_decay, config.threads);
      } catch (const DivergenceError& e) {
        throw DivergenceError("train diverged at epoch " + std::to_string(epoch) +
                              ", batch " + std::to_string(start / config.batch_size) +
                              ": " + e.what());
      }
      epoch_loss += lg.loss * static_cast<double>(end - start);
      seen += end - start;
      for (size_t li = 0; li < result.weights.layers.size(); ++li) {
        auto& layer = result.weights.layers[li];
        const auto& g = lg.grads.layers[li];
        for (size_t j = 0; j < layer.weights.size(); ++j) {
          vel_w[li][j] = config.momentum * vel_w[li][j] - lr * static_cast<double>(g.weights[j]);
          layer.weights[j] = static_cast<float>(layer.weights[j] + vel_w[li][j]);
        }
        for (size_t j = 0; j < layer.bias.size(); ++j) {
          vel_b[li][j] = config.momentum * vel_b[li][j] - lr * static_cast<double>(g.bias[j]);
          layer.bias[j] = static_cast<float>(layer.bias[j] + vel_b[li][j]);
        }
      }
    }
    result.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
    if (config.lr_decay_interval > 0 && (epoch + 1) % config.lr_decay_interval == 0) {
      lr *= config.lr_decay;
    }
  }
  return result;
}

std::vector<FlatVector> predict_probs(const NetworkSpec& spec,
                                      const NetworkWeights& weights,
                                      const std::vector<const VoxelGrid*>& grids,
                                      int threads) {
  const auto shapes = validate_network(spec);
  std::vector<FlatVector> out(grids.size());
  parallel_for_chunks(grids.size(), threads, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      out[i] = run_forward(spec, shapes, weights, *grids[i]).probs;
    }
  });
  return out;
}

std::vector<FlatVector> extract_features(const NetworkSpec& spec,
                                         const NetworkWeights& weights,
                                         const std::vector<const VoxelGrid*>& grids,
                                         int threads) {
  const auto shapes = validate_network(spec);
  std::vector<FlatVector> out(grids.size());
  parallel_for_chunks(grids.size(), threads, [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      out[i] = run_forward(spec, shapes, weights, *grids[i]).fc_post;
    }
  });
  return out;
}

namespace {

double batch_loss_only(const NetworkSpec& spec, const std::vector<LayerShape>& shapes,
                       const NetworkWeights& weights,
                       const std::vector<const VoxelGrid*>& batch,
                       const std::vector<int>& labels, double weight_decay) {
  double loss = 0.0;
  for (size_t s = 0; s < batch.size(); ++s) {
    ForwardTrace tr = run_forward(spec, shapes, weights, *batch[s]);
    loss += sample_loss(tr, labels[s]);
  }
  loss /= static_cast<double>(batch.size());
  if (weight_decay != 0.0) {
    double sq = 0.0;
    for (const auto& layer : weights.layers) {
      for (float w : layer.weights) sq += static_cast<double>(w) * w;
    }
    loss += 0.5 * weight_decay * sq;
  }
  return loss;
}

}  // namespace

NetworkWeights numeric_gradient(const NetworkSpec& spec, const NetworkWeights& weights,
                                const std::vector<const VoxelGrid*>& batch,
                                const std::vector<int>& labels,
                                double weight_decay, float step) {
  const auto shapes = validate_network(spec);
  NetworkWeights mutable_weights = weights;
  NetworkWeights grads = weights;
  auto probe = [&](float* slot, float* out) {
    const float saved = *slot;
    *slot = saved + step;
    const double up = batch_loss_only(spec, shapes, mutable_weights, batch, labels, weight_decay);
    *slot = saved - step;
    const double down = batch_loss_only(spec, shapes, mutable_weights, batch, labels, weight_decay);
    *slot = saved;
    *out = static_cast<float>((up - down) / (2.0 * static_cast<double>(step)));
  };
  for (size_t li = 0; li < mutable_weights.layers.size(); ++li) {
    auto& layer = mutable_weights.layers[li];
    for (size_t j = 0; j < layer.weights.size(); ++j) {
      probe(&layer.weights[j], &grads.layers[li].weights[j]);
    }
    for (size_t j = 0; j < layer.bias.size(); ++j) {
      probe(&layer.bias[j], &grads.layers[li].bias[j]);
    }
  }
  return grads;
}

double max_gradient_error(const NetworkWeights& a, const NetworkWeights& b) {
  double linf = 1.0;
  for (size_t li = 0; li < a.layers.size(); ++li) {
    for (float v : a.layers[li].weights) linf = std::max(linf, std::abs(static_cast<double>(v)));
    for (float v : a.layers[li].bias) linf = std::max(linf, std::abs(static_cast<double>(v)));
    for (float v : b.layers[li].weights) linf = std::max(linf, std::abs(static_cast<double>(v)));
    for (float v : b.layers[li].bias) linf = std::max(linf, std::abs(static_cast<double>(v)));
  }
  double worst = 0.0;
  for (size_t li = 0; li < a.layers.size(); ++li) {
    for (size_t j = 0; j < a.layers[li].weights.size(); ++j) {
      worst = std::max(worst, std::abs(static_cast<double>(a.layers[li].weights[j]) -
                                       b.layers[li].weights[j]));
    }
    for (size_t j = 0; j < a.layers[li].bias.size(); ++j) {
      worst = std::max(worst, std::abs(static_cast<double>(a.layers[li].bias[j]) -
                                       b.layers[li].bias[j]));
    }
  }
  return worst / linf;
}

double gradient_check(const NetworkSpec& spec, uint64_t seed) {
  NetworkWeights weights = init_weights(spec, seed);
  if (parameter_count(weights) > 10000) {
    throw std::invalid_argument("gradient_check: spec too large (> 10^4 parameters)");
  }
  Rng rng(derive_seed(seed, 0x67636b));
  std::vector<VoxelGrid> storage;
  std::vector<int> labels;
  for (int s = 0; s < 3; ++s) {
    VoxelGrid g = VoxelGrid::cube(spec.input_resolution);
    for (auto& v : g.values) v = static_cast<float>(rng.uniform());
    storage.push_back(std::move(g));
    labels.push_back(rng.uniform_index(spec.class_count));
  }
  std::vector<const VoxelGrid*> batch;
  for (const auto& g : storage) batch.push_back(&g);
  const double wd = 1e-4;
  const auto analytic = loss_and_grad(spec, weights, batch, labels, wd).grads;
  const auto numeric = numeric_gradient(spec, weights, batch, labels, wd);
  return max_gradient_error(analytic, numeric);
}

}  // namespace vcnn
