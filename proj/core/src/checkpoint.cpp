#include "vcnn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "vcnn/errors.hpp"
#include "vcnn/serial.hpp"

namespace vcnn {

void save_checkpoint(const NetworkSpec& spec, const NetworkWeights& weights,
                     const std::string& path) {
  validate_network(spec);
  if (weights.layers.size() != spec.layers.size()) {
    throw DataError("checkpoint: weight layer count does not match spec");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("checkpoint: cannot open for writing: " + path);
  ByteWriter w(out);
  w.magic("VCNN");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<uint32_t>(spec.input_resolution));
  w.u32(static_cast<uint32_t>(spec.class_count));
  w.u32(static_cast<uint32_t>(spec.layers.size()));
  for (const auto& layer : spec.layers) {
    w.u8(static_cast<uint8_t>(layer.kind));
    w.u8(layer.pool_after ? 1 : 0);
    w.u32(static_cast<uint32_t>(layer.filter_edge));
    w.u32(static_cast<uint32_t>(layer.filter_count));
  }
  for (const auto& layer : weights.layers) {
    w.u64(layer.weights.size());
    w.f32_array(layer.weights);
    w.u64(layer.bias.size());
    w.f32_array(layer.bias);
  }
  if (!out) throw DataError("checkpoint: short write: " + path);
}

std::pair<NetworkSpec, NetworkWeights> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open: " + path);
  ByteReader r(in, "checkpoint");
  r.expect_magic("VCNN");
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " + std::to_string(version) +
                    " (reader supports " + std::to_string(kCheckpointVersion) + ")");
  }
  NetworkSpec spec;
  spec.input_resolution = static_cast<int>(r.u32());
  spec.class_count = static_cast<int>(r.u32());
  const uint32_t n_layers = r.u32();
  for (uint32_t i = 0; i < n_layers; ++i) {
    LayerSpec layer;
    layer.kind = static_cast<LayerKind>(r.u8());
    layer.pool_after = r.u8() != 0;
    layer.filter_edge = static_cast<int>(r.u32());
    layer.filter_count = static_cast<int>(r.u32());
    spec.layers.push_back(layer);
  }
  const auto shapes = validate_network(spec);
  NetworkWeights weights;
  for (uint32_t i = 0; i < n_layers; ++i) {
    LayerWeights lw;
    const uint64_t wn = r.u64();
    const uint64_t expected =
        static_cast<uint64_t>(spec.layers[i].filter_count) * shapes[i].input_dim;
    if (wn != expected) throw DataError("checkpoint: weight blob size mismatch");
    lw.weights = r.f32_array(wn);
    const uint64_t bn = r.u64();
    if (bn != static_cast<uint64_t>(spec.layers[i].filter_count)) {
      throw DataError("checkpoint: bias blob size mismatch");
    }
    lw.bias = r.f32_array(bn);
    weights.layers.push_back(std::move(lw));
  }
  r.expect_eof();
  return {spec, weights};
}

}  // namespace vcnn
