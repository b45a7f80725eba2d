#include "vcnn/voxel.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "vcnn/errors.hpp"

namespace vcnn {

FlatVector l2_normalize(const FlatVector& v) {
  double sumsq = 0.0;
  for (float x : v) sumsq += static_cast<double>(x) * x;
  if (sumsq == 0.0) {
    throw std::invalid_argument("l2_normalize: zero-norm vector");
  }
  const double norm = std::sqrt(sumsq);
  FlatVector out(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>(v[i] / norm);
  }
  return out;
}

double element_variance(const FlatVector& v) {
  if (v.empty()) {
    throw std::invalid_argument("element_variance: empty vector");
  }
  double mean = 0.0;
  for (float x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double acc = 0.0;
  for (float x : v) {
    const double d = x - mean;
    acc += d * d;
  }
  return acc / static_cast<double>(v.size());
}

double dot(const FlatVector& a, const FlatVector& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("dot: dimension mismatch (" +
                                std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * b[i];
  }
  return acc;
}

double squared_distance(const FlatVector& a, const FlatVector& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("squared_distance: dimension mismatch");
  }
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc;
}

Tensor4 grid_to_tensor(const VoxelGrid& g) {
  Tensor4 t(g.depth, g.height, g.width, 1);
  t.values = g.values;
  return t;
}

void validate_grid(const VoxelGrid& g) {
  if (g.depth <= 0 || g.height <= 0 || g.width <= 0) {
    throw DataError("voxel grid has non-positive dimensions");
  }
  if (g.values.size() != static_cast<size_t>(g.depth) * g.height * g.width) {
    throw DataError("voxel grid value count does not match dimensions");
  }
  for (float x : g.values) {
    if (!std::isfinite(x) || x < 0.0f || x > 1.0f) {
      throw DataError("voxel grid value outside [0,1]");
    }
  }
}

}  // namespace vcnn
