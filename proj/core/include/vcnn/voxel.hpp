#pragma once

#include <cstddef>
#include <optional>
#include <vector>

namespace vcnn {

// One flat sample vector. Storage is f32 throughout the pipeline; every
// reduction over it (dot products, variances, loss sums) accumulates in f64.
using FlatVector = std::vector<float>;

// Dense 3D occupancy volume. Values live in [0, 1]; pipeline inputs are
// cubic (the network operates on 30x30x30 grids by default).
struct VoxelGrid {
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<float> values;
  std::optional<int> label;

  VoxelGrid() = default;
  VoxelGrid(int d, int h, int w)
      : depth(d), height(h), width(w),
        values(static_cast<size_t>(d) * h * w, 0.0f) {}

  static VoxelGrid cube(int resolution) {
    return VoxelGrid(resolution, resolution, resolution);
  }

  size_t index(int d, int h, int w) const {
    return (static_cast<size_t>(d) * height + h) * width + w;
  }
  float& at(int d, int h, int w) { return values[index(d, h, w)]; }
  float at(int d, int h, int w) const { return values[index(d, h, w)]; }

  bool is_cubic() const { return depth == height && height == width; }
  size_t size() const { return values.size(); }
};

// Dense 4D activation volume. The linear order is frozen as channel-fastest,
// then width, height, depth:
//   index = ((d*height + h)*width + w)*channels + c
// Patch flattening and all serialization rely on this order.
struct Tensor4 {
  int depth = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> values;

  Tensor4() = default;
  Tensor4(int d, int h, int w, int c)
      : depth(d), height(h), width(w), channels(c),
        values(static_cast<size_t>(d) * h * w * c, 0.0f) {}

  size_t index(int d, int h, int w, int c) const {
    return ((static_cast<size_t>(d) * height + h) * static_cast<size_t>(width) + w) *
               channels + c;
  }
  float& at(int d, int h, int w, int c) { return values[index(d, h, w, c)]; }
  float at(int d, int h, int w, int c) const { return values[index(d, h, w, c)]; }

  size_t size() const { return values.size(); }
};

// v / ||v||. Throws std::invalid_argument on a zero-norm input; callers that
// screen patches must filter zero vectors first.
FlatVector l2_normalize(const FlatVector& v);

// Population variance of the elements (mean of squared deviations).
// Computed two-pass in f64 so it is shift-stable.
double element_variance(const FlatVector& v);

// Inner product with an f64 accumulator. Dimensions must match.
double dot(const FlatVector& a, const FlatVector& b);

// Squared Euclidean distance, f64 accumulator. Dimensions must match.
double squared_distance(const FlatVector& a, const FlatVector& b);

// View a grid as a single-channel activation volume.
Tensor4 grid_to_tensor(const VoxelGrid& g);

// Boundary check used at ingestion: finite values within [0, 1].
void validate_grid(const VoxelGrid& g);

}  // namespace vcnn
