#pragma once

#include <string>
#include <vector>

#include "vcnn/voxel.hpp"

namespace vcnn {

// binvox v1 container: "#binvox 1", dim / translate / scale lines, a "data"
// marker, then (value, count) RLE byte pairs covering exactly dim^3 voxels.
// Voxels are laid out in the grid's linear order (depth, height, width).
// write_binvox and read_binvox are exact inverses on valid binary grids.
VoxelGrid read_binvox(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> write_binvox(const VoxelGrid& grid);

VoxelGrid load_binvox(const std::string& path);
void save_binvox(const VoxelGrid& grid, const std::string& path);

}  // namespace vcnn
