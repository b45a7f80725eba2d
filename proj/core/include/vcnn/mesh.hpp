#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "vcnn/voxel.hpp"

namespace vcnn {

// Triangulated mesh. parse_off fan-triangulates larger polygons on input.
struct Mesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<int, 3>> faces;
};

// Reads an OFF mesh. Accepts the counts fused onto the magic line
// ("OFF 8 6 12") as well as the separate-line form; '#' comments and blank
// lines are skipped. Throws DataError with the offending line number on
// missing magic, count mismatches, out-of-range indices or bad tokens.
Mesh parse_off(std::istream& in);
Mesh parse_off_text(const std::string& text);
Mesh load_off(const std::string& path);

struct VoxelizeOptions {
  bool solid = true;
  int pad = 1;  // empty voxel margin on each side of the longest axis
};

// Scales and centers the mesh so its longest axis spans
// resolution - 2*pad voxels, marks every voxel intersected by a triangle
// (supersampled coverage, at least a 4x4 sample lattice per triangle), and,
// when solid, flood-fills from the grid boundary and fills the enclosed
// remainder. Output values are binary {0, 1}.
VoxelGrid voxelize_mesh(const Mesh& mesh, int resolution,
                        const VoxelizeOptions& opt = {});

}  // namespace vcnn
