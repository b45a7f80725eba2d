#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vcnn/voxel.hpp"

namespace vcnn {

enum class Split { Train, Test };

struct ManifestEntry {
  std::string path;
  int label = 0;
  Split split = Split::Train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::vector<std::string> class_names;

  size_t count(Split s) const;
};

// TSV, one entry per line: path <TAB> class_name <TAB> train|test.
// Labels are assigned by sorted class-name order, so they are stable across
// runs and across entry order.
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

// Procedural shape families for the desk-scale corpus.
enum class ShapeFamily {
  SolidCube,
  HollowCube,
  Sphere,
  Cylinder,
  Cone,
  Torus,
  LBracket,
  Table,
  Chair,
  Cross,
};

struct ParamRange {
  float lo = 0.0f;
  float hi = 0.0f;
};

struct ClassRecipe {
  std::string name;
  ShapeFamily family = ShapeFamily::SolidCube;
  ParamRange scale{0.55f, 0.85f};   // overall half-extent, fraction of grid
  ParamRange aspect{0.75f, 1.0f};   // per-axis squash
  ParamRange detail{0.0f, 0.0f};    // family-specific (wall, back, bar, ...)
};

struct SynthSpec {
  std::vector<ClassRecipe> class_recipes;
  int train_per_class = 20;
  int test_per_class = 5;
  int resolution = 30;
  uint64_t seed = 1;
};

// The standard ten-family spec. Includes two designed confusable pairs:
// solid_cube/hollow_cube (differ only internally) and table/chair (differ
// only by the back slab, whose height can be small).
SynthSpec default_synth_spec();

// Class-index pairs that are confusable by construction under a spec built
// from default recipes. Matches by family.
std::vector<std::pair<int, int>> confusable_pairs(const SynthSpec& spec);

struct SyntheticDataset {
  DatasetManifest manifest;
  std::vector<VoxelGrid> grids;  // parallel to manifest.entries, labels set
};

// Deterministic in spec.seed: each sample's randomness is derived from
// (seed, class, split, index), so generation order and thread count do not
// matter. Every emitted grid is binary with occupancy in (0, 0.9).
SyntheticDataset generate_synthetic_dataset(const SynthSpec& spec);

}  // namespace vcnn
