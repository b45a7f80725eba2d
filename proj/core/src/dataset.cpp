#include "vcnn/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "vcnn/errors.hpp"
#include "vcnn/rng.hpp"

namespace vcnn {

size_t DatasetManifest::count(Split s) const {
  size_t n = 0;
  for (const auto& e : entries) {
    if (e.split == s) ++n;
  }
  return n;
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path);

  struct RawEntry {
    std::string path;
    std::string class_name;
    Split split;
  };
  std::vector<RawEntry> raw;
  std::set<std::string> names;
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::array<std::string, 3> field;
    size_t start = 0;
    for (int f = 0; f < 3; ++f) {
      const size_t tab = line.find('\t', start);
      if (f < 2) {
        if (tab == std::string::npos) {
          throw DataError("manifest line " + std::to_string(number) +
                          ": expected 3 tab-separated fields");
        }
        field[f] = line.substr(start, tab - start);
        start = tab + 1;
      } else {
        if (tab != std::string::npos) {
          throw DataError("manifest line " + std::to_string(number) +
                          ": too many fields");
        }
        field[f] = line.substr(start);
      }
    }
    Split split;
    if (field[2] == "train") {
      split = Split::Train;
    } else if (field[2] == "test") {
      split = Split::Test;
    } else {
      throw DataError("manifest line " + std::to_string(number) +
                      ": unknown split '" + field[2] + "' (expected train|test)");
    }
    if (field[0].empty() || field[1].empty()) {
      throw DataError("manifest line " + std::to_string(number) + ": empty field");
    }
    raw.push_back({field[0], field[1], split});
    names.insert(field[1]);
  }
  if (raw.empty()) throw DataError("manifest is empty: " + path);

  DatasetManifest manifest;
  manifest.class_names.assign(names.begin(), names.end());  // sorted by set
  std::map<std::string, int> label_of;
  for (size_t i = 0; i < manifest.class_names.size(); ++i) {
    label_of[manifest.class_names[i]] = static_cast<int>(i);
  }
  manifest.entries.reserve(raw.size());
  for (const auto& e : raw) {
    manifest.entries.push_back({e.path, label_of[e.class_name], e.split});
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + path);
  for (const auto& e : manifest.entries) {
    out << e.path << '\t' << manifest.class_names.at(e.label) << '\t'
        << (e.split == Split::Train ? "train" : "test") << '\n';
  }
  if (!out) throw DataError("short write: " + path);
}

namespace {

struct SampleParams {
  float half_extent[3];  // voxel units, object frame (x, y, z)
  float jitter[3];       // voxel units, world frame
  int yaw_quarters;      // 90-degree steps about the vertical (y) axis
  float detail;
};

SampleParams draw_params(const ClassRecipe& recipe, int resolution, Rng& rng) {
  SampleParams p{};
  const float avail = 0.5f * resolution - 1.0f;
  const float scale = static_cast<float>(rng.uniform(recipe.scale.lo, recipe.scale.hi));
  for (int a = 0; a < 3; ++a) {
    const float aspect =
        static_cast<float>(rng.uniform(recipe.aspect.lo, recipe.aspect.hi));
    p.half_extent[a] = scale * aspect * avail;
  }
  for (int a = 0; a < 3; ++a) {
    const float room = avail - p.half_extent[a];
    p.jitter[a] = static_cast<float>(rng.uniform(-0.8 * room, 0.8 * room));
  }
  p.yaw_quarters = static_cast<int>(rng.uniform_int(4));
  p.detail = static_cast<float>(rng.uniform(recipe.detail.lo, recipe.detail.hi));
  return p;
}

// Object-frame occupancy predicates, |u| <= 1 per axis nominal, y vertical.
bool inside_family(ShapeFamily family, float x, float y, float z, float detail) {
  const float ax = std::abs(x), ay = std::abs(y), az = std::abs(z);
  switch (family) {
    case ShapeFamily::SolidCube:
      return ax <= 1.0f && ay <= 1.0f && az <= 1.0f;
    case ShapeFamily::HollowCube: {
      if (ax > 1.0f || ay > 1.0f || az > 1.0f) return false;
      const float cavity = 1.0f - detail;  // detail = wall fraction
      return ax > cavity || ay > cavity || az > cavity;
    }
    case ShapeFamily::Sphere:
      return x * x + y * y + z * z <= 1.0f;
    case ShapeFamily::Cylinder:
      return ay <= 1.0f && x * x + z * z <= 1.0f;
    case ShapeFamily::Cone: {
      if (ay > 1.0f) return false;
      const float r = 0.5f * (1.0f - y);  // apex up
      return x * x + z * z <= r * r;
    }
    case ShapeFamily::Torus: {
      const float ring = 1.0f - detail;  // detail = tube radius
      const float q = std::sqrt(x * x + z * z) - ring;
      return q * q + y * y <= detail * detail;
    }
    case ShapeFamily::LBracket: {
      if (ax > 1.0f || ay > 1.0f || az > 1.0f) return false;
      return z <= -1.0f + detail || y <= -1.0f + detail;
    }
    case ShapeFamily::Table: {
      if (ax > 1.0f || ay > 1.0f || az > 1.0f) return false;
      const float top = 0.18f;
      if (y >= 1.0f - top) return true;  // top slab
      const float leg = detail;          // detail = leg width fraction
      return ax >= 1.0f - leg && az >= 1.0f - leg;
    }
    case ShapeFamily::Chair: {
      if (ax > 1.0f || az > 1.0f || ay > 1.0f) return false;
      const float seat_y = 0.1f;
      const float seat_t = 0.18f;
      const float back_h = detail;  // detail = back height above the seat
      const float leg = 0.24f;
      if (y <= seat_y && y >= seat_y - seat_t) return true;  // seat slab
      if (y < seat_y - seat_t) {                             // legs
        return ax >= 1.0f - leg && az >= 1.0f - leg;
      }
      // back slab on the +z side, rising above the seat
      return z >= 1.0f - 0.18f && y <= seat_y + back_h;
    }
    case ShapeFamily::Cross: {
      if (ax > 1.0f || ay > 1.0f || az > 1.0f) return false;
      const float b = detail;  // detail = bar half-width
      return (ax <= b && ay <= b) || (ay <= b && az <= b) || (ax <= b && az <= b);
    }
  }
  return false;
}

VoxelGrid render_sample(const ClassRecipe& recipe, int resolution, Rng& rng) {
  const SampleParams p = draw_params(recipe, resolution, rng);
  VoxelGrid grid = VoxelGrid::cube(resolution);
  const float c = 0.5f * resolution;
  for (int d = 0; d < resolution; ++d) {
    for (int h = 0; h < resolution; ++h) {
      for (int w = 0; w < resolution; ++w) {
        // world offsets from the jittered center; x = width, y = height,
        // z = depth, with y the vertical axis
        const float wx = (w + 0.5f) - c - p.jitter[0];
        const float wy = (h + 0.5f) - c - p.jitter[1];
        const float wz = (d + 0.5f) - c - p.jitter[2];
        float ox = wx, oz = wz;
        switch (p.yaw_quarters) {  // inverse yaw about y
          case 1: ox = -wz; oz = wx; break;
          case 2: ox = -wx; oz = -wz; break;
          case 3: ox = wz; oz = -wx; break;
          default: break;
        }
        const float ux = ox / p.half_extent[0];
        const float uy = wy / p.half_extent[1];
        const float uz = oz / p.half_extent[2];
        if (inside_family(recipe.family, ux, uy, uz, p.detail)) {
          grid.at(d, h, w) = 1.0f;
        }
      }
    }
  }
  return grid;
}

}  // namespace

SynthSpec default_synth_spec() {
  SynthSpec spec;
  auto add = [&](const std::string& name, ShapeFamily family, ParamRange detail) {
    ClassRecipe r;
    r.name = name;
    r.family = family;
    r.detail = detail;
    spec.class_recipes.push_back(r);
  };
  add("cube_solid", ShapeFamily::SolidCube, {0.0f, 0.0f});
  add("cube_hollow", ShapeFamily::HollowCube, {0.25f, 0.75f});
  add("sphere", ShapeFamily::Sphere, {0.0f, 0.0f});
  add("cylinder", ShapeFamily::Cylinder, {0.0f, 0.0f});
  add("cone", ShapeFamily::Cone, {0.0f, 0.0f});
  add("torus", ShapeFamily::Torus, {0.18f, 0.3f});
  add("l_bracket", ShapeFamily::LBracket, {0.25f, 0.4f});
  add("table", ShapeFamily::Table, {0.18f, 0.3f});
  add("chair", ShapeFamily::Chair, {0.2f, 0.85f});
  add("cross", ShapeFamily::Cross, {0.2f, 0.35f});
  return spec;
}

std::vector<std::pair<int, int>> confusable_pairs(const SynthSpec& spec) {
  std::vector<std::string> sorted_names;
  for (const auto& r : spec.class_recipes) sorted_names.push_back(r.name);
  std::sort(sorted_names.begin(), sorted_names.end());
  auto label_of_family = [&](ShapeFamily f) -> int {
    for (const auto& r : spec.class_recipes) {
      if (r.family == f) {
        const auto it = std::find(sorted_names.begin(), sorted_names.end(), r.name);
        if (it != sorted_names.end()) {
          return static_cast<int>(it - sorted_names.begin());
        }
      }
    }
    return -1;
  };
  std::vector<std::pair<int, int>> pairs;
  const int sc = label_of_family(ShapeFamily::SolidCube);
  const int hc = label_of_family(ShapeFamily::HollowCube);
  const int ta = label_of_family(ShapeFamily::Table);
  const int ch = label_of_family(ShapeFamily::Chair);
  if (sc >= 0 && hc >= 0) pairs.emplace_back(std::min(sc, hc), std::max(sc, hc));
  if (ta >= 0 && ch >= 0) pairs.emplace_back(std::min(ta, ch), std::max(ta, ch));
  return pairs;
}

SyntheticDataset generate_synthetic_dataset(const SynthSpec& spec) {
  if (spec.resolution < 8) throw DataError("synth: resolution must be >= 8");
  if (spec.train_per_class < 1 || spec.test_per_class < 1) {
    throw DataError("synth: samples per class must be >= 1");
  }
  if (spec.class_recipes.empty()) throw DataError("synth: no class recipes");

  // Labels follow sorted class-name order so that a manifest written to disk
  // and reloaded assigns identical labels.
  std::vector<const ClassRecipe*> by_name;
  for (const auto& r : spec.class_recipes) by_name.push_back(&r);
  std::sort(by_name.begin(), by_name.end(),
            [](const ClassRecipe* a, const ClassRecipe* b) { return a->name < b->name; });
  for (size_t i = 1; i < by_name.size(); ++i) {
    if (by_name[i]->name == by_name[i - 1]->name) {
      throw DataError("synth: duplicate class name '" + by_name[i]->name + "'");
    }
  }

  SyntheticDataset out;
  for (const auto* r : by_name) out.manifest.class_names.push_back(r->name);

  for (size_t label = 0; label < by_name.size(); ++label) {
    const ClassRecipe& recipe = *by_name[label];
    for (int split_id = 0; split_id < 2; ++split_id) {
      const Split split = split_id == 0 ? Split::Train : Split::Test;
      const int n = split_id == 0 ? spec.train_per_class : spec.test_per_class;
      for (int i = 0; i < n; ++i) {
        const uint64_t stream = (static_cast<uint64_t>(label) << 40) ^
                                (static_cast<uint64_t>(split_id) << 32) ^
                                static_cast<uint64_t>(i);
        Rng rng(derive_seed(spec.seed, stream));
        VoxelGrid grid = render_sample(recipe, spec.resolution, rng);
        grid.label = static_cast<int>(label);
        std::ostringstream name;
        name << "grids/" << recipe.name << '_'
             << (split == Split::Train ? "train" : "test") << '_' << i << ".binvox";
        out.manifest.entries.push_back({name.str(), static_cast<int>(label), split});
        out.grids.push_back(std::move(grid));
      }
    }
  }
  return out;
}

}  // namespace vcnn
