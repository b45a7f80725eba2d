#pragma once

#include <optional>
#include <string>

#include "vcnn/config.hpp"
#include "vcnn/confusion.hpp"
#include "vcnn/dataset.hpp"
#include "vcnn/design.hpp"
#include "vcnn/metrics.hpp"
#include "vcnn/network.hpp"
#include "vcnn/refine.hpp"

namespace vcnn {

enum class Stage { Synth, Voxelize, Design, Train, Analyze, Refine, Eval, Report };

Stage parse_stage(const std::string& name);
std::string stage_name(Stage stage);

// CLI-level overrides applied on top of the config file.
struct PipelineOptions {
  std::string config_path;  // empty = all defaults
  std::optional<std::string> out_dir;
  std::optional<uint64_t> seed;
  std::optional<int> threads;
  std::optional<bool> refine_enabled;
};

struct PipelineConfig {
  // [dataset]
  std::string dataset_source = "synth";  // synth | manifest
  std::string manifest_path;             // external data (voxelize stage)
  int resolution = 30;
  int train_per_class = 20;
  int test_per_class = 5;
  bool voxelize_solid = true;
  int voxelize_pad = 1;
  // [design]
  DesignConfig design;
  // [train]
  TrainConfig train;
  // [confusion]
  std::optional<int> confusion_k;  // nullopt = auto (eigengap)
  Split confusion_split = Split::Train;
  // [refine]
  double zeta_factor = 0.1;   // zeta = factor x global feature variance
  uint64_t eta = 8;
  RandomForestConfig forest;
  RoutingRule routing = RoutingRule::TreeDescent;
  // [run]
  std::string out_dir = "out";
  uint64_t seed = 1;
  int threads = 1;
  bool refine_enabled = true;

  ConfigMap raw;  // echo + stage hashing
};

// Parses the config file, applies overrides, and rejects unknown keys.
PipelineConfig load_pipeline_config(const PipelineOptions& options);

// Key-by-key reference of every config option and its default (--help body).
std::string config_documentation();

// Executes one stage against the output directory. Artifacts are
// content-addressed by a hash of the stage's config slice, the seed and its
// input stamps; re-running an unchanged stage is a no-op. Missing
// prerequisites raise DataError naming the stage to run first.
void run_stage(Stage stage, const PipelineConfig& config);

// Consolidated human-readable summary plus plot-ready CSVs.
void emit_report(const PipelineConfig& config);

// --- artifact helpers shared by stages, the report and the tests ---

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<VoxelGrid> grids;  // parallel to manifest.entries
};
LoadedDataset load_dataset_artifacts(const std::string& out_dir);

void save_cf_csv(const CFMatrix& cf, const std::vector<std::string>& class_names,
                 const std::string& path);
void save_partition_text(const ConfusionSetPartition& partition,
                         const std::vector<std::string>& class_names,
                         const std::string& path);
ConfusionSetPartition load_partition_text(const std::string& path,
                                          const std::vector<std::string>& class_names);

struct PredictionRow {
  std::string path;
  int label = 0;
  int baseline = 0;
  int refined = 0;
  std::string leaf;  // none | pure_set | pure_leaf | mixed_leaf
};
void save_predictions_csv(const std::vector<PredictionRow>& rows, const std::string& path);
std::vector<PredictionRow> load_predictions_csv(const std::string& path);

}  // namespace vcnn
