#include "vcnn/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "vcnn/binvox.hpp"
#include "vcnn/checkpoint.hpp"
#include "vcnn/errors.hpp"
#include "vcnn/mesh.hpp"
#include "vcnn/rng.hpp"
#include "vcnn/serial.hpp"

namespace fs = std::filesystem;

namespace vcnn {

Stage parse_stage(const std::string& name) {
  if (name == "synth") return Stage::Synth;
  if (name == "voxelize") return Stage::Voxelize;
  if (name == "design") return Stage::Design;
  if (name == "train") return Stage::Train;
  if (name == "analyze") return Stage::Analyze;
  if (name == "refine") return Stage::Refine;
  if (name == "eval") return Stage::Eval;
  if (name == "report") return Stage::Report;
  throw ConfigError("unknown stage '" + name +
                    "' (expected synth|voxelize|design|train|analyze|refine|eval|report)");
}

std::string stage_name(Stage stage) {
  switch (stage) {
    case Stage::Synth: return "synth";
    case Stage::Voxelize: return "voxelize";
    case Stage::Design: return "design";
    case Stage::Train: return "train";
    case Stage::Analyze: return "analyze";
    case Stage::Refine: return "refine";
    case Stage::Eval: return "eval";
    case Stage::Report: return "report";
  }
  return "?";
}

PipelineConfig load_pipeline_config(const PipelineOptions& options) {
  PipelineConfig cfg;
  cfg.raw = options.config_path.empty() ? ConfigMap()
                                        : ConfigMap::parse_file(options.config_path);
  const ConfigMap& raw = cfg.raw;

  cfg.dataset_source = raw.get_string("dataset.source", "synth");
  if (cfg.dataset_source != "synth" && cfg.dataset_source != "manifest") {
    throw ConfigError("dataset.source must be synth or manifest");
  }
  cfg.manifest_path = raw.get_string("dataset.manifest", "");
  cfg.resolution = static_cast<int>(raw.get_int("dataset.resolution", 30));
  cfg.train_per_class = static_cast<int>(raw.get_int("dataset.train_per_class", 20));
  cfg.test_per_class = static_cast<int>(raw.get_int("dataset.test_per_class", 5));
  cfg.voxelize_solid = raw.get_flag("dataset.solid", true);
  cfg.voxelize_pad = static_cast<int>(raw.get_int("dataset.pad", 1));

  cfg.design.conv_layers = static_cast<int>(raw.get_int("design.conv_layers", 2));
  cfg.design.conv_edges = raw.get_int_list("design.edges", {3, 5, 7});
  cfg.design.conv_k_grid =
      raw.get_int_list("design.k_grid", {32, 64, 128, 256, 512, 768, 1024});
  cfg.design.fc_k_grid = raw.get_int_list("design.fc_grid", {128, 256, 512, 1024, 2048});
  cfg.design.screening.epsilon = raw.get_real("design.epsilon", 1e-4);
  cfg.design.screening.top_percent = raw.get_real("design.top_percent", 20.0);
  cfg.design.screening.max_samples =
      static_cast<size_t>(raw.get_int("design.max_samples", 100000));
  cfg.design.design_sample_count =
      static_cast<size_t>(raw.get_int("design.design_samples", 0));

  cfg.train.learning_rate = raw.get_real("train.learning_rate", 0.01);
  cfg.train.momentum = raw.get_real("train.momentum", 0.9);
  cfg.train.batch_size = static_cast<int>(raw.get_int("train.batch_size", 32));
  cfg.train.epochs = static_cast<int>(raw.get_int("train.epochs", 40));
  cfg.train.lr_decay = raw.get_real("train.lr_decay", 0.5);
  cfg.train.lr_decay_interval = static_cast<int>(raw.get_int("train.lr_decay_interval", 10));
  cfg.train.weight_decay = raw.get_real("train.weight_decay", 1e-4);

  const std::string k = raw.get_string("confusion.k", "auto");
  if (k == "auto") {
    cfg.confusion_k = std::nullopt;
  } else {
    try {
      cfg.confusion_k = std::stoi(k);
    } catch (const std::exception&) {
      throw ConfigError("confusion.k must be 'auto' or an integer");
    }
  }
  const std::string split = raw.get_string("confusion.split", "train");
  if (split == "train") {
    cfg.confusion_split = Split::Train;
  } else if (split == "test") {
    cfg.confusion_split = Split::Test;
  } else {
    throw ConfigError("confusion.split must be train or test");
  }

  cfg.zeta_factor = raw.get_real("refine.zeta_factor", 0.1);
  cfg.eta = static_cast<uint64_t>(raw.get_int("refine.eta", 8));
  cfg.forest.tree_count = static_cast<int>(raw.get_int("refine.trees", 200));
  cfg.forest.max_depth = static_cast<int>(raw.get_int("refine.max_depth", 0));
  cfg.forest.features_per_split =
      static_cast<int>(raw.get_int("refine.features_per_split", 0));
  const std::string routing = raw.get_string("refine.routing", "descend");
  if (routing == "descend") {
    cfg.routing = RoutingRule::TreeDescent;
  } else if (routing == "leaf") {
    cfg.routing = RoutingRule::NearestLeaf;
  } else {
    throw ConfigError("refine.routing must be descend or leaf");
  }

  cfg.out_dir = raw.get_string("run.out", "out");
  cfg.seed = static_cast<uint64_t>(raw.get_int("run.seed", 1));
  cfg.threads = static_cast<int>(raw.get_int("run.threads", 1));
  cfg.refine_enabled = raw.get_flag("run.refine", true);

  const auto unread = cfg.raw.unread_keys();
  if (!unread.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& u : unread) msg += " " + u;
    throw ConfigError(msg);
  }

  if (options.out_dir) cfg.out_dir = *options.out_dir;
  if (options.seed) cfg.seed = *options.seed;
  if (options.threads) cfg.threads = *options.threads;
  if (options.refine_enabled) cfg.refine_enabled = *options.refine_enabled;
  if (cfg.threads < 1) throw ConfigError("run.threads must be >= 1");
  return cfg;
}

std::string config_documentation() {
  return
      "[dataset]\n"
      "  source = synth            synth | manifest\n"
      "  manifest =                TSV (path<TAB>class<TAB>train|test), manifest source only\n"
      "  resolution = 30           voxel grid edge\n"
      "  train_per_class = 20      synthetic samples per class (train)\n"
      "  test_per_class = 5        synthetic samples per class (test)\n"
      "  solid = on                voxelize: flood-fill interiors\n"
      "  pad = 1                   voxelize: empty margin in voxels\n"
      "[design]\n"
      "  conv_layers = 2\n"
      "  edges = 3,5,7             candidate conv filter edges\n"
      "  k_grid = 32,64,128,256,512,768,1024\n"
      "  fc_grid = 128,256,512,1024,2048\n"
      "  epsilon = 1e-4            screening variance floor\n"
      "  top_percent = 20          keep top T% by variance\n"
      "  max_samples = 100000      cap after screening\n"
      "  design_samples = 0        grids used for design (0 = all train)\n"
      "[train]\n"
      "  learning_rate = 0.01\n"
      "  momentum = 0.9\n"
      "  batch_size = 32\n"
      "  epochs = 40\n"
      "  lr_decay = 0.5\n"
      "  lr_decay_interval = 10\n"
      "  weight_decay = 1e-4\n"
      "[confusion]\n"
      "  k = auto                  auto (eigengap) or a fixed set count\n"
      "  split = train             scores computed on this split\n"
      "[refine]\n"
      "  zeta_factor = 0.1         zeta = factor x global feature variance\n"
      "  eta = 8                   minimum node size to keep splitting\n"
      "  trees = 200\n"
      "  max_depth = 0             0 = unlimited\n"
      "  features_per_split = 0    0 = sqrt(dim)\n"
      "  routing = descend         descend | leaf\n"
      "[run]\n"
      "  out = out\n"
      "  seed = 1\n"
      "  threads = 1\n"
      "  refine = on               evaluate with refinement\n";
}

namespace {

constexpr uint64_t kStageSeedOffset[] = {1, 2, 3, 4, 5, 6, 7, 8};

uint64_t stage_seed(const PipelineConfig& cfg, Stage stage) {
  return derive_seed(cfg.seed, kStageSeedOffset[static_cast<int>(stage)]);
}

uint64_t fnv1a(const std::string& s, uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Exclusive ownership of the output directory for the duration of a stage.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / ".lock") {
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) {
      throw ConfigError("output directory is locked (" + path_.string() +
                        " exists; delete it if the previous run died)");
    }
    std::fclose(f);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("short write: " + path.string());
}

fs::path stamp_path(const fs::path& out, Stage stage) {
  return out / ".stamps" / (stage_name(stage) + ".stamp");
}

std::string read_stamp(const fs::path& out, Stage stage) {
  return read_text_file(stamp_path(out, stage));
}

void write_stamp(const fs::path& out, Stage stage, const std::string& hash) {
  fs::create_directories(out / ".stamps");
  write_text_file(stamp_path(out, stage), hash);
}

// Hash of the stage's config slice, the resolved seed and the input stamps.
std::string stage_hash(const PipelineConfig& cfg, Stage stage,
                       const std::vector<std::string>& prefixes,
                       const std::vector<Stage>& inputs, const fs::path& out,
                       const std::string& extra = {}) {
  std::string blob = stage_name(stage) + "\nseed=" + std::to_string(cfg.seed) + "\n";
  std::istringstream canon(cfg.raw.canonical());
  std::string line;
  while (std::getline(canon, line)) {
    for (const auto& p : prefixes) {
      if (line.rfind(p, 0) == 0) {
        blob += line + "\n";
        break;
      }
    }
  }
  for (Stage in : inputs) {
    blob += stage_name(in) + ":" + read_stamp(out, in) + "\n";
  }
  blob += extra;
  return hex64(fnv1a(blob));
}

bool outputs_exist(const fs::path& out, const std::vector<std::string>& names) {
  for (const auto& n : names) {
    if (!fs::exists(out / n)) return false;
  }
  return true;
}

// The stage that must have produced the dataset artifacts.
Stage dataset_stage(const PipelineConfig& cfg) {
  return cfg.dataset_source == "synth" ? Stage::Synth : Stage::Voxelize;
}

void require_stage(const fs::path& out, Stage needed) {
  if (read_stamp(out, needed).empty()) {
    throw DataError("missing prerequisite artifacts; run the '" + stage_name(needed) +
                    "' stage first");
  }
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

// ---------------------------------------------------------------- dataset

void run_synth(const PipelineConfig& cfg, const fs::path& out) {
  if (cfg.dataset_source != "synth") {
    throw ConfigError("stage synth requires dataset.source = synth");
  }
  const std::string hash =
      stage_hash(cfg, Stage::Synth, {"dataset."}, {}, out,
                 std::to_string(cfg.resolution) + "/" + std::to_string(cfg.train_per_class) +
                     "/" + std::to_string(cfg.test_per_class));
  if (read_stamp(out, Stage::Synth) == hash && outputs_exist(out, {"manifest.tsv"})) return;

  SynthSpec spec = default_synth_spec();
  spec.resolution = cfg.resolution;
  spec.train_per_class = cfg.train_per_class;
  spec.test_per_class = cfg.test_per_class;
  spec.seed = stage_seed(cfg, Stage::Synth);
  const SyntheticDataset dataset = generate_synthetic_dataset(spec);

  fs::create_directories(out / "grids");
  for (size_t i = 0; i < dataset.grids.size(); ++i) {
    save_binvox(dataset.grids[i], (out / dataset.manifest.entries[i].path).string());
  }
  save_manifest(dataset.manifest, (out / "manifest.tsv").string());
  write_stamp(out, Stage::Synth, hash);
}

void run_voxelize(const PipelineConfig& cfg, const fs::path& out) {
  if (cfg.dataset_source != "manifest") {
    throw ConfigError("stage voxelize requires dataset.source = manifest");
  }
  if (cfg.manifest_path.empty()) throw ConfigError("dataset.manifest is not set");
  const std::string hash = stage_hash(cfg, Stage::Voxelize, {"dataset."}, {}, out);
  if (read_stamp(out, Stage::Voxelize) == hash && outputs_exist(out, {"manifest.tsv"})) return;

  const DatasetManifest source = load_manifest(cfg.manifest_path);
  const fs::path base = fs::path(cfg.manifest_path).parent_path();
  DatasetManifest local = source;
  fs::create_directories(out / "grids");
  for (size_t i = 0; i < source.entries.size(); ++i) {
    const auto& entry = source.entries[i];
    fs::path src = entry.path;
    if (src.is_relative()) src = base / src;
    VoxelGrid grid;
    if (src.extension() == ".binvox") {
      grid = load_binvox(src.string());
    } else if (src.extension() == ".off") {
      VoxelizeOptions opt;
      opt.solid = cfg.voxelize_solid;
      opt.pad = cfg.voxelize_pad;
      try {
        grid = voxelize_mesh(load_off(src.string()), cfg.resolution, opt);
      } catch (const DataError& e) {
        throw DataError("manifest entry '" + entry.path + "': " + e.what());
      }
    } else {
      throw DataError("manifest entry '" + entry.path + "': unsupported extension");
    }
    validate_grid(grid);
    std::ostringstream name;
    name << "grids/" << std::setw(6) << std::setfill('0') << i << ".binvox";
    save_binvox(grid, (out / name.str()).string());
    local.entries[i].path = name.str();
  }
  save_manifest(local, (out / "manifest.tsv").string());
  write_stamp(out, Stage::Voxelize, hash);
}

// ------------------------------------------------------------------ design

constexpr char kDesignFile[] = "design.bin";

void save_design(const DesignResult& design, const fs::path& path) {
  std::ofstream outf(path, std::ios::binary | std::ios::trunc);
  if (!outf) throw DataError("cannot write " + path.string());
  ByteWriter w(outf);
  w.magic("VCND");
  w.u32(1);
  w.u32(static_cast<uint32_t>(design.conv_choices.size()));
  w.u32(static_cast<uint32_t>(design.fc_k));
  for (size_t l = 0; l < design.conv_choices.size(); ++l) {
    w.u32(static_cast<uint32_t>(design.conv_choices[l].first));
    w.u32(static_cast<uint32_t>(design.conv_choices[l].second));
    const auto& centroids = design.conv_centroids[l];
    w.u64(centroids.empty() ? 0 : centroids[0].size());
    for (const auto& c : centroids) w.f32_array(c);
  }
}

DesignResult load_design(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  ByteReader r(in, "design artifact");
  r.expect_magic("VCND");
  if (r.u32() != 1) throw DataError("design artifact: unsupported version");
  DesignResult design;
  const uint32_t layers = r.u32();
  design.fc_k = static_cast<int>(r.u32());
  for (uint32_t l = 0; l < layers; ++l) {
    const int edge = static_cast<int>(r.u32());
    const int k = static_cast<int>(r.u32());
    design.conv_choices.emplace_back(edge, k);
    const uint64_t dim = r.u64();
    std::vector<FlatVector> centroids;
    centroids.reserve(k);
    for (int i = 0; i < k; ++i) centroids.push_back(r.f32_array(dim));
    design.conv_centroids.push_back(std::move(centroids));
  }
  return design;
}

void save_bic_curves_csv(const DesignResult& design, const fs::path& path) {
  std::ostringstream csv;
  csv << "layer,edge,k,score,is_valley,at_boundary\n";
  for (size_t i = 0; i < design.curves.size(); ++i) {
    const BicCurve& curve = design.curves[i];
    for (const auto& [k, score] : curve.points) {
      const bool valley = curve.valley_k && *curve.valley_k == k;
      char buf[64];
      std::snprintf(buf, sizeof(buf), "%.9g", score);
      csv << design.curve_layers[i] << ',' << curve.patch_edge << ',' << k << ',' << buf
          << ',' << (valley ? 1 : 0) << ',' << (valley && curve.valley_at_boundary ? 1 : 0)
          << '\n';
    }
  }
  write_text_file(path, csv.str());
}

std::vector<const VoxelGrid*> split_grids(const LoadedDataset& data, Split split,
                                          std::vector<int>* labels) {
  std::vector<const VoxelGrid*> out;
  for (size_t i = 0; i < data.manifest.entries.size(); ++i) {
    if (data.manifest.entries[i].split == split) {
      out.push_back(&data.grids[i]);
      if (labels) labels->push_back(data.manifest.entries[i].label);
    }
  }
  return out;
}

void run_design(const PipelineConfig& cfg, const fs::path& out) {
  require_stage(out, dataset_stage(cfg));
  const std::string hash =
      stage_hash(cfg, Stage::Design, {"design."}, {dataset_stage(cfg)}, out);
  if (read_stamp(out, Stage::Design) == hash &&
      outputs_exist(out, {kDesignFile, "bic_curves.csv", "design_report.txt"})) {
    return;
  }

  const LoadedDataset data = load_dataset_artifacts(out.string());
  const auto train = split_grids(data, Split::Train, nullptr);
  if (train.empty()) throw DataError("design: train split is empty");

  DesignConfig dcfg = cfg.design;
  dcfg.seed = stage_seed(cfg, Stage::Design);
  dcfg.threads = cfg.threads;
  const DesignResult design = design_network(train, dcfg);

  save_design(design, out / kDesignFile);
  save_bic_curves_csv(design, out / "bic_curves.csv");

  std::ostringstream report;
  report << "network design\n";
  for (size_t l = 0; l < design.conv_choices.size(); ++l) {
    report << "  conv" << (l + 1) << ": edge " << design.conv_choices[l].first
           << ", filters " << design.conv_choices[l].second << "\n";
  }
  report << "  fc: width " << design.fc_k << "\n";
  report << "screening: epsilon " << dcfg.screening.epsilon << ", top "
         << dcfg.screening.top_percent << "%, cap " << dcfg.screening.max_samples << "\n";
  report << "curves: see bic_curves.csv\n";
  write_text_file(out / "design_report.txt", report.str());
  write_stamp(out, Stage::Design, hash);
}

// ------------------------------------------------------------------- train

void run_train(const PipelineConfig& cfg, const fs::path& out) {
  require_stage(out, dataset_stage(cfg));
  require_stage(out, Stage::Design);
  const std::string hash =
      stage_hash(cfg, Stage::Train, {"train."}, {dataset_stage(cfg), Stage::Design}, out,
                 "threads=" + std::to_string(cfg.threads));
  if (read_stamp(out, Stage::Train) == hash &&
      outputs_exist(out, {"checkpoint.vcnn", "train_log.txt"})) {
    return;
  }

  const LoadedDataset data = load_dataset_artifacts(out.string());
  std::vector<int> labels;
  const auto train_grids = split_grids(data, Split::Train, &labels);
  if (train_grids.empty()) throw DataError("train: train split is empty");

  const DesignResult design = load_design(out / kDesignFile);
  const NetworkSpec spec = spec_from_design(
      design, cfg.resolution, static_cast<int>(data.manifest.class_names.size()));

  TrainConfig tcfg = cfg.train;
  tcfg.seed = stage_seed(cfg, Stage::Train);
  tcfg.threads = cfg.threads;
  const NetworkWeights init = init_weights(spec, tcfg.seed, design.conv_centroids);
  const TrainResult result = train(spec, init, train_grids, labels, tcfg);

  save_checkpoint(spec, result.weights, (out / "checkpoint.vcnn").string());
  std::ostringstream log;
  log << "epoch,mean_loss\n";
  for (size_t e = 0; e < result.epoch_loss.size(); ++e) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", result.epoch_loss[e]);
    log << e << ',' << buf << '\n';
  }
  write_text_file(out / "train_log.txt", log.str());
  write_stamp(out, Stage::Train, hash);
}

// ----------------------------------------------------------------- analyze

void run_analyze(const PipelineConfig& cfg, const fs::path& out) {
  require_stage(out, Stage::Train);
  const std::string hash =
      stage_hash(cfg, Stage::Analyze, {"confusion."}, {Stage::Train}, out);
  if (read_stamp(out, Stage::Analyze) == hash &&
      outputs_exist(out, {"cf_matrix.csv", "partition.txt"})) {
    return;
  }

  const LoadedDataset data = load_dataset_artifacts(out.string());
  std::vector<int> labels;
  const auto grids = split_grids(data, cfg.confusion_split, &labels);
  const auto [spec, weights] = load_checkpoint((out / "checkpoint.vcnn").string());

  const ConfusionAnalysis analysis =
      identify_confusion_sets(spec, weights, grids, labels, cfg.confusion_k,
                              stage_seed(cfg, Stage::Analyze), cfg.threads);

  save_cf_csv(analysis.cf, data.manifest.class_names, (out / "cf_matrix.csv").string());
  save_partition_text(analysis.partition, data.manifest.class_names,
                      (out / "partition.txt").string());

  // inspection-only diagnostic
  const SavMatrix savs = extract_savs(spec, weights);
  const auto features = extract_features(spec, weights, grids, cfg.threads);
  const SavDiagnostics diag = sav_diagnostics(savs, features, labels);
  std::ostringstream txt;
  txt << "pairwise sav angles (radians)\n";
  const int c = savs.class_count;
  for (int i = 0; i < c; ++i) {
    txt << data.manifest.class_names[i];
    for (int j = 0; j < c; ++j) {
      txt << '\t' << format_real(diag.pairwise_angle[static_cast<size_t>(i) * c + j]);
    }
    txt << '\n';
  }
  txt << "per-class feature variance\n";
  for (int i = 0; i < c; ++i) {
    txt << data.manifest.class_names[i] << '\t' << format_real(diag.class_variance[i])
        << '\n';
  }
  write_text_file(out / "sav_diagnostics.txt", txt.str());
  write_stamp(out, Stage::Analyze, hash);
}

// ------------------------------------------------------------------ refine

void run_refine(const PipelineConfig& cfg, const fs::path& out) {
  require_stage(out, Stage::Analyze);
  const std::string hash =
      stage_hash(cfg, Stage::Refine, {"refine."}, {Stage::Analyze}, out);
  if (read_stamp(out, Stage::Refine) == hash && outputs_exist(out, {"refine.vcnr"})) {
    return;
  }

  const LoadedDataset data = load_dataset_artifacts(out.string());
  std::vector<int> labels;
  const auto grids = split_grids(data, Split::Train, &labels);
  const auto [spec, weights] = load_checkpoint((out / "checkpoint.vcnn").string());
  const ConfusionSetPartition partition =
      load_partition_text((out / "partition.txt").string(), data.manifest.class_names);

  const auto features = extract_features(spec, weights, grids, cfg.threads);
  double global_var = default_zeta(features) / 0.1;  // mean squared distance to centroid
  double zeta = cfg.zeta_factor * global_var;
  if (zeta <= 0.0) zeta = 1e-12;

  RandomForestConfig fcfg = cfg.forest;
  fcfg.seed = stage_seed(cfg, Stage::Refine);
  RefineModel model = build_refine_model(partition, features, labels, zeta, cfg.eta,
                                         fcfg, stage_seed(cfg, Stage::Refine));
  model.routing = cfg.routing;
  save_refine_model(model, (out / "refine.vcnr").string());
  write_stamp(out, Stage::Refine, hash);
}

// -------------------------------------------------------------------- eval

void run_eval(const PipelineConfig& cfg, const fs::path& out) {
  require_stage(out, Stage::Train);
  if (cfg.refine_enabled) require_stage(out, Stage::Refine);
  std::vector<Stage> inputs = {Stage::Train};
  if (cfg.refine_enabled) inputs.push_back(Stage::Refine);
  const std::string hash =
      stage_hash(cfg, Stage::Eval, {"run.refine"}, inputs, out,
                 cfg.refine_enabled ? "refine" : "baseline");
  if (read_stamp(out, Stage::Eval) == hash &&
      outputs_exist(out, {"metrics.txt", "predictions.csv"})) {
    return;
  }

  const LoadedDataset data = load_dataset_artifacts(out.string());
  std::vector<int> labels;
  std::vector<std::string> paths;
  std::vector<const VoxelGrid*> grids;
  for (size_t i = 0; i < data.manifest.entries.size(); ++i) {
    if (data.manifest.entries[i].split == Split::Test) {
      grids.push_back(&data.grids[i]);
      labels.push_back(data.manifest.entries[i].label);
      paths.push_back(data.manifest.entries[i].path);
    }
  }
  if (grids.empty()) throw DataError("eval: test split is empty");

  const auto [spec, weights] = load_checkpoint((out / "checkpoint.vcnn").string());
  const auto probs = predict_probs(spec, weights, grids, cfg.threads);

  std::vector<int> baseline(grids.size());
  for (size_t i = 0; i < probs.size(); ++i) {
    int best = 0;
    for (int c = 1; c < spec.class_count; ++c) {
      if (probs[i][c] > probs[i][best]) best = c;
    }
    baseline[i] = best;
  }

  std::vector<PredictionRow> rows(grids.size());
  std::vector<int> refined = baseline;
  if (cfg.refine_enabled) {
    const RefineModel model = load_refine_model((out / "refine.vcnr").string());
    const auto features = extract_features(spec, weights, grids, cfg.threads);
    for (size_t i = 0; i < grids.size(); ++i) {
      const int s = model.partition.set_of(baseline[i]);
      if (s < 0 || !model.partition.sets[s].mixed) {
        rows[i].leaf = "pure_set";
        refined[i] = baseline[i];
        continue;
      }
      const SubsetNode* leaf = assign_subset(model, baseline[i], features[i]);
      rows[i].leaf = leaf->pure ? "pure_leaf" : "mixed_leaf";
      refined[i] = leaf->pure
                       ? leaf->class_label
                       : forest_predict(model.forests[leaf->forest_index], features[i]);
    }
  } else {
    for (auto& row : rows) row.leaf = "none";
  }
  for (size_t i = 0; i < rows.size(); ++i) {
    rows[i].path = paths[i];
    rows[i].label = labels[i];
    rows[i].baseline = baseline[i];
    rows[i].refined = refined[i];
  }
  save_predictions_csv(rows, (out / "predictions.csv").string());

  const int class_count = static_cast<int>(data.manifest.class_names.size());
  const MetricsReport base = compute_metrics(baseline, labels, class_count);
  std::ostringstream txt;
  txt << "config_hash = " << hash << "\n";
  txt << "seed = " << cfg.seed << "\n";
  txt << "[baseline]\n";
  txt << "aca = " << format_real(base.aca) << "\n";
  txt << "aia = " << format_real(base.aia) << "\n";
  for (int c = 0; c < class_count; ++c) {
    txt << "class." << data.manifest.class_names[c] << " = "
        << format_real(base.per_class_accuracy[c]) << "\n";
  }
  if (cfg.refine_enabled) {
    const MetricsReport ref = compute_metrics(refined, labels, class_count);
    txt << "[refined]\n";
    txt << "aca = " << format_real(ref.aca) << "\n";
    txt << "aia = " << format_real(ref.aia) << "\n";
    for (int c = 0; c < class_count; ++c) {
      txt << "class." << data.manifest.class_names[c] << " = "
          << format_real(ref.per_class_accuracy[c]) << "\n";
    }
  }
  write_text_file(out / "metrics.txt", txt.str());
  write_stamp(out, Stage::Eval, hash);
}

}  // namespace

LoadedDataset load_dataset_artifacts(const std::string& out_dir) {
  const fs::path out(out_dir);
  LoadedDataset data;
  data.manifest = load_manifest((out / "manifest.tsv").string());
  data.grids.reserve(data.manifest.entries.size());
  for (const auto& entry : data.manifest.entries) {
    VoxelGrid grid = load_binvox((out / entry.path).string());
    grid.label = entry.label;
    data.grids.push_back(std::move(grid));
  }
  return data;
}

void run_stage(Stage stage, const PipelineConfig& cfg) {
  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  DirLock lock(out);
  switch (stage) {
    case Stage::Synth: run_synth(cfg, out); break;
    case Stage::Voxelize: run_voxelize(cfg, out); break;
    case Stage::Design: run_design(cfg, out); break;
    case Stage::Train: run_train(cfg, out); break;
    case Stage::Analyze: run_analyze(cfg, out); break;
    case Stage::Refine: run_refine(cfg, out); break;
    case Stage::Eval: run_eval(cfg, out); break;
    case Stage::Report: emit_report(cfg); break;
  }
}

}  // namespace vcnn
