#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moc/density.hpp"
#include "moc/gradcheck.hpp"
#include "moc/metrics.hpp"
#include "moc/synth.hpp"
#include "moc/taxonomy.hpp"
#include "moc/train.hpp"

namespace moc {

using Log = std::function<void(const std::string&)>;

/// "scene_0007" for index 7.
std::string scene_id(std::size_t index);

// Scene directory layout, one entry per scene id:
//   <id>.rgb.bin, <id>.nir.bin      tensor serialization
//   <id>.annotations.json           annotation schema, fine-grained categories
//   <id>.rgb.png, <id>.nir.png      optional 8-bit previews
//   manifest.json                   config, scene ids and the sorted list of files

struct SynthOptions {
  SceneConfig scene;
  std::size_t count = 10;
  bool png = false;

  static SynthOptions from_json(const nlohmann::ordered_json& j);
};

/// Writes `count` scenes with per-scene seeds mix_seed(scene.seed, i); returns the manifest.
nlohmann::ordered_json cmd_synth(const SynthOptions& opts, const std::filesystem::path& out_dir);

struct DensifyOptions {
  GaussianKernelSpec kernel;
  int out_stride = 4;
  bool conserve = true;
  /// Group fine-grained annotations into the taxonomy's groups before rendering.
  bool group = true;
  std::optional<std::filesystem::path> taxonomy;

  static DensifyOptions from_json(const nlohmann::ordered_json& j);
};

struct DensifyResult {
  nlohmann::ordered_json manifest;
  std::size_t written = 0;
  std::size_t failed = 0;
};

/// Renders every `*.annotations.json` in `data_dir`. A bad file is recorded and skipped.
DensifyResult cmd_densify(const std::filesystem::path& data_dir, const DensifyOptions& opts,
                          const std::filesystem::path& out_dir, const Log& log = {});

/// Reads the scenes listed in `data_dir/manifest.json` with ground truth from `density_dir`.
std::vector<Sample> load_samples(const std::filesystem::path& data_dir,
                                 const std::filesystem::path& density_dir);

/// Trains from cfg.seed, writes `<stem>.bin`, `<stem>.json` and `<stem>.result.json`.
/// The final report is computed on the training scenes.
ExperimentResult cmd_train(const TrainConfig& cfg, const std::filesystem::path& data_dir,
                           const std::filesystem::path& density_dir,
                           const std::filesystem::path& out_stem, const Log& log = {});

struct EvalOptions {
  double weight_eps = 1e-6;
  WeightMode weight_mode = WeightMode::kPaper;
  std::optional<std::filesystem::path> taxonomy;

  static EvalOptions from_json(const nlohmann::ordered_json& j);
};

/// Evaluates a checkpoint, or the ground truth itself when `checkpoint` is empty, and
/// writes `<out_prefix>.json` and `<out_prefix>.csv`.
MetricReport cmd_eval(const std::optional<std::filesystem::path>& checkpoint,
                      const std::filesystem::path& data_dir,
                      const std::filesystem::path& density_dir, const EvalOptions& opts,
                      const std::filesystem::path& out_prefix);

/// Writes `ablation_<axis>.json` and `ablation_<axis>.csv` under `out_dir`.
AblationResult cmd_ablate(AblationAxis axis, const AblationConfig& cfg,
                          const std::filesystem::path& out_dir, const Log& log = {});

/// Optionally writes a JSON report and CSV twin; returns every outcome.
std::vector<GradcheckOutcome> cmd_gradcheck(const std::string& scope,
                                            const std::optional<std::filesystem::path>& out);

nlohmann::ordered_json read_json(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j);

}  // namespace moc
