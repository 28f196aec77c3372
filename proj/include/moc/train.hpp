#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "moc/density.hpp"
#include "moc/losses.hpp"
#include "moc/metrics.hpp"
#include "moc/model.hpp"
#include "moc/synth.hpp"
#include "moc/taxonomy.hpp"

namespace moc {

struct TrainConfig {
  std::size_t epochs = 30;
  double learning_rate = 1e-5;
  double lr_decay_per_epoch = 0.995;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double weight_decay = 1e-2;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  /// Augmentations applied per scene; "flip" is the only one implemented.
  std::vector<std::string> augment{"flip"};
  int out_stride = 4;
  LossConfig loss;
  ModelConfig model;
  GaussianKernelSpec kernel;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::ordered_json& j);
};

/// One training or evaluation scene with its grouped ground truth.
struct Sample {
  std::string id;
  Tensor rgb;
  Tensor nir;
  GroundTruth gt;
};

/// Synthesizes `count` scenes with seeds derived from `scenes.seed`, groups them with the
/// taxonomy and renders ground truth at `out_stride`.
std::vector<Sample> synthetic_dataset(const SceneConfig& scenes, std::size_t count,
                                      const CategoryTaxonomy& taxonomy,
                                      const GaussianKernelSpec& kernel, int out_stride,
                                      const std::string& id_prefix = "scene");

/// Adaptive moment estimation with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, double beta1, double beta2, double epsilon,
        double weight_decay);

  /// Applies one update from the accumulated gradients, divided by `grad_scale`.
  void step(double learning_rate, double grad_scale = 1.0);
  std::uint64_t steps() const { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, epsilon_, weight_decay_;
  std::uint64_t t_ = 0;
};

struct EpochLosses {
  double counting = 0.0;
  double spatial = 0.0;
  double total = 0.0;
};

struct Evaluation {
  CountTable counts;
  MetricReport report;
  double mean_offdiagonal_similarity = 0.0;
};

struct ExperimentResult {
  std::uint64_t seed = 0;
  std::vector<EpochLosses> epochs;
  Evaluation evaluation;
  double wall_clock_seconds = 0.0;

  /// Wall-clock time is left out unless requested so that files stay reproducible.
  nlohmann::ordered_json to_json(bool include_timing = false) const;
};

/// Called after every epoch with the epoch index and its mean losses.
using EpochCallback = std::function<void(std::size_t, const EpochLosses&)>;

/// Trains `model` in place. Throws NumericalError when a loss becomes non-finite.
std::vector<EpochLosses> train(MccModel& model, const std::vector<Sample>& data,
                               const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Forward pass on every sample; counts come from masked density sums.
Evaluation evaluate(const MccModel& model, const std::vector<Sample>& data,
                    const std::vector<std::string>& categories, double weight_eps = 1e-6,
                    WeightMode mode = WeightMode::kPaper);

/// Initializes a model from cfg.seed, trains it and evaluates on `test`.
ExperimentResult run_experiment(const TrainConfig& cfg, const std::vector<Sample>& train_set,
                                const std::vector<Sample>& test_set,
                                const std::vector<std::string>& categories,
                                MccModel* trained = nullptr);

// ---------------------------------------------------------------------------

enum class AblationAxis { kGamma, kNirAttention };

struct AblationConfig {
  TrainConfig train;
  SceneConfig scenes;
  std::size_t train_scenes = 16;
  std::size_t test_scenes = 8;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<double> gammas{0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  /// Groups whose MAE is tracked per cell.
  std::vector<std::string> focus_categories;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static AblationConfig from_json(const nlohmann::ordered_json& j);
};

struct AblationCell {
  std::string label;
  double gamma = 0.0;
  bool use_nir = true;
  bool use_dual_attention = true;
  std::vector<double> mse_bar, wmse, similarity;  // one entry per seed
  std::vector<std::vector<double>> focus_mae;     // [focus category][seed]

  static double mean(const std::vector<double>& v);
};

struct SignTest {
  std::size_t wins = 0;    // seeds where the candidate is strictly lower
  std::size_t losses = 0;  // seeds where it is strictly higher
  std::size_t ties = 0;
  double p_value = 1.0;    // two-sided binomial test on wins vs losses
};

/// Compares per-seed values; a win means `candidate` is strictly lower than `baseline`.
SignTest sign_test(const std::vector<double>& candidate, const std::vector<double>& baseline);

struct AblationResult {
  AblationAxis axis = AblationAxis::kGamma;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> focus_categories;
  std::vector<AblationCell> cells;

  nlohmann::ordered_json to_json() const;
  std::string to_csv() const;
};

/// Runs every (cell, seed) pair; each seed fixes the dataset and the initialization so that
/// cells differ only in the ablated setting. Worker count is capped by MOC_THREADS.
AblationResult run_ablation(AblationAxis axis, const AblationConfig& cfg,
                            const std::function<void(const std::string&)>& log = {});

/// Number of workers: MOC_THREADS when set and positive, else hardware concurrency.
std::size_t worker_count();

/// Runs `jobs` on up to worker_count() threads; the first exception is rethrown.
void parallel_for(std::size_t jobs, const std::function<void(std::size_t)>& fn);

std::string to_string(AblationAxis axis);
AblationAxis ablation_axis_from_string(const std::string& s);

}  // namespace moc
