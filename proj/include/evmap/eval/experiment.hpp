#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "evmap/data/dataset.hpp"
#include "evmap/eval/metrics.hpp"
#include "evmap/eval/plot.hpp"
#include "evmap/model/model.hpp"
#include "evmap/model/train.hpp"

namespace evmap::eval {

struct EvalOptions {
  EotOptions eot;
  int sustain_chunks = 2;
  std::vector<double> strength_slices{1.5, 3.0, 4.5};
  // Onset detection counts as timely within this fraction of the "on" segment.
  double latency_budget_fraction = 0.25;
};

enum class Predictor { kEvmap, kBaseline };

struct ExperimentConfig {
  std::string name = "experiment";
  data::Task task = data::Task::kStrength;
  std::uint64_t seed = 0;
  int threads = 1;
  Predictor predictor = Predictor::kEvmap;
  data::GenConfig dataset;
  // Existing dataset root; when empty the dataset is built (or reused) under the output directory.
  std::optional<std::filesystem::path> dataset_dir;
  model::ModelConfig model;
  model::TrainConfig train;
  EvalOptions eval;

  void validate() const;
};

// Relative dataset paths resolve against `base_dir`. Unknown fields and bad types
// raise data::ConfigError naming the field path.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ExperimentConfig& cfg);

struct AblationConfig {
  ExperimentConfig base;
  std::string parameter;  // "speed_scale" or "noise_ratio"
  std::vector<double> values;
};

AblationConfig ablation_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});

// Dataset location used for `cfg` under `out_dir`; shared by experiments with equal dataset settings.
std::filesystem::path dataset_root(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);
// Builds the dataset unless a manifest with the same configuration and seed is present.
// An existing manifest with different settings in an explicit dataset_dir is an error.
data::DatasetManifest ensure_dataset(const ExperimentConfig& cfg, const std::filesystem::path& root,
                                     const data::Logger& log = {});

enum class RunMode {
  kTrainAndEvaluate,
  kTrainOnly,     // stops after writing the checkpoint; the report holds the training history
  kEvaluateOnly,  // requires a checkpoint matching the configuration
};

// Trains (or resumes, or loads) the model, evaluates the test split and writes
// report.json, per-sequence CSVs and SVG plots under `out_dir`. Returns the report.
// The checkpoint lives in `out_dir`/checkpoint.
nlohmann::json run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                              const data::Logger& log = {}, RunMode mode = RunMode::kTrainAndEvaluate);

// Runs one experiment per value and reports per-setting EOT with the trend check.
nlohmann::json run_ablation(const AblationConfig& cfg, const std::filesystem::path& out_dir,
                            const data::Logger& log = {});

// Adjacent pairs where the sequence decreases.
int trend_violations(const std::vector<double>& values);

// Figure data: every plotted point also goes to a CSV with columns series,x,y.
void write_plot(const PlotSpec& spec, const std::filesystem::path& svg_path);

}  // namespace evmap::eval
