#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "evmap/ad/optim.hpp"
#include "evmap/data/dataset.hpp"
#include "evmap/model/model.hpp"

namespace evmap::model {

// Regression targets are divided by this before training.
inline constexpr double kStrengthScale = 5.5;

Head head_for(data::Task task);
// Label in natural units: strength in deg/tick, T_c in ms, unused for presence.
double raw_target(data::Task task, const data::SequenceRecord& record);
double target_scale(data::Task task, const data::SequenceRecord& record);

struct Sample {
  std::string id;
  std::vector<data::Chunk> chunks;  // capped, canonical order
  double target = 0.0;              // normalized regression target
  double label = 0.0;               // natural units
  double scale = 1.0;
  std::vector<int> flags;           // per-chunk presence labels
  double strength = 0.0;
  std::optional<double> t_c_ms;
  double duration_ms = 0.0;
};

// Loads, chunks and caps every listed sequence. Subsampling is seeded per sequence and chunk.
std::vector<Sample> load_samples(const std::filesystem::path& root, const data::DatasetManifest& manifest,
                                 const std::vector<std::string>& ids, data::Task task, std::size_t cap,
                                 std::uint64_t seed, int threads = 1);
Sample make_sample(const data::SequenceRecord& record, const dvs::EventStream& stream, data::Task task,
                   std::size_t cap, std::uint64_t seed);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 4;
  ad::StepSchedule lr;
  double clip_norm = 1.0;  // <= 0 disables clipping
  int truncation = 0;      // chunks per backpropagation segment; 0 = whole sequence
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  std::optional<double> val_loss;

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

// Mean per-chunk loss of one sequence: L1 on the normalized target, or cross-entropy
// against the per-chunk flags.
template <typename T>
ad::BasicVar<T> sequence_loss(const BasicModel<T>& model, const Sample& sample, data::Task task);

class Trainer {
 public:
  Trainer(Model& model, data::Task task, TrainConfig cfg);

  EpochStats run_epoch(const std::vector<Sample>& train, const std::vector<Sample>* val = nullptr);
  std::vector<EpochStats> fit(const std::vector<Sample>& train, const std::vector<Sample>* val = nullptr,
                              const std::function<void(const EpochStats&)>& on_epoch = {});
  double evaluate_loss(const std::vector<Sample>& samples) const;

  int epochs_done() const { return epoch_; }
  // Caller-defined provenance stored with the checkpoint metadata.
  void set_tag(nlohmann::json tag) { tag_ = std::move(tag); }
  const std::vector<EpochStats>& history() const { return history_; }

  // Writes model.evck (parameters and run metadata) and optimizer.json into `dir`.
  void save(const std::filesystem::path& dir) const;
  // Restores parameters, optimizer moments, epoch counter and history.
  void resume(const std::filesystem::path& dir);

 private:
  double train_sequence(const Sample& sample, double weight);

  Model& model_;
  data::Task task_;
  TrainConfig cfg_;
  ad::Adam adam_;
  int epoch_ = 0;
  std::vector<EpochStats> history_;
  nlohmann::json tag_;
};

// Builds a model from the configuration stored in a checkpoint and loads its parameters.
Model load_model(const std::filesystem::path& checkpoint);

// CSV columns: chunk_end_ms, y_pred, sigma_S_mean, sigma_L_mean. y_pred is multiplied by `scale`.
void write_trace_csv(const PredictionTrace& trace, double scale, const std::filesystem::path& path);

}  // namespace evmap::model
