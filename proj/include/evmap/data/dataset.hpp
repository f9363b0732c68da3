#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "evmap/dvs/events.hpp"
#include "evmap/flock/flock.hpp"
#include "evmap/render/render.hpp"

namespace evmap::data {

enum class Task { kStrength, kConvergenceTime, kPresence };

std::string task_name(Task task);
Task parse_task(const std::string& name);

struct Labels {
  double interaction_strength = 0.0;
  std::optional<int> convergence_time_ticks;
  std::vector<int> interaction_per_chunk;

  friend bool operator==(const Labels&, const Labels&) = default;
};

struct SequenceRecord {
  std::string id;
  std::string event_file;  // relative to the dataset root
  std::optional<std::string> frames_path;
  Labels labels;
  std::uint64_t seed = 0;
  int attempt = 0;  // resampling retries consumed before this seed
  nlohmann::json rule_params;
  std::uint64_t duration_us = 0;
  double chunk_ms = 5.0;
  double tick_ms = 1.0;

  // Convergence time in milliseconds from sequence start.
  std::optional<double> t_c_ms() const;
  friend bool operator==(const SequenceRecord&, const SequenceRecord&) = default;
};

nlohmann::json to_json(const SequenceRecord& record);
SequenceRecord record_from_json(const nlohmann::json& j);

struct Chunk {
  std::string sequence_id;
  int index = 0;
  std::vector<dvs::EventRecord> events;
  std::uint64_t t_start_us = 0;
  std::uint64_t t_end_us = 0;

  friend bool operator==(const Chunk&, const Chunk&) = default;
};

struct SplitCounts {
  int train = 40;
  int val = 10;
  int test = 20;

  int total() const { return train + val + test; }
};

struct GenConfig {
  Task task = Task::kStrength;
  SplitCounts counts;
  std::vector<double> strength_levels{1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5};
  double speed_scale = 1.0;
  double noise_ratio = 0.0;
  dvs::NoiseRatioMode noise_mode = dvs::NoiseRatioMode::kFractionOfTotal;
  int ticks = 200;
  double chunk_ms = 5.0;
  double convergence_threshold = flock::kDefaultConvergenceThreshold;
  int max_retries = 10;
  flock::NetLogoParams netlogo;
  flock::ForceParams force;
  render::RenderConfig render;
  dvs::DvsConfig dvs;

  void validate() const;
  // Strength and convergence-time sequences need a finite T_c: error curves are
  // normalized by it.
  bool requires_convergence() const { return task != Task::kPresence; }
};

nlohmann::json to_json(const GenConfig& cfg);
// Missing fields keep their defaults; unknown fields and bad types throw
// std::invalid_argument naming the field path.
GenConfig gen_config_from_json(const nlohmann::json& j);
// Stable hex digest of the canonical JSON form.
std::string config_hash(const nlohmann::json& canonical);

struct DatasetManifest {
  std::string config_hash;
  nlohmann::json config;
  std::uint64_t master_seed = 0;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::vector<SequenceRecord> records;

  const SequenceRecord& record(const std::string& id) const;
  const std::vector<std::string>& split(const std::string& name) const;
};

nlohmann::json to_json(const DatasetManifest& manifest);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& root);
DatasetManifest read_manifest(const std::filesystem::path& root);

// Seed for sequence `index` on resampling attempt `attempt`. Independent across indices.
std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index, std::uint64_t attempt);

// Rules, schedule and strength label drawn for one sequence seed.
struct SequencePlan {
  flock::RuleParams rules;
  flock::InteractionSchedule schedule;
  double strength = 0.0;
};

SequencePlan plan_sequence(const GenConfig& cfg, std::uint64_t seed);
// Renders every substep frame of `traj` and converts it to events (no noise).
dvs::EventStream synthesize_trajectory(const GenConfig& cfg, const flock::Trajectory& traj);

// Simulated, rendered and synthesized sequence prior to serialization.
struct GeneratedSequence {
  SequenceRecord record;
  dvs::EventStream stream;
  flock::Trajectory trajectory;
};

// Generates sequence `index`, resampling with the next derived seed when a
// required T_c is missing. Throws std::runtime_error after max_retries.
GeneratedSequence generate_sequence(const GenConfig& cfg, std::uint64_t master_seed, int index,
                                    const std::function<void(const std::string&)>& log = {});

// Rebuilds the trajectory of a stored record.
flock::Trajectory resimulate(const GenConfig& cfg, const SequenceRecord& record);

using Logger = std::function<void(const std::string&)>;

DatasetManifest build_dataset(const GenConfig& cfg, std::uint64_t master_seed, const std::filesystem::path& root,
                              int threads = 1, const Logger& log = {});

// Half-open windows [k*chunk, (k+1)*chunk) covering the stream duration; empty chunks are kept.
std::vector<Chunk> chunk_events(const dvs::EventStream& stream, double chunk_ms, const std::string& sequence_id = "");
int chunk_count(std::uint64_t duration_us, double chunk_ms);

// Uniform subset without replacement, in stream order. Deterministic per (seed, sequence id, chunk index).
Chunk subsample_chunk(const Chunk& chunk, std::size_t cap, std::uint64_t seed);

void write_sequence(const SequenceRecord& record, const dvs::EventStream& stream, const std::filesystem::path& root);
struct LoadedSequence {
  SequenceRecord record;
  dvs::EventStream stream;
};
// Reads `<root>/<id>.json` and its event file. Format problems raise dvs::FormatError.
LoadedSequence read_sequence(const std::filesystem::path& root, const std::string& id);

}  // namespace evmap::data
