#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <vector>

#include "evmap/ad/autodiff.hpp"
#include "evmap/ad/optim.hpp"
#include "evmap/data/dataset.hpp"

namespace evmap::model {

enum class Head { kRegression, kClassification };

std::string head_name(Head head);
Head parse_head(const std::string& name);

struct ModelConfig {
  int embed_dim = 32;         // D
  int tokens = 32;            // K, pooled tokens; must equal memory_rows
  int memory_rows = 32;       // R
  int memory_cols = 32;       // C, token width
  int fourier_features = 16;  // F
  std::size_t chunk_event_cap = 2048;
  Head head = Head::kRegression;
  // Candidates and gates of both branches read the retrieved short-term memory;
  // when set, the long-term branch reads its own memory instead.
  bool long_gates_use_lm = false;
  double fourier_init_std = 4.0;  // std of the initial frequency matrix B
  int sensor_width = 128;
  int sensor_height = 128;

  void validate() const;
  int outputs() const { return head == Head::kRegression ? 1 : 2; }
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
std::string model_config_hash(const ModelConfig& cfg);

enum class Branch { kShort, kLong };

template <typename T>
struct BasicUpdateResult {
  ad::BasicVar<T> sm, sigma_s, cand_s;
  ad::BasicVar<T> lm, sigma_l, cand_l;
};

template <typename T>
struct BasicMemoryState {
  ad::BasicVar<T> sm;  // SM, R x C
  ad::BasicVar<T> lm;  // LM, R x C
  double sigma_s_mean = 0.5;
  double sigma_l_mean = 0.5;
};

template <typename T>
struct BasicStepOutput {
  ad::BasicVar<T> output;  // [1, outputs]
  BasicMemoryState<T> memory;
  BasicUpdateResult<T> update;
};

struct TraceEntry {
  double chunk_end_ms = 0.0;
  double y_pred = 0.0;          // regression output, or P(class 1) for classification
  int predicted_class = -1;     // classification only
  double sigma_s_mean = 0.0;
  double sigma_l_mean = 0.0;
};

struct PredictionTrace {
  std::vector<TraceEntry> entries;
};

// Raw per-event features: x/W, y/H, polarity, time within chunk, chunk index / total.
template <typename T>
ad::BasicTensor<T> raw_event_features(const data::Chunk& chunk, int chunk_total, int width, int height);

// Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.
template <typename T>
ad::BasicVar<T> attention(const ad::BasicVar<T>& q, const ad::BasicVar<T>& k, const ad::BasicVar<T>& v);

template <typename T>
class BasicModel {
 public:
  using Var = ad::BasicVar<T>;

  BasicModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ad::BasicParameterStore<T>& params() { return params_; }
  const ad::BasicParameterStore<T>& params() const { return params_; }

  // N x D; the chunk must already be capped. Events are put in canonical order first.
  Var embed(const data::Chunk& chunk, int chunk_total) const;
  // K x C; an empty event set yields zeros.
  Var encode(const Var& pi) const;
  Var read(const Var& x, const Var& memory, Branch branch) const;
  BasicUpdateResult<T> update(const Var& x, const Var& sm_prev, const Var& lm_prev) const;
  Var write(const Var& memory, const Var& m, Branch branch) const;
  Var predict(const Var& sm, const Var& lm, const Var& sigma_s, const Var& sigma_l) const;

  BasicMemoryState<T> initial_memory() const;
  BasicStepOutput<T> step(const data::Chunk& chunk, int chunk_total, const BasicMemoryState<T>& memory) const;
  // One output per chunk. Records a graph when a tape is active.
  std::vector<Var> forward(const std::vector<data::Chunk>& chunks) const;
  // Inference without a tape.
  PredictionTrace trace(const std::vector<data::Chunk>& chunks) const;

 private:
  std::string branch_prefix(const char* op, Branch b) const;
  const Var& p(const std::string& name) const { return params_.get(name); }

  ModelConfig cfg_;
  ad::BasicParameterStore<T> params_;
};

using Model = BasicModel<float>;

extern template class BasicModel<float>;
extern template class BasicModel<double>;

// Caps a chunk with the model's event cap and canonical order.
data::Chunk prepare_chunk(const data::Chunk& chunk, std::size_t cap, std::uint64_t seed);

}  // namespace evmap::model
