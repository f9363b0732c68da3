#include "evmap/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>

#include "evmap/data/config_json.hpp"

namespace evmap::model {

using nlohmann::json;

std::string head_name(Head head) { return head == Head::kRegression ? "regression" : "classification"; }

Head parse_head(const std::string& name) {
  if (name == "regression") return Head::kRegression;
  if (name == "classification") return Head::kClassification;
  throw data::ConfigError("model.head: expected \"regression\" or \"classification\", got \"" + name + "\"");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v < 1) throw data::ConfigError(std::string("model.") + field + ": must be >= 1");
  };
  positive(embed_dim, "embed_dim");
  positive(tokens, "tokens");
  positive(memory_rows, "memory_rows");
  positive(memory_cols, "memory_cols");
  positive(fourier_features, "fourier_features");
  positive(sensor_width, "sensor_width");
  positive(sensor_height, "sensor_height");
  if (tokens != memory_rows) throw data::ConfigError("model.tokens: must equal memory_rows so gates align");
  if (chunk_event_cap < 1) throw data::ConfigError("model.chunk_event_cap: must be >= 1");
  if (!(fourier_init_std > 0)) throw data::ConfigError("model.fourier_init_std: must be positive");
}

json to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"tokens", c.tokens},
          {"memory_rows", c.memory_rows},
          {"memory_cols", c.memory_cols},
          {"fourier_features", c.fourier_features},
          {"chunk_event_cap", c.chunk_event_cap},
          {"head", head_name(c.head)},
          {"long_gates_use_lm", c.long_gates_use_lm},
          {"fourier_init_std", c.fourier_init_std},
          {"sensor_width", c.sensor_width},
          {"sensor_height", c.sensor_height}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  data::FieldReader r(j, "model");
  r.read("embed_dim", c.embed_dim);
  r.read("tokens", c.tokens);
  r.read("memory_rows", c.memory_rows);
  r.read("memory_cols", c.memory_cols);
  r.read("fourier_features", c.fourier_features);
  r.read("chunk_event_cap", c.chunk_event_cap);
  std::string head;
  if (r.read("head", head)) c.head = parse_head(head);
  r.read("long_gates_use_lm", c.long_gates_use_lm);
  r.read("fourier_init_std", c.fourier_init_std);
  r.read("sensor_width", c.sensor_width);
  r.read("sensor_height", c.sensor_height);
  r.finish();
  c.validate();
  return c;
}

std::string model_config_hash(const ModelConfig& cfg) { return data::config_hash(to_json(cfg)); }

template <typename T>
ad::BasicTensor<T> raw_event_features(const data::Chunk& chunk, int chunk_total, int width, int height) {
  const int n = static_cast<int>(chunk.events.size());
  ad::BasicTensor<T> raw({n, 5});
  const double span = chunk.t_end_us > chunk.t_start_us ? static_cast<double>(chunk.t_end_us - chunk.t_start_us) : 1.0;
  const double index = chunk_total > 0 ? static_cast<double>(chunk.index) / chunk_total : 0.0;
  for (int i = 0; i < n; ++i) {
    const auto& e = chunk.events[static_cast<std::size_t>(i)];
    raw.at(i, 0) = static_cast<T>(static_cast<double>(e.x) / width);
    raw.at(i, 1) = static_cast<T>(static_cast<double>(e.y) / height);
    raw.at(i, 2) = static_cast<T>(e.polarity);
    raw.at(i, 3) = static_cast<T>((static_cast<double>(e.t_us) - static_cast<double>(chunk.t_start_us)) / span);
    raw.at(i, 4) = static_cast<T>(index);
  }
  return raw;
}

template <typename T>
ad::BasicVar<T> attention(const ad::BasicVar<T>& q, const ad::BasicVar<T>& k, const ad::BasicVar<T>& v) {
  const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.value().cols())));
  return ad::matmul(ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), s)), v);
}

template <typename T>
BasicModel<T>::BasicModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int d = cfg_.embed_dim;
  const int f = cfg_.fourier_features;
  const int c = cfg_.memory_cols;
  const int k = cfg_.tokens;

  std::normal_distribution<double> normal(0.0, cfg_.fourier_init_std);
  ad::BasicTensor<T> b_freq({5, f});
  for (auto& v : b_freq.values()) v = static_cast<T>(normal(rng));
  params_.create("embed.B", std::move(b_freq));
  ad::BasicTensor<T> b_phase({1, f});
  for (auto& v : b_phase.values()) v = static_cast<T>(flock::uniform01(rng) * 2.0 * std::numbers::pi);
  params_.create("embed.b", std::move(b_phase));
  params_.create("embed.W", 2 * f, d, rng);
  params_.create("embed.bias", ad::BasicTensor<T>({1, d}));

  params_.create("encode.Wq", d, d, rng);
  params_.create("encode.Wk", d, d, rng);
  params_.create("encode.Wv", d, d, rng);
  params_.create("pool.queries", k, d, rng, 1.0 / std::sqrt(static_cast<double>(d)));
  params_.create("pool.Wk", d, d, rng);
  params_.create("pool.Wv", d, d, rng);
  params_.create("pool.Wo", d, c, rng);

  for (const char* b : {"s", "l"}) {
    const std::string tag(b);
    for (const char* w : {"Wq", "Wk", "Wv"}) params_.create("read_" + tag + "." + w, c, c, rng);
    for (const char* w : {"W_xm", "W_mm", "W_x", "W_m"}) params_.create("update_" + tag + "." + w, c, c, rng);
    for (const char* w : {"Wq", "Wk", "Wv"}) params_.create("write_" + tag + "." + w, c, c, rng);
  }
  params_.create("head.W", cfg_.memory_rows * c, cfg_.outputs(), rng);
  params_.create("head.b", ad::BasicTensor<T>({1, cfg_.outputs()}));
}

template <typename T>
std::string BasicModel<T>::branch_prefix(const char* op, Branch b) const {
  return std::string(op) + (b == Branch::kShort ? "_s." : "_l.");
}

template <typename T>
ad::BasicVar<T> BasicModel<T>::embed(const data::Chunk& chunk, int chunk_total) const {
  data::Chunk ordered = chunk;
  dvs::sort_events(ordered.events);
  const auto raw = ad::constant(raw_event_features<T>(ordered, chunk_total, cfg_.sensor_width, cfg_.sensor_height));
  const Var phase = ad::add_row(ad::matmul(raw, p("embed.B")), p("embed.b"));
  const Var lifted = ad::concat_cols(ad::cos(phase), ad::sin(phase));
  return ad::add_row(ad::matmul(lifted, p("embed.W")), p("embed.bias"));
}

template <typename T>
ad::BasicVar<T> BasicModel<T>::encode(const Var& pi) const {
  if (pi.value().rank() != 2 || pi.value().rows() == 0)
    return ad::constant(ad::BasicTensor<T>({cfg_.tokens, cfg_.memory_cols}));
  const Var mixed =
      attention(ad::matmul(pi, p("encode.Wq")), ad::matmul(pi, p("encode.Wk")), ad::matmul(pi, p("encode.Wv")));
  const Var h = ad::add(pi, mixed);
  const Var pooled = attention(p("pool.queries"), ad::matmul(h, p("pool.Wk")), ad::matmul(h, p("pool.Wv")));
  return ad::matmul(pooled, p("pool.Wo"));
}

template <typename T>
ad::BasicVar<T> BasicModel<T>::read(const Var& x, const Var& memory, Branch branch) const {
  const std::string pre = branch_prefix("read", branch);
  return attention(ad::matmul(x, p(pre + "Wq")), ad::matmul(memory, p(pre + "Wk")), ad::matmul(memory, p(pre + "Wv")));
}

template <typename T>
BasicUpdateResult<T> BasicModel<T>::update(const Var& x, const Var& sm_prev, const Var& lm_prev) const {
  BasicUpdateResult<T> out;
  auto branch = [&](const std::string& pre, const Var& gate_input, const Var& own_prev, Var& m, Var& sigma,
                    Var& cand) {
    cand = ad::tanh(ad::add(ad::matmul(x, p(pre + "W_xm")), ad::matmul(gate_input, p(pre + "W_mm"))));
    sigma = ad::sigmoid(ad::add(ad::matmul(x, p(pre + "W_x")), ad::matmul(gate_input, p(pre + "W_m"))));
    m = ad::convex_mix(own_prev, cand, sigma);
  };
  branch("update_s.", sm_prev, sm_prev, out.sm, out.sigma_s, out.cand_s);
  branch("update_l.", cfg_.long_gates_use_lm ? lm_prev : sm_prev, lm_prev, out.lm, out.sigma_l, out.cand_l);
  return out;
}

template <typename T>
ad::BasicVar<T> BasicModel<T>::write(const Var& memory, const Var& m, Branch branch) const {
  const std::string pre = branch_prefix("write", branch);
  return ad::add(memory,
                 attention(ad::matmul(memory, p(pre + "Wq")), ad::matmul(m, p(pre + "Wk")), ad::matmul(m, p(pre + "Wv"))));
}

template <typename T>
ad::BasicVar<T> BasicModel<T>::predict(const Var& sm, const Var& lm, const Var& sigma_s, const Var& sigma_l) const {
  const Var sigma_sl = ad::sigmoid(ad::sub(sigma_s, sigma_l));
  const Var blended = ad::convex_mix(lm, sm, sigma_sl);
  const Var flat = ad::reshape(blended, {1, cfg_.memory_rows * cfg_.memory_cols});
  return ad::add_row(ad::matmul(flat, p("head.W")), p("head.b"));
}

template <typename T>
BasicMemoryState<T> BasicModel<T>::initial_memory() const {
  BasicMemoryState<T> m;
  m.sm = ad::constant(ad::BasicTensor<T>({cfg_.memory_rows, cfg_.memory_cols}));
  m.lm = ad::constant(ad::BasicTensor<T>({cfg_.memory_rows, cfg_.memory_cols}));
  return m;
}

namespace {

template <typename T>
double tensor_mean(const ad::BasicTensor<T>& t) {
  double s = 0.0;
  for (T v : t.values()) s += static_cast<double>(v);
  return t.empty() ? 0.0 : s / static_cast<double>(t.size());
}

}  // namespace

template <typename T>
BasicStepOutput<T> BasicModel<T>::step(const data::Chunk& chunk, int chunk_total,
                                       const BasicMemoryState<T>& memory) const {
  const Var x = chunk.events.empty() ? ad::constant(ad::BasicTensor<T>({cfg_.tokens, cfg_.memory_cols}))
                                     : encode(embed(chunk, chunk_total));
  const Var sm_prev = read(x, memory.sm, Branch::kShort);
  const Var lm_prev = read(x, memory.lm, Branch::kLong);
  BasicStepOutput<T> out;
  out.update = update(x, sm_prev, lm_prev);
  out.memory.sm = write(memory.sm, out.update.sm, Branch::kShort);
  out.memory.lm = write(memory.lm, out.update.lm, Branch::kLong);
  out.memory.sigma_s_mean = tensor_mean(out.update.sigma_s.value());
  out.memory.sigma_l_mean = tensor_mean(out.update.sigma_l.value());
  out.output = predict(out.memory.sm, out.memory.lm, out.update.sigma_s, out.update.sigma_l);
  return out;
}

template <typename T>
std::vector<ad::BasicVar<T>> BasicModel<T>::forward(const std::vector<data::Chunk>& chunks) const {
  std::vector<Var> outputs;
  outputs.reserve(chunks.size());
  BasicMemoryState<T> memory = initial_memory();
  const int total = static_cast<int>(chunks.size());
  for (const auto& chunk : chunks) {
    auto s = step(chunk, total, memory);
    outputs.push_back(s.output);
    memory = std::move(s.memory);
  }
  return outputs;
}

template <typename T>
PredictionTrace BasicModel<T>::trace(const std::vector<data::Chunk>& chunks) const {
  PredictionTrace trace;
  BasicMemoryState<T> memory = initial_memory();
  const int total = static_cast<int>(chunks.size());
  for (const auto& chunk : chunks) {
    auto s = step(chunk, total, memory);
    TraceEntry e;
    e.chunk_end_ms = static_cast<double>(chunk.t_end_us) / 1000.0;
    const auto& out = s.output.value();
    if (cfg_.head == Head::kRegression) {
      e.y_pred = static_cast<double>(out[0]);
    } else {
      const double a = static_cast<double>(out[0]);
      const double b = static_cast<double>(out[1]);
      e.y_pred = 1.0 / (1.0 + std::exp(a - b));
      e.predicted_class = b > a ? 1 : 0;
    }
    e.sigma_s_mean = s.memory.sigma_s_mean;
    e.sigma_l_mean = s.memory.sigma_l_mean;
    trace.entries.push_back(e);
    memory = std::move(s.memory);
  }
  return trace;
}

data::Chunk prepare_chunk(const data::Chunk& chunk, std::size_t cap, std::uint64_t seed) {
  return data::subsample_chunk(chunk, cap, seed);
}

template ad::BasicTensor<float> raw_event_features<float>(const data::Chunk&, int, int, int);
template ad::BasicTensor<double> raw_event_features<double>(const data::Chunk&, int, int, int);
template ad::BasicVar<float> attention(const ad::BasicVar<float>&, const ad::BasicVar<float>&,
                                       const ad::BasicVar<float>&);
template ad::BasicVar<double> attention(const ad::BasicVar<double>&, const ad::BasicVar<double>&,
                                        const ad::BasicVar<double>&);
template class BasicModel<float>;
template class BasicModel<double>;

}  // namespace evmap::model
