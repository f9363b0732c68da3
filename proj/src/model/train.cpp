#include "evmap/model/train.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

#include "evmap/data/config_json.hpp"

namespace evmap::model {

using nlohmann::json;

Head head_for(data::Task task) {
  return task == data::Task::kPresence ? Head::kClassification : Head::kRegression;
}

double raw_target(data::Task task, const data::SequenceRecord& record) {
  switch (task) {
    case data::Task::kStrength:
      return record.labels.interaction_strength;
    case data::Task::kConvergenceTime:
      if (!record.t_c_ms()) throw std::runtime_error(record.id + ": convergence-time label is missing");
      return *record.t_c_ms();
    case data::Task::kPresence:
      return 0.0;
  }
  return 0.0;
}

double target_scale(data::Task task, const data::SequenceRecord& record) {
  if (task == data::Task::kConvergenceTime) return static_cast<double>(record.duration_us) / 1000.0;
  if (task == data::Task::kStrength) return kStrengthScale;
  return 1.0;
}

Sample make_sample(const data::SequenceRecord& record, const dvs::EventStream& stream, data::Task task,
                   std::size_t cap, std::uint64_t seed) {
  Sample s;
  s.id = record.id;
  for (const auto& c : data::chunk_events(stream, record.chunk_ms, record.id))
    s.chunks.push_back(prepare_chunk(c, cap, seed));
  s.label = raw_target(task, record);
  s.scale = target_scale(task, record);
  s.target = s.label / s.scale;
  s.flags = record.labels.interaction_per_chunk;
  s.strength = record.labels.interaction_strength;
  s.t_c_ms = record.t_c_ms();
  s.duration_ms = static_cast<double>(record.duration_us) / 1000.0;
  if (task == data::Task::kPresence && s.flags.size() != s.chunks.size())
    throw std::runtime_error(record.id + ": " + std::to_string(s.flags.size()) + " chunk labels for " +
                             std::to_string(s.chunks.size()) + " chunks");
  return s;
}

std::vector<Sample> load_samples(const std::filesystem::path& root, const data::DatasetManifest& manifest,
                                 const std::vector<std::string>& ids, data::Task task, std::size_t cap,
                                 std::uint64_t seed, int threads) {
  std::vector<Sample> out(ids.size());
  std::atomic<std::size_t> next{0};
  std::mutex mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < ids.size(); i = next++) {
      try {
        const auto loaded = data::read_sequence(root, ids[i]);
        if (loaded.record.id != manifest.record(ids[i]).id)
          throw std::runtime_error(ids[i] + ": sidecar id does not match the manifest");
        out[i] = make_sample(loaded.record, loaded.stream, task, cap, seed);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mutex);
        if (!failure) failure = std::current_exception();
        next = ids.size();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(ids.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr", c.lr.base},
          {"lr_decay_every", c.lr.every_epochs},
          {"lr_decay_factor", c.lr.factor},
          {"clip_norm", c.clip_norm},
          {"truncation", c.truncation},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  data::FieldReader r(j, "train");
  r.read("epochs", c.epochs);
  r.read("batch_size", c.batch_size);
  r.read("lr", c.lr.base);
  r.read("lr_decay_every", c.lr.every_epochs);
  r.read("lr_decay_factor", c.lr.factor);
  r.read("clip_norm", c.clip_norm);
  r.read("truncation", c.truncation);
  r.read("seed", c.seed);
  r.finish();
  if (c.epochs < 0) throw data::ConfigError("train.epochs: must be >= 0");
  if (c.batch_size < 1) throw data::ConfigError("train.batch_size: must be >= 1");
  if (!(c.lr.base > 0)) throw data::ConfigError("train.lr: must be positive");
  if (c.lr.every_epochs < 1) throw data::ConfigError("train.lr_decay_every: must be >= 1");
  if (!(c.lr.factor >= 1)) throw data::ConfigError("train.lr_decay_factor: must be >= 1");
  if (c.truncation < 0) throw data::ConfigError("train.truncation: must be >= 0");
  return c;
}

namespace {

template <typename T>
ad::BasicVar<T> chunk_loss(const ad::BasicVar<T>& output, const Sample& sample, std::size_t k, data::Task task) {
  if (task == data::Task::kPresence) return ad::cross_entropy(output, {sample.flags[k]});
  return ad::l1_loss(output, ad::constant(ad::BasicTensor<T>({1, 1}, static_cast<T>(sample.target))));
}

template <typename T>
ad::BasicVar<T> mean_of(const std::vector<ad::BasicVar<T>>& terms) {
  ad::BasicVar<T> total = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) total = ad::add(total, terms[k]);
  return ad::scale(total, static_cast<T>(1.0 / static_cast<double>(terms.size())));
}

}  // namespace

template <typename T>
ad::BasicVar<T> sequence_loss(const BasicModel<T>& model, const Sample& sample, data::Task task) {
  if (sample.chunks.empty()) throw std::invalid_argument(sample.id + ": sequence has no chunks");
  const auto outputs = model.forward(sample.chunks);
  std::vector<ad::BasicVar<T>> terms;
  for (std::size_t k = 0; k < outputs.size(); ++k) terms.push_back(chunk_loss(outputs[k], sample, k, task));
  return mean_of(terms);
}

template ad::BasicVar<float> sequence_loss(const BasicModel<float>&, const Sample&, data::Task);
template ad::BasicVar<double> sequence_loss(const BasicModel<double>&, const Sample&, data::Task);

Trainer::Trainer(Model& model, data::Task task, TrainConfig cfg)
    : model_(model), task_(task), cfg_(cfg), adam_(model.params()) {
  if (model.config().head != head_for(task))
    throw std::invalid_argument("trainer: " + head_name(model.config().head) + " head cannot train the " +
                                data::task_name(task) + " task");
}

double Trainer::train_sequence(const Sample& sample, double weight) {
  if (sample.chunks.empty()) throw std::invalid_argument(sample.id + ": sequence has no chunks");
  const std::size_t n = sample.chunks.size();
  const std::size_t seg = cfg_.truncation > 0 ? static_cast<std::size_t>(cfg_.truncation) : n;
  const int total = static_cast<int>(n);
  auto memory = model_.initial_memory();
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < n; start += seg) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    // Segments start from detached memory.
    memory.sm = ad::constant(memory.sm.value());
    memory.lm = ad::constant(memory.lm.value());
    std::vector<ad::Var> terms;
    for (std::size_t k = start; k < std::min(n, start + seg); ++k) {
      auto s = model_.step(sample.chunks[k], total, memory);
      terms.push_back(chunk_loss(s.output, sample, k, task_));
      memory = std::move(s.memory);
    }
    ad::Var seg_sum = terms.front();
    for (std::size_t k = 1; k < terms.size(); ++k) seg_sum = ad::add(seg_sum, terms[k]);
    loss_sum += static_cast<double>(seg_sum.value().item());
    const ad::Var scaled = ad::scale(seg_sum, static_cast<float>(weight / static_cast<double>(n)));
    if (scaled.requires_grad()) tape.backward(scaled);
  }
  return loss_sum / static_cast<double>(n);
}

EpochStats Trainer::run_epoch(const std::vector<Sample>& train, const std::vector<Sample>* val) {
  if (train.empty()) throw std::invalid_argument("trainer: empty training split");
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(data::derive_seed(cfg_.seed, static_cast<std::uint64_t>(epoch_), 0x5348u));
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(flock::uniform01(rng) * static_cast<double>(i));
    std::swap(order[i - 1], order[std::min(j, i - 1)]);
  }
  EpochStats stats;
  stats.epoch = epoch_;
  stats.lr = ad::lr_at(epoch_, cfg_.lr);
  double total = 0.0;
  const std::size_t batch = static_cast<std::size_t>(cfg_.batch_size);
  for (std::size_t b = 0; b < order.size(); b += batch) {
    const std::size_t end = std::min(order.size(), b + batch);
    model_.params().zero_grad();
    for (std::size_t i = b; i < end; ++i)
      total += train_sequence(train[order[i]], 1.0 / static_cast<double>(end - b));
    if (cfg_.clip_norm > 0) model_.params().clip_grad_norm(cfg_.clip_norm);
    adam_.step(stats.lr);
  }
  model_.params().zero_grad();
  stats.train_loss = total / static_cast<double>(train.size());
  if (val && !val->empty()) stats.val_loss = evaluate_loss(*val);
  ++epoch_;
  history_.push_back(stats);
  return stats;
}

std::vector<EpochStats> Trainer::fit(const std::vector<Sample>& train, const std::vector<Sample>* val,
                                     const std::function<void(const EpochStats&)>& on_epoch) {
  std::vector<EpochStats> out;
  while (epoch_ < cfg_.epochs) {
    out.push_back(run_epoch(train, val));
    if (on_epoch) on_epoch(out.back());
  }
  return out;
}

double Trainer::evaluate_loss(const std::vector<Sample>& samples) const {
  double total = 0.0;
  for (const auto& s : samples) total += static_cast<double>(sequence_loss(model_, s, task_).value().item());
  return samples.empty() ? 0.0 : total / static_cast<double>(samples.size());
}

namespace {

json stats_json(const EpochStats& s) {
  return {{"epoch", s.epoch},
          {"lr", s.lr},
          {"train_loss", s.train_loss},
          {"val_loss", s.val_loss ? json(*s.val_loss) : json(nullptr)}};
}

EpochStats stats_from_json(const json& j) {
  EpochStats s;
  s.epoch = j.at("epoch").get<int>();
  s.lr = j.at("lr").get<double>();
  s.train_loss = j.at("train_loss").get<double>();
  if (!j.at("val_loss").is_null()) s.val_loss = j.at("val_loss").get<double>();
  return s;
}

}  // namespace

void Trainer::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json history = json::array();
  for (const auto& s : history_) history.push_back(stats_json(s));
  const json meta = {{"model", to_json(model_.config())},
                     {"train", to_json(cfg_)},
                     {"task", data::task_name(task_)},
                     {"epochs_done", epoch_},
                     {"history", history},
                     {"tag", tag_}};
  ad::save_checkpoint(model_.params(), model_config_hash(model_.config()), dir / "model.evck", meta);
  std::ofstream out(dir / "optimizer.json", std::ios::trunc);
  if (!out) throw std::runtime_error("trainer: cannot write " + (dir / "optimizer.json").string());
  out << adam_.state().dump() << "\n";
}

void Trainer::resume(const std::filesystem::path& dir) {
  ad::load_checkpoint(model_.params(), model_config_hash(model_.config()), dir / "model.evck");
  const json meta = ad::checkpoint_metadata(dir / "model.evck");
  if (meta.at("task").get<std::string>() != data::task_name(task_))
    throw std::runtime_error("trainer: checkpoint was trained on task " + meta.at("task").get<std::string>());
  std::ifstream in(dir / "optimizer.json");
  if (!in) throw std::runtime_error("trainer: missing " + (dir / "optimizer.json").string());
  adam_.load_state(json::parse(in));
  epoch_ = meta.at("epochs_done").get<int>();
  history_.clear();
  for (const auto& s : meta.at("history")) history_.push_back(stats_from_json(s));
}

Model load_model(const std::filesystem::path& checkpoint) {
  const json meta = ad::checkpoint_metadata(checkpoint);
  if (meta.is_null() || !meta.contains("model"))
    throw std::runtime_error("checkpoint " + checkpoint.string() + " carries no model configuration");
  Model model(model_config_from_json(meta.at("model")), 0);
  ad::load_checkpoint(model.params(), model_config_hash(model.config()), checkpoint);
  return model;
}

void write_trace_csv(const PredictionTrace& trace, double scale, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "chunk_end_ms,y_pred,sigma_S_mean,sigma_L_mean\n";
  char line[160];
  for (const auto& e : trace.entries) {
    std::snprintf(line, sizeof line, "%.6g,%.9g,%.9g,%.9g\n", e.chunk_end_ms, e.y_pred * scale, e.sigma_s_mean,
                  e.sigma_l_mean);
    out << line;
  }
}

}  // namespace evmap::model
