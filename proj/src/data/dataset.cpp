#include "evmap/data/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

#include "evmap/data/config_json.hpp"
#include "evmap/dvs/evmp.hpp"

namespace evmap::data {

using nlohmann::json;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::string sequence_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%05d", index);
  return buf;
}

std::uint64_t chunk_us(double chunk_ms) {
  if (!(chunk_ms > 0)) throw std::invalid_argument("chunk_ms must be positive");
  const auto us = static_cast<std::uint64_t>(std::llround(chunk_ms * 1000.0));
  if (us == 0) throw std::invalid_argument("chunk_ms is below one microsecond");
  return us;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace

std::string task_name(Task task) {
  switch (task) {
    case Task::kStrength: return "strength";
    case Task::kConvergenceTime: return "convergence_time";
    case Task::kPresence: return "presence";
  }
  return "unknown";
}

Task parse_task(const std::string& name) {
  if (name == "strength") return Task::kStrength;
  if (name == "convergence_time") return Task::kConvergenceTime;
  if (name == "presence") return Task::kPresence;
  throw ConfigError("task: expected strength, convergence_time or presence, got \"" + name + "\"");
}

std::optional<double> SequenceRecord::t_c_ms() const {
  if (!labels.convergence_time_ticks) return std::nullopt;
  return *labels.convergence_time_ticks * tick_ms;
}

json to_json(const SequenceRecord& r) {
  json labels = {{"strength", r.labels.interaction_strength},
                 {"t_c_ms", r.t_c_ms() ? json(*r.t_c_ms()) : json(nullptr)},
                 {"convergence_time_ticks",
                  r.labels.convergence_time_ticks ? json(*r.labels.convergence_time_ticks) : json(nullptr)},
                 {"interaction_per_chunk", r.labels.interaction_per_chunk}};
  return {{"id", r.id},
          {"event_file", r.event_file},
          {"frames_path", r.frames_path ? json(*r.frames_path) : json(nullptr)},
          {"seed", r.seed},
          {"attempt", r.attempt},
          {"rule_params", r.rule_params},
          {"labels", labels},
          {"duration_us", r.duration_us},
          {"chunk_ms", r.chunk_ms},
          {"tick_ms", r.tick_ms}};
}

SequenceRecord record_from_json(const json& j) {
  try {
    SequenceRecord r;
    r.id = j.at("id").get<std::string>();
    r.event_file = j.at("event_file").get<std::string>();
    if (j.contains("frames_path") && !j.at("frames_path").is_null())
      r.frames_path = j.at("frames_path").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.attempt = j.value("attempt", 0);
    r.rule_params = j.at("rule_params");
    const auto& l = j.at("labels");
    r.labels.interaction_strength = l.at("strength").get<double>();
    if (!l.at("convergence_time_ticks").is_null())
      r.labels.convergence_time_ticks = l.at("convergence_time_ticks").get<int>();
    r.labels.interaction_per_chunk = l.at("interaction_per_chunk").get<std::vector<int>>();
    r.duration_us = j.at("duration_us").get<std::uint64_t>();
    r.chunk_ms = j.at("chunk_ms").get<double>();
    r.tick_ms = j.value("tick_ms", 1.0);
    return r;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("sequence sidecar: ") + e.what());
  }
}

void GenConfig::validate() const {
  if (counts.train < 0 || counts.val < 0 || counts.test < 0) throw ConfigError("counts: must be non-negative");
  if (counts.total() == 0) throw ConfigError("counts: dataset would be empty");
  if (strength_levels.empty()) throw ConfigError("strength_levels: must not be empty");
  for (double s : strength_levels)
    if (!(s >= 0)) throw ConfigError("strength_levels: turn limits must be >= 0");
  if (!(speed_scale > 0)) throw ConfigError("speed_scale: must be positive");
  if (!(noise_ratio >= 0 && noise_ratio < 1)) throw ConfigError("noise_ratio: must be in [0, 1)");
  if (ticks < 2) throw ConfigError("ticks: must be >= 2");
  if (!(chunk_ms > 0)) throw ConfigError("chunk_ms: must be positive");
  if (!(convergence_threshold > 0)) throw ConfigError("convergence_threshold: must be positive");
  if (max_retries < 0) throw ConfigError("max_retries: must be >= 0");
  try {
    netlogo.validate();
    force.validate();
    render.validate();
    dvs.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

json to_json(const GenConfig& c) {
  return {{"task", task_name(c.task)},
          {"counts", {{"train", c.counts.train}, {"val", c.counts.val}, {"test", c.counts.test}}},
          {"strength_levels", c.strength_levels},
          {"speed_scale", c.speed_scale},
          {"noise_ratio", c.noise_ratio},
          {"noise_mode", noise_mode_name(c.noise_mode)},
          {"ticks", c.ticks},
          {"chunk_ms", c.chunk_ms},
          {"convergence_threshold", c.convergence_threshold},
          {"max_retries", c.max_retries},
          {"netlogo", to_json(c.netlogo)},
          {"force", to_json(c.force)},
          {"render", to_json(c.render)},
          {"dvs", to_json(c.dvs)}};
}

GenConfig gen_config_from_json(const json& j) {
  GenConfig c;
  FieldReader r(j, "dataset");
  std::string task;
  if (r.read("task", task)) c.task = parse_task(task);
  if (const json* counts = r.child("counts")) {
    FieldReader cr(*counts, r.path("counts"));
    cr.read("train", c.counts.train);
    cr.read("val", c.counts.val);
    cr.read("test", c.counts.test);
    cr.finish();
  }
  r.read("strength_levels", c.strength_levels);
  r.read("speed_scale", c.speed_scale);
  r.read("noise_ratio", c.noise_ratio);
  std::string mode;
  if (r.read("noise_mode", mode)) c.noise_mode = parse_noise_mode(mode, r.path("noise_mode"));
  r.read("ticks", c.ticks);
  r.read("chunk_ms", c.chunk_ms);
  r.read("convergence_threshold", c.convergence_threshold);
  r.read("max_retries", c.max_retries);
  if (const json* n = r.child("netlogo")) read_into(*n, r.path("netlogo"), c.netlogo);
  if (const json* f = r.child("force")) read_into(*f, r.path("force"), c.force);
  if (const json* rc = r.child("render")) read_into(*rc, r.path("render"), c.render);
  if (const json* d = r.child("dvs")) read_into(*d, r.path("dvs"), c.dvs);
  r.finish();
  c.validate();
  return c;
}

std::string config_hash(const json& canonical) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(canonical.dump())));
  return buf;
}

const SequenceRecord& DatasetManifest::record(const std::string& id) const {
  for (const auto& r : records)
    if (r.id == id) return r;
  throw std::out_of_range("manifest: unknown sequence '" + id + "'");
}

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("manifest: unknown split '" + name + "'");
}

json to_json(const DatasetManifest& m) {
  json records = json::array();
  for (const auto& r : m.records) records.push_back(to_json(r));
  return {{"config_hash", m.config_hash},
          {"config", m.config},
          {"master_seed", m.master_seed},
          {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}},
          {"sequences", records}};
}

DatasetManifest manifest_from_json(const json& j) {
  try {
    DatasetManifest m;
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    m.master_seed = j.at("master_seed").get<std::uint64_t>();
    m.train = j.at("splits").at("train").get<std::vector<std::string>>();
    m.val = j.at("splits").at("val").get<std::vector<std::string>>();
    m.test = j.at("splits").at("test").get<std::vector<std::string>>();
    for (const auto& r : j.at("sequences")) m.records.push_back(record_from_json(r));
    return m;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("manifest: ") + e.what());
  }
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& root) {
  write_text(root / "manifest.json", to_json(manifest).dump(2) + "\n");
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
  return manifest_from_json(read_json_file(root / "manifest.json"));
}

std::uint64_t derive_seed(std::uint64_t master_seed, std::uint64_t index, std::uint64_t attempt) {
  return splitmix64(splitmix64(splitmix64(master_seed) ^ (index * 0xD1B54A32D192ED03ull)) ^
                    (attempt * 0x8CB92BA72F3D8DD7ull));
}

SequencePlan plan_sequence(const GenConfig& cfg, std::uint64_t seed) {
  SequencePlan plan;
  if (cfg.task == Task::kPresence) {
    flock::ForceParams f = cfg.force;
    f.speed *= cfg.speed_scale;
    plan.rules = f;
    plan.schedule = flock::InteractionSchedule::off_on_off_window(cfg.ticks);
    plan.strength = f.alignment_strength;
  } else {
    std::mt19937_64 rng(seed);
    const auto pick = static_cast<std::size_t>(flock::uniform01(rng) * static_cast<double>(cfg.strength_levels.size()));
    flock::NetLogoParams p = cfg.netlogo;
    p.max_align_turn = cfg.strength_levels[std::min(pick, cfg.strength_levels.size() - 1)];
    p.speed_scale *= cfg.speed_scale;
    p.max_ticks = cfg.ticks;
    plan.rules = p;
    plan.schedule = flock::InteractionSchedule::always_on(cfg.ticks);
    plan.strength = p.max_align_turn;
  }
  return plan;
}

namespace {

json rules_json(const flock::RuleParams& rules) {
  return std::visit(
      [](const auto& p) {
        json j = to_json(p);
        j["rules"] = std::is_same_v<std::decay_t<decltype(p)>, flock::NetLogoParams> ? "netlogo" : "force";
        return j;
      },
      rules);
}

}  // namespace

dvs::EventStream synthesize_trajectory(const GenConfig& cfg, const flock::Trajectory& traj) {
  dvs::EventSynthesizer synth(cfg.render.width, cfg.render.height, cfg.dvs);
  const double dt = cfg.dvs.frame_period_us / cfg.dvs.substeps;
  std::size_t frame = 0;
  render::for_each_frame(traj, cfg.render, cfg.dvs.substeps, [&](const render::IntensityFrame& f) {
    synth.push(f, static_cast<double>(frame++) * dt);
  });
  return synth.finish(static_cast<std::uint64_t>(std::llround(traj.ticks * cfg.dvs.frame_period_us)));
}

GeneratedSequence generate_sequence(const GenConfig& cfg, std::uint64_t master_seed, int index,
                                    const Logger& log) {
  cfg.validate();
  for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
    const std::uint64_t seed = derive_seed(master_seed, static_cast<std::uint64_t>(index),
                                           static_cast<std::uint64_t>(attempt));
    SequencePlan plan = plan_sequence(cfg, seed);
    flock::Trajectory traj = flock::simulate(plan.rules, plan.schedule, seed, cfg.ticks);
    std::optional<int> tc = flock::convergence_time(traj, cfg.convergence_threshold);
    if (tc && *tc == 0) tc.reset();  // a zero T_c leaves nothing to predict
    if (cfg.requires_convergence() && !tc) {
      if (log)
        log(sequence_id(index) + ": no convergence with seed " + std::to_string(seed) + " (attempt " +
            std::to_string(attempt) + "), resampling");
      continue;
    }

    GeneratedSequence out;
    out.stream = synthesize_trajectory(cfg, traj);
    if (cfg.noise_ratio > 0)
      out.stream = dvs::inject_noise(out.stream, cfg.noise_ratio, splitmix64(seed ^ 0x6E6F697365ull), cfg.noise_mode);

    SequenceRecord& r = out.record;
    r.id = sequence_id(index);
    r.event_file = r.id + ".evmp";
    r.seed = seed;
    r.attempt = attempt;
    r.rule_params = rules_json(plan.rules);
    r.labels.interaction_strength = plan.strength;
    r.labels.convergence_time_ticks = tc;
    r.duration_us = out.stream.duration_us;
    r.chunk_ms = cfg.chunk_ms;
    r.tick_ms = cfg.dvs.frame_period_us / 1000.0;
    const int n = chunk_count(r.duration_us, cfg.chunk_ms);
    const std::uint64_t width = chunk_us(cfg.chunk_ms);
    for (int k = 0; k < n; ++k) {
      const double start_ms = static_cast<double>(static_cast<std::uint64_t>(k) * width) / 1000.0;
      const int tick = static_cast<int>(std::floor(start_ms / r.tick_ms));
      r.labels.interaction_per_chunk.push_back(plan.schedule.interaction_on(tick) ? 1 : 0);
    }
    out.trajectory = std::move(traj);
    return out;
  }
  throw std::runtime_error(sequence_id(index) + ": no converging run after " + std::to_string(cfg.max_retries) +
                           " retries");
}

flock::Trajectory resimulate(const GenConfig& cfg, const SequenceRecord& record) {
  const SequencePlan plan = plan_sequence(cfg, record.seed);
  return flock::simulate(plan.rules, plan.schedule, record.seed, cfg.ticks);
}

DatasetManifest build_dataset(const GenConfig& cfg, std::uint64_t master_seed, const std::filesystem::path& root,
                              int threads, const Logger& log) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec || !std::filesystem::is_directory(root))
    throw std::runtime_error("dataset: cannot create output directory " + root.string());

  const int total = cfg.counts.total();
  std::vector<SequenceRecord> records(static_cast<std::size_t>(total));
  std::atomic<int> next{0};
  std::mutex log_mutex;
  std::exception_ptr failure;
  auto safe_log = [&](const std::string& msg) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(msg);
  };
  auto worker = [&] {
    for (int i = next++; i < total; i = next++) {
      try {
        GeneratedSequence g = generate_sequence(cfg, master_seed, i, safe_log);
        write_sequence(g.record, g.stream, root);
        safe_log(g.record.id + ": " + std::to_string(g.stream.events.size()) + " events");
        records[static_cast<std::size_t>(i)] = std::move(g.record);
      } catch (...) {
        std::lock_guard<std::mutex> lock(log_mutex);
        if (!failure) failure = std::current_exception();
        next = total;
      }
    }
  };
  const int n_threads = std::max(1, std::min(threads, total));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  DatasetManifest m;
  m.config = to_json(cfg);
  m.config_hash = config_hash(m.config);
  m.master_seed = master_seed;
  for (int i = 0; i < total; ++i) {
    const std::string& id = records[static_cast<std::size_t>(i)].id;
    if (i < cfg.counts.train)
      m.train.push_back(id);
    else if (i < cfg.counts.train + cfg.counts.val)
      m.val.push_back(id);
    else
      m.test.push_back(id);
  }
  m.records = std::move(records);
  write_manifest(m, root);
  return m;
}

int chunk_count(std::uint64_t duration_us, double chunk_ms) {
  const std::uint64_t w = chunk_us(chunk_ms);
  return static_cast<int>((duration_us + w - 1) / w);
}

std::vector<Chunk> chunk_events(const dvs::EventStream& stream, double chunk_ms, const std::string& sequence_id) {
  const std::uint64_t w = chunk_us(chunk_ms);
  int n = chunk_count(stream.duration_us, chunk_ms);
  if (!stream.events.empty()) n = std::max(n, static_cast<int>(stream.events.back().t_us / w) + 1);
  std::vector<Chunk> chunks(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    auto& c = chunks[static_cast<std::size_t>(k)];
    c.sequence_id = sequence_id;
    c.index = k;
    c.t_start_us = static_cast<std::uint64_t>(k) * w;
    c.t_end_us = c.t_start_us + w;
  }
  for (const auto& e : stream.events) chunks[static_cast<std::size_t>(e.t_us / w)].events.push_back(e);
  return chunks;
}

Chunk subsample_chunk(const Chunk& chunk, std::size_t cap, std::uint64_t seed) {
  if (cap < 1) throw std::invalid_argument("subsample_chunk: cap must be >= 1");
  Chunk out = chunk;
  out.events.clear();
  std::vector<dvs::EventRecord> sorted = chunk.events;
  dvs::sort_events(sorted);
  if (sorted.size() <= cap) {
    out.events = std::move(sorted);
    return out;
  }
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(fnv1a(chunk.sequence_id) ^ static_cast<std::uint64_t>(chunk.index))));
  std::vector<std::size_t> idx(sorted.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  // Partial Fisher-Yates: the first `cap` slots become a uniform sample.
  for (std::size_t i = 0; i < cap; ++i) {
    const std::size_t span = idx.size() - i;
    const std::size_t j = i + static_cast<std::size_t>(flock::uniform01(rng) * static_cast<double>(span));
    std::swap(idx[i], idx[std::min(j, idx.size() - 1)]);
  }
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  out.events.reserve(cap);
  for (std::size_t i : idx) out.events.push_back(sorted[i]);
  return out;
}

void write_sequence(const SequenceRecord& record, const dvs::EventStream& stream, const std::filesystem::path& root) {
  if (stream.duration_us != record.duration_us)
    throw std::invalid_argument("write_sequence: record duration does not match the stream");
  dvs::write_evmp(stream, root / record.event_file);
  write_text(root / (record.id + ".json"), to_json(record).dump(2) + "\n");
}

LoadedSequence read_sequence(const std::filesystem::path& root, const std::string& id) {
  LoadedSequence s;
  s.record = record_from_json(read_json_file(root / (id + ".json")));
  s.stream = dvs::read_evmp(root / s.record.event_file);
  if (s.stream.duration_us != s.record.duration_us)
    throw dvs::FormatError("sequence " + id + ": sidecar duration " + std::to_string(s.record.duration_us) +
                               " does not match EVMP header " + std::to_string(s.stream.duration_us),
                           12);
  return s;
}

}  // namespace evmap::data
