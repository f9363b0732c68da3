#include "evmap/eval/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <thread>

#include "evmap/data/config_json.hpp"

namespace evmap::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string predictor_name(Predictor p) { return p == Predictor::kEvmap ? "evmap" : "baseline"; }

Predictor parse_predictor(const std::string& s) {
  if (s == "evmap") return Predictor::kEvmap;
  if (s == "baseline") return Predictor::kBaseline;
  throw data::ConfigError("experiment.predictor: expected \"evmap\" or \"baseline\", got \"" + s + "\"");
}

std::string deviation_name(Deviation d) { return d == Deviation::kAbsolute ? "absolute" : "squared"; }

Deviation parse_deviation(const std::string& s) {
  if (s == "absolute") return Deviation::kAbsolute;
  if (s == "squared") return Deviation::kSquared;
  throw data::ConfigError("experiment.eval.deviation: expected \"absolute\" or \"squared\", got \"" + s + "\"");
}

json eval_json(const EvalOptions& e) {
  return {{"deviation", deviation_name(e.eot.deviation)},
          {"no_prediction_penalty", e.eot.no_prediction_penalty},
          {"sustain_chunks", e.sustain_chunks},
          {"strength_slices", e.strength_slices},
          {"latency_budget_fraction", e.latency_budget_fraction}};
}

void read_eval(const json& j, const std::string& path, EvalOptions& e) {
  data::FieldReader r(j, path);
  std::string dev;
  if (r.read("deviation", dev)) e.eot.deviation = parse_deviation(dev);
  r.read("no_prediction_penalty", e.eot.no_prediction_penalty);
  r.read("sustain_chunks", e.sustain_chunks);
  r.read("strength_slices", e.strength_slices);
  r.read("latency_budget_fraction", e.latency_budget_fraction);
  r.finish();
}

// Seeds for the independent random streams of one experiment.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) { return data::derive_seed(seed, stream, 0); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string slice_key(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

// Mean ratio per t_norm bin, for the aggregated error-curve figure.
Series binned_curve(const std::string& label, const std::vector<ErrorCurve>& curves, int bins) {
  std::vector<double> sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<int> count(static_cast<std::size_t>(bins), 0);
  for (const auto& c : curves)
    for (const auto& p : c.points) {
      const int b = std::clamp(static_cast<int>(p.t_norm * bins), 0, bins - 1);
      sum[static_cast<std::size_t>(b)] += p.ratio;
      ++count[static_cast<std::size_t>(b)];
    }
  Series s;
  s.label = label;
  for (int b = 0; b < bins; ++b) {
    if (count[static_cast<std::size_t>(b)] == 0) continue;
    s.x.push_back((b + 0.5) / bins);
    s.y.push_back(sum[static_cast<std::size_t>(b)] / count[static_cast<std::size_t>(b)]);
  }
  return s;
}

template <typename F>
void parallel_for(std::size_t n, int threads, F&& body) {
  std::atomic<std::size_t> next{0};
  std::mutex mutex;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  const int t = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  std::vector<std::thread> pool;
  for (int k = 1; k < t; ++k) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct Transition {
  double time_ms = 0.0;
  int to_class = 0;
  double segment_ms = 0.0;  // length of the segment the transition opens
};

std::vector<Transition> transitions(const model::Sample& s, double chunk_ms) {
  std::vector<Transition> out;
  for (std::size_t k = 1; k < s.flags.size(); ++k) {
    if (s.flags[k] == s.flags[k - 1]) continue;
    std::size_t end = k;
    while (end < s.flags.size() && s.flags[end] == s.flags[k]) ++end;
    out.push_back({static_cast<double>(k) * chunk_ms, s.flags[k], static_cast<double>(end - k) * chunk_ms});
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  dataset.validate();
  model.validate();
  if (threads < 1) throw data::ConfigError("experiment.threads: must be >= 1");
  if (model.head != model::head_for(task))
    throw data::ConfigError("experiment.model.head: " + model::head_name(model.head) + " head does not fit task " +
                            data::task_name(task));
  if ((task == data::Task::kPresence) != (dataset.task == data::Task::kPresence))
    throw data::ConfigError("experiment.dataset.task: " + data::task_name(dataset.task) +
                            " sequences cannot serve the " + data::task_name(task) + " task");
  if (eval.sustain_chunks < 1) throw data::ConfigError("experiment.eval.sustain_chunks: must be >= 1");
  if (!(eval.eot.no_prediction_penalty >= 0))
    throw data::ConfigError("experiment.eval.no_prediction_penalty: must be >= 0");
  if (!(eval.latency_budget_fraction > 0))
    throw data::ConfigError("experiment.eval.latency_budget_fraction: must be positive");
}

ExperimentConfig experiment_config_from_json(const json& j, const fs::path& base_dir) {
  ExperimentConfig c;
  data::FieldReader r(j, "experiment");
  r.read("name", c.name);
  std::string task;
  if (r.read("task", task)) c.task = data::parse_task(task);
  r.read("seed", c.seed);
  r.read("threads", c.threads);
  std::string predictor;
  if (r.read("predictor", predictor)) c.predictor = parse_predictor(predictor);
  c.model.head = model::head_for(c.task);
  c.dataset.task = c.task == data::Task::kPresence ? data::Task::kPresence : data::Task::kStrength;
  if (const json* d = r.child("dataset")) c.dataset = data::gen_config_from_json(*d);
  std::string dir;
  if (r.read("dataset_dir", dir)) {
    fs::path p(dir);
    c.dataset_dir = p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  }
  if (const json* m = r.child("model")) {
    json mj = *m;
    if (!mj.contains("head")) mj["head"] = model::head_name(c.model.head);
    c.model = model::model_config_from_json(mj);
  }
  if (const json* t = r.child("train")) c.train = model::train_config_from_json(*t);
  if (const json* e = r.child("eval")) read_eval(*e, r.path("eval"), c.eval);
  r.finish();
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j = {{"name", c.name},
            {"task", data::task_name(c.task)},
            {"seed", c.seed},
            {"threads", c.threads},
            {"predictor", predictor_name(c.predictor)},
            {"dataset", data::to_json(c.dataset)},
            {"model", model::to_json(c.model)},
            {"train", model::to_json(c.train)},
            {"eval", eval_json(c.eval)}};
  if (c.dataset_dir) j["dataset_dir"] = c.dataset_dir->string();
  return j;
}

AblationConfig ablation_config_from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw data::ConfigError("experiment: expected an object");
  if (!j.contains("ablation")) throw data::ConfigError("experiment.ablation: missing");
  json base = j;
  base.erase("ablation");
  AblationConfig a;
  a.base = experiment_config_from_json(base, base_dir);
  data::FieldReader r(j.at("ablation"), "experiment.ablation");
  if (!r.read("parameter", a.parameter)) throw data::ConfigError("experiment.ablation.parameter: missing");
  if (!r.read("values", a.values) || a.values.empty())
    throw data::ConfigError("experiment.ablation.values: expected a non-empty list");
  r.finish();
  if (a.parameter != "speed_scale" && a.parameter != "noise_ratio")
    throw data::ConfigError("experiment.ablation.parameter: expected \"speed_scale\" or \"noise_ratio\"");
  if (a.base.dataset_dir)
    throw data::ConfigError("experiment.dataset_dir: ablations generate one dataset per setting");
  return a;
}

fs::path dataset_root(const ExperimentConfig& cfg, const fs::path& out_dir) {
  if (cfg.dataset_dir) return *cfg.dataset_dir;
  return out_dir / "dataset";
}

data::DatasetManifest ensure_dataset(const ExperimentConfig& cfg, const fs::path& root, const data::Logger& log) {
  const std::string hash = data::config_hash(data::to_json(cfg.dataset));
  if (fs::exists(root / "manifest.json")) {
    auto m = data::read_manifest(root);
    if (m.config_hash == hash && m.master_seed == cfg.seed) {
      if (log) log("reusing dataset " + root.string());
      return m;
    }
    if (cfg.dataset_dir)
      throw std::runtime_error("dataset at " + root.string() + " was generated with a different configuration or seed");
  }
  if (log) log("building dataset in " + root.string());
  return data::build_dataset(cfg.dataset, cfg.seed, root, cfg.threads, log);
}

int trend_violations(const std::vector<double>& values) {
  int v = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] < values[i - 1]) ++v;
  return v;
}

void write_plot(const PlotSpec& spec, const fs::path& svg_path) {
  write_svg(spec, svg_path);
  fs::path csv = svg_path;
  csv.replace_extension(".csv");
  std::ofstream out(csv, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + csv.string());
  out << "series,x,y\n";
  for (const auto& s : spec.series)
    for (std::size_t i = 0; i < s.x.size(); ++i) out << s.label << "," << fmt(s.x[i]) << "," << fmt(s.y[i]) << "\n";
}

json run_experiment(const ExperimentConfig& cfg_in, const fs::path& out_dir, const data::Logger& log, RunMode mode) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  cfg.train.seed = stream_seed(cfg.seed, 2);
  fs::create_directories(out_dir);
  const fs::path root = dataset_root(cfg, out_dir);
  if (mode == RunMode::kEvaluateOnly) {
    if (!fs::exists(root / "manifest.json")) throw std::runtime_error("missing dataset: no manifest.json in " + root.string());
    const auto m = data::read_manifest(root);
    if (m.config_hash != data::config_hash(data::to_json(cfg.dataset)) || m.master_seed != cfg.seed)
      throw std::runtime_error("dataset at " + root.string() + " was generated with a different configuration or seed");
    if (cfg.predictor == Predictor::kEvmap && !fs::exists(out_dir / "checkpoint" / "model.evck"))
      throw std::runtime_error("missing checkpoint: " + (out_dir / "checkpoint" / "model.evck").string());
  }
  const data::DatasetManifest manifest = ensure_dataset(cfg, root, log);
  const std::uint64_t subsample_seed = stream_seed(cfg.seed, 3);
  const std::size_t cap = cfg.model.chunk_event_cap;

  if (log) log("loading samples");
  const auto train = model::load_samples(root, manifest, manifest.train, cfg.task, cap, subsample_seed, cfg.threads);
  const auto val = model::load_samples(root, manifest, manifest.val, cfg.task, cap, subsample_seed, cfg.threads);
  const auto test = model::load_samples(root, manifest, manifest.test, cfg.task, cap, subsample_seed, cfg.threads);
  if (train.empty() || test.empty()) throw std::runtime_error("experiment: train and test splits must be non-empty");

  json report;
  report["name"] = cfg.name;
  report["task"] = data::task_name(cfg.task);
  report["predictor"] = predictor_name(cfg.predictor);
  report["config_hash"] = data::config_hash(to_json(cfg));
  report["dataset_hash"] = manifest.config_hash;
  report["sequence_count"] = {{"train", train.size()}, {"val", val.size()}, {"test", test.size()}};

  // Model: train, resume or load.
  std::optional<model::Model> net;
  if (cfg.predictor == Predictor::kEvmap) {
    net.emplace(cfg.model, stream_seed(cfg.seed, 1));
    model::Trainer trainer(*net, cfg.task, cfg.train);
    const json tag = {{"dataset_hash", manifest.config_hash}, {"seed", cfg.seed}};
    trainer.set_tag(tag);
    const fs::path ckpt = out_dir / "checkpoint";
    bool resumed = false;
    if (fs::exists(ckpt / "model.evck")) {
      const json meta = ad::checkpoint_metadata(ckpt / "model.evck");
      const bool compatible = meta.is_object() && meta.value("tag", json()) == tag &&
                              meta.value("model", json()) == model::to_json(cfg.model) &&
                              meta.value("train", json()) == model::to_json(cfg.train) &&
                              meta.value("task", std::string()) == data::task_name(cfg.task);
      if (compatible) {
        trainer.resume(ckpt);
        resumed = true;
        if (log) log("resumed checkpoint at epoch " + std::to_string(trainer.epochs_done()));
      }
    }
    if (mode == RunMode::kEvaluateOnly) {
      if (!resumed) throw std::runtime_error("no checkpoint matching this configuration in " + ckpt.string());
      if (trainer.epochs_done() < cfg.train.epochs)
        throw std::runtime_error("checkpoint in " + ckpt.string() + " has " + std::to_string(trainer.epochs_done()) +
                                 " of " + std::to_string(cfg.train.epochs) + " epochs");
    }
    trainer.fit(train, &val, [&](const model::EpochStats& s) {
      trainer.save(ckpt);
      if (log) {
        char line[160];
        std::snprintf(line, sizeof line, "epoch %d lr %.3g train %.5f val %.5f", s.epoch, s.lr, s.train_loss,
                      s.val_loss.value_or(std::nan("")));
        log(line);
      }
    });
    if (!fs::exists(ckpt / "model.evck")) trainer.save(ckpt);
    json hist = json::array();
    for (const auto& s : trainer.history())
      hist.push_back({{"epoch", s.epoch},
                      {"lr", s.lr},
                      {"train_loss", s.train_loss},
                      {"val_loss", s.val_loss ? json(*s.val_loss) : json(nullptr)}});
    report["training"] = hist;
    PlotSpec loss{"Training loss", "epoch", "loss", {}, std::nullopt};
    Series tr{"train", {}, {}}, va{"val", {}, {}};
    for (const auto& s : trainer.history()) {
      tr.x.push_back(s.epoch);
      tr.y.push_back(s.train_loss);
      if (s.val_loss) {
        va.x.push_back(s.epoch);
        va.y.push_back(*s.val_loss);
      }
    }
    loss.series = {tr, va};
    fs::create_directories(out_dir / "plots");
    write_plot(loss, out_dir / "plots" / "loss.svg");
  }
  if (mode == RunMode::kTrainOnly) {
    if (!net) throw std::runtime_error("experiment: the baseline predictor has nothing to train");
    write_text(out_dir / "train_report.json", report.dump(2) + "\n");
    return report;
  }

  // Traces for every test sequence.
  if (log) log("evaluating " + std::to_string(test.size()) + " test sequences");
  std::vector<model::PredictionTrace> traces(test.size());
  if (net) parallel_for(test.size(), cfg.threads, [&](std::size_t i) { traces[i] = net->trace(test[i].chunks); });
  fs::create_directories(out_dir / "curves");
  fs::create_directories(out_dir / "traces");
  fs::create_directories(out_dir / "plots");

  json per_seq = json::array();
  if (cfg.task != data::Task::kPresence) {
    std::vector<double> labels;
    for (const auto& s : train) labels.push_back(s.label);
    const ConstantPredictor baseline(labels);
    report["baseline_value"] = baseline.value();
    std::vector<SequenceScore> model_scores, base_scores;
    std::vector<ErrorCurve> model_curves, base_curves;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& s = test[i];
      if (!s.t_c_ms) throw std::runtime_error(s.id + ": test sequence has no convergence time");
      std::vector<double> ends;
      for (const auto& c : s.chunks) ends.push_back(static_cast<double>(c.t_end_us) / 1000.0);
      const ErrorCurve bc = error_curve(baseline.trace(ends, s.scale), s.scale, s.label, *s.t_c_ms);
      const double be = eot(bc, cfg.eval.eot);
      base_scores.push_back({s.strength, be});
      base_curves.push_back(bc);
      json entry = {{"id", s.id},
                    {"strength", s.strength},
                    {"t_c_ms", *s.t_c_ms},
                    {"label", s.label},
                    {"baseline_eot", be}};
      auto write_curve = [&](const ErrorCurve& c, const std::string& suffix) {
        std::ofstream out(out_dir / "curves" / (s.id + "_" + suffix + ".csv"), std::ios::trunc);
        out << "t_norm,ratio\n";
        for (const auto& p : c.points) out << fmt(p.t_norm) << "," << fmt(p.ratio) << "\n";
      };
      write_curve(bc, "baseline");
      if (net) {
        const ErrorCurve mc = error_curve(traces[i], s.scale, s.label, *s.t_c_ms);
        const double me = eot(mc, cfg.eval.eot);
        model_scores.push_back({s.strength, me});
        model_curves.push_back(mc);
        entry["eot"] = me;
        entry["final_prediction"] = traces[i].entries.back().y_pred * s.scale;
        write_curve(mc, "evmap");
        model::write_trace_csv(traces[i], s.scale, out_dir / "traces" / (s.id + ".csv"));
      }
      per_seq.push_back(entry);
    }
    auto summary_json = [&](const EotSummary& sum) {
      json per = json::object();
      for (const auto& [k, v] : sum.per_strength) per[slice_key(k)] = v;
      json slices = json::object();
      for (double sl : cfg.eval.strength_slices) {
        auto it = sum.per_strength.find(sl);
        slices[slice_key(sl)] = it == sum.per_strength.end() ? json(nullptr) : json(it->second);
      }
      return json{{"avg_eot", sum.eot}, {"per_strength_eot", per}, {"slice_eot", slices}, {"sequences", sum.sequences}};
    };
    const EotSummary bsum = summarize(base_scores);
    report["baseline"] = summary_json(bsum);
    report["baseline_avg_eot"] = bsum.eot;
    PlotSpec curves{"Error ratio over normalized observation time", "t_observe / T_c", "y_pred / y_GT", {}, 1.0};
    if (net) {
      const EotSummary msum = summarize(model_scores);
      report["evmap"] = summary_json(msum);
      report["avg_eot"] = msum.eot;
      report["per_strength_eot"] = report["evmap"]["per_strength_eot"];
      for (double sl : cfg.eval.strength_slices) {
        std::vector<ErrorCurve> sel;
        for (std::size_t i = 0; i < test.size(); ++i)
          if (test[i].strength == sl) sel.push_back(model_curves[i]);
        if (!sel.empty()) curves.series.push_back(binned_curve("evMAP s=" + slice_key(sl), sel, 20));
      }
      curves.series.push_back(binned_curve("evMAP all", model_curves, 20));
    } else {
      report["avg_eot"] = bsum.eot;
      report["per_strength_eot"] = report["baseline"]["per_strength_eot"];
    }
    curves.series.push_back(binned_curve("baseline", base_curves, 20));
    write_plot(curves, out_dir / "plots" / "error_curves.svg");
  } else {
    if (!net) throw std::runtime_error("experiment: the presence task needs the evmap predictor");
    const double chunk_ms = manifest.records.front().chunk_ms;
    int onsets = 0, timely = 0, correct = 0, total = 0;
    std::vector<double> onset_latencies;
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& s = test[i];
      const auto& tr = traces[i];
      for (std::size_t k = 0; k < tr.entries.size(); ++k) {
        correct += tr.entries[k].predicted_class == s.flags[k] ? 1 : 0;
        ++total;
      }
      json events = json::array();
      for (const auto& t : transitions(s, chunk_ms)) {
        const auto lat = detection_latency(tr, t.time_ms, t.to_class, cfg.eval.sustain_chunks);
        const double budget = cfg.eval.latency_budget_fraction * t.segment_ms;
        events.push_back({{"kind", t.to_class == 1 ? "onset" : "offset"},
                          {"time_ms", t.time_ms},
                          {"segment_ms", t.segment_ms},
                          {"latency_ms", lat ? json(*lat) : json(nullptr)},
                          {"within_budget", lat.has_value() && *lat <= budget}});
        if (t.to_class == 1) {
          ++onsets;
          if (lat && *lat <= budget) ++timely;
          if (lat) onset_latencies.push_back(*lat);
        }
      }
      per_seq.push_back({{"id", s.id}, {"transitions", events}});
      model::write_trace_csv(tr, 1.0, out_dir / "traces" / (s.id + ".csv"));
    }
    std::sort(onset_latencies.begin(), onset_latencies.end());
    report["detection_latency"] = {
        {"onsets", onsets},
        {"timely_onsets", timely},
        {"timely_fraction", onsets > 0 ? static_cast<double>(timely) / onsets : 0.0},
        {"budget_fraction", cfg.eval.latency_budget_fraction},
        {"sustain_chunks", cfg.eval.sustain_chunks},
        {"median_onset_latency_ms",
         onset_latencies.empty() ? json(nullptr) : json(onset_latencies[onset_latencies.size() / 2])}};
    report["chunk_accuracy"] = total > 0 ? static_cast<double>(correct) / total : 0.0;
  }
  report["sequences"] = per_seq;

  // Gate trace of the first test sequence.
  if (net) {
    const auto& tr = traces.front();
    PlotSpec gates{"Gate trace " + test.front().id, "time (ms)", "mean gate value", {}, std::nullopt};
    Series gs{"sigma_S", {}, {}}, gl{"sigma_L", {}, {}}, py{cfg.task == data::Task::kPresence ? "P(on)" : "y_pred / y_GT", {}, {}};
    for (const auto& e : tr.entries) {
      gs.x.push_back(e.chunk_end_ms);
      gs.y.push_back(e.sigma_s_mean);
      gl.x.push_back(e.chunk_end_ms);
      gl.y.push_back(e.sigma_l_mean);
      py.x.push_back(e.chunk_end_ms);
      py.y.push_back(cfg.task == data::Task::kPresence ? e.y_pred : e.y_pred * test.front().scale / test.front().label);
    }
    gates.series = {gs, gl, py};
    write_plot(gates, out_dir / "plots" / "gate_trace.svg");
  }

  write_text(out_dir / "report.json", report.dump(2) + "\n");
  return report;
}

json run_ablation(const AblationConfig& cfg, const fs::path& out_dir, const data::Logger& log) {
  json settings = json::array();
  std::vector<double> model_eot, base_eot;
  PlotSpec plot{"Ablation over " + cfg.parameter, cfg.parameter, "average EOT", {}, std::nullopt};
  Series ms{"evMAP", {}, {}}, bs{"baseline", {}, {}};
  for (double v : cfg.values) {
    ExperimentConfig e = cfg.base;
    if (cfg.parameter == "speed_scale")
      e.dataset.speed_scale = v;
    else
      e.dataset.noise_ratio = v;
    e.name = cfg.base.name + "_" + cfg.parameter + "_" + fmt(v);
    const fs::path dir = out_dir / (cfg.parameter + "_" + fmt(v));
    if (log) log("ablation setting " + cfg.parameter + " = " + fmt(v));
    const json r = run_experiment(e, dir, log);
    const double me = r.at("avg_eot").get<double>();
    const double be = r.at("baseline_avg_eot").get<double>();
    model_eot.push_back(me);
    base_eot.push_back(be);
    settings.push_back({{"value", v}, {"avg_eot", me}, {"baseline_avg_eot", be}, {"report", (dir / "report.json").string()}});
    ms.x.push_back(v);
    ms.y.push_back(me);
    bs.x.push_back(v);
    bs.y.push_back(be);
  }
  plot.series = {ms, bs};
  fs::create_directories(out_dir);
  write_plot(plot, out_dir / "ablation.svg");
  const int violations = trend_violations(model_eot);
  json out = {{"parameter", cfg.parameter},
              {"values", cfg.values},
              {"settings", settings},
              {"trend_violations", violations},
              {"trend_ok", violations <= 1}};
  write_text(out_dir / "ablation.json", out.dump(2) + "\n");
  return out;
}

}  // namespace evmap::eval
