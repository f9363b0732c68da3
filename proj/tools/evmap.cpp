// evmap command-line interface.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "evmap/data/config_json.hpp"
#include "evmap/data/dataset.hpp"
#include "evmap/dvs/evmp.hpp"
#include "evmap/eval/experiment.hpp"
#include "evmap/eval/plot.hpp"
#include "evmap/flock/flock.hpp"
#include "evmap/render/render.hpp"

namespace fs = std::filesystem;
using namespace evmap;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::optional<int> threads;
};

void log_line(const std::string& msg) { std::cerr << "[evmap] " << msg << "\n"; }

json load_json(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw data::ConfigError("--config: cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw data::ConfigError("--config: " + path + ": " + e.what());
  }
}

fs::path config_dir(const Globals& g) {
  return g.config.empty() ? fs::path() : fs::absolute(g.config).parent_path();
}

struct Generation {
  data::GenConfig cfg;
  std::uint64_t seed = 0;
};

// Generation settings come from a bare dataset config or the "dataset" block of an
// experiment config, whose seed applies unless --seed is given.
Generation generation(const Globals& g) {
  json j = load_json(g.config);
  Generation out;
  if (j.contains("dataset")) {
    const auto e = eval::experiment_config_from_json(j, config_dir(g));
    out.cfg = e.dataset;
    out.seed = e.seed;
  } else {
    out.cfg = data::gen_config_from_json(j);
  }
  if (g.seed) out.seed = *g.seed;
  return out;
}

eval::ExperimentConfig experiment_config(const Globals& g) {
  json j = load_json(g.config);
  if (g.seed) j["seed"] = *g.seed;
  if (g.threads) j["threads"] = *g.threads;
  return eval::experiment_config_from_json(j, config_dir(g));
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

flock::Trajectory planned_trajectory(const data::GenConfig& cfg, std::uint64_t seed, data::SequencePlan& plan) {
  plan = data::plan_sequence(cfg, seed);
  return flock::simulate(plan.rules, plan.schedule, seed, cfg.ticks);
}

int cmd_simulate(const Globals& g, int index) {
  const auto [cfg, master] = generation(g);
  cfg.validate();
  const std::uint64_t seed = data::derive_seed(master, static_cast<std::uint64_t>(index), 0);
  data::SequencePlan plan;
  const auto traj = planned_trajectory(cfg, seed, plan);
  const fs::path out(g.out_dir);
  fs::create_directories(out);
  {
    std::ofstream f(out / "trajectory.jsonl", std::ios::trunc);
    f << flock::trajectory_to_jsonl(traj);
  }
  std::ofstream csv(out / "dispersion.csv", std::ios::trunc);
  csv << "tick,std_sin_norm,std_cos_norm\n";
  const auto series = flock::dispersion_series(traj);
  for (std::size_t t = 0; t < series.size(); ++t)
    csv << t << "," << series[t].std_sin_norm << "," << series[t].std_cos_norm << "\n";
  const auto tc = flock::convergence_time_from_series(series, cfg.convergence_threshold);
  write_json(out / "simulate.json", {{"seed", seed},
                                     {"index", index},
                                     {"ticks", cfg.ticks},
                                     {"strength", plan.strength},
                                     {"convergence_threshold", cfg.convergence_threshold},
                                     {"convergence_time_ticks", tc ? json(*tc) : json(nullptr)}});
  log_line("simulated " + std::to_string(cfg.ticks) + " ticks, T_c " + (tc ? std::to_string(*tc) : "none"));
  return 0;
}

int cmd_render(const Globals& g, int index, int stride) {
  if (stride < 1) throw data::ConfigError("--stride: must be >= 1");
  const auto [cfg, master] = generation(g);
  cfg.validate();
  const std::uint64_t seed = data::derive_seed(master, static_cast<std::uint64_t>(index), 0);
  data::SequencePlan plan;
  const auto traj = planned_trajectory(cfg, seed, plan);
  const fs::path out = fs::path(g.out_dir) / "frames";
  fs::create_directories(out);
  int written = 0;
  int tick = 0;
  render::for_each_frame(traj, cfg.render, 1, [&](const render::IntensityFrame& f) {
    if (tick++ % stride != 0) return;
    char name[32];
    std::snprintf(name, sizeof name, "tick_%05d.pgm", f.tick);
    render::write_pgm(f, out / name);
    ++written;
  });
  log_line("wrote " + std::to_string(written) + " frames to " + out.string());
  return 0;
}

int cmd_synth(const Globals& g, int index, int previews) {
  const auto [cfg, master] = generation(g);
  const auto seq = data::generate_sequence(cfg, master, index, log_line);
  const fs::path out(g.out_dir);
  fs::create_directories(out);
  data::write_sequence(seq.record, seq.stream, out);
  if (previews > 0) {
    fs::create_directories(out / "preview");
    const auto window = static_cast<std::uint64_t>(std::llround(cfg.chunk_ms * 1000.0));
    for (int k = 0; k < previews; ++k) {
      const std::uint64_t t0 = seq.stream.duration_us * static_cast<std::uint64_t>(k) / static_cast<std::uint64_t>(previews);
      char name[48];
      std::snprintf(name, sizeof name, "events_%08llu_us.pgm", static_cast<unsigned long long>(t0));
      render::write_pgm(dvs::aggregate_to_frame(seq.stream, window, t0), out / "preview" / name);
    }
  }
  log_line(seq.record.id + ": " + std::to_string(seq.stream.events.size()) + " events");
  return 0;
}

int cmd_dataset_build(const Globals& g) {
  const auto [cfg, master] = generation(g);
  const auto m = data::build_dataset(cfg, master, g.out_dir, g.threads.value_or(1), log_line);
  log_line("dataset " + m.config_hash + ": " + std::to_string(m.train.size()) + "/" + std::to_string(m.val.size()) +
           "/" + std::to_string(m.test.size()) + " sequences");
  return 0;
}

void print_summary(const json& report) {
  json s = json::object();
  for (const char* key : {"name", "task", "predictor", "avg_eot", "baseline_avg_eot", "per_strength_eot",
                          "detection_latency", "chunk_accuracy"})
    if (report.contains(key)) s[key] = report[key];
  std::cout << s.dump(2) << "\n";
}

int cmd_experiment(const Globals& g, eval::RunMode mode) {
  const auto cfg = experiment_config(g);
  const json report = eval::run_experiment(cfg, g.out_dir, log_line, mode);
  if (mode == eval::RunMode::kTrainOnly) {
    const auto& h = report.at("training");
    log_line("trained " + std::to_string(h.size()) + " epochs; checkpoint in " +
             (fs::path(g.out_dir) / "checkpoint").string());
  } else {
    print_summary(report);
  }
  return 0;
}

int cmd_ablate(const Globals& g) {
  json j = load_json(g.config);
  if (g.seed) j["seed"] = *g.seed;
  if (g.threads) j["threads"] = *g.threads;
  const auto cfg = eval::ablation_config_from_json(j, config_dir(g));
  const json r = eval::run_ablation(cfg, g.out_dir, log_line);
  std::cout << r.dump(2) << "\n";
  return 0;
}

int cmd_plot(const std::string& input, std::string output, const std::string& title, const std::string& x_label,
             const std::string& y_label) {
  std::ifstream in(input);
  if (!in) throw std::runtime_error("cannot read " + input);
  std::string line;
  if (!std::getline(in, line) || line != "series,x,y")
    throw std::runtime_error(input + ": expected header series,x,y");
  eval::PlotSpec spec{title, x_label, y_label, {}, std::nullopt};
  std::map<std::string, std::size_t> index;
  for (int n = 2; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    const auto b = line.rfind(',');
    const auto a = b == std::string::npos ? b : line.rfind(',', b - 1);
    if (a == std::string::npos) throw std::runtime_error(input + ":" + std::to_string(n) + ": expected 3 columns");
    const std::string label = line.substr(0, a);
    double x = 0, y = 0;
    try {
      x = std::stod(line.substr(a + 1, b - a - 1));
      y = std::stod(line.substr(b + 1));
    } catch (const std::exception&) {
      throw std::runtime_error(input + ":" + std::to_string(n) + ": bad number");
    }
    auto [it, fresh] = index.emplace(label, spec.series.size());
    if (fresh) spec.series.push_back({label, {}, {}});
    spec.series[it->second].x.push_back(x);
    spec.series[it->second].y.push_back(y);
  }
  if (output.empty()) output = fs::path(input).replace_extension(".svg").string();
  eval::write_svg(spec, output);
  log_line("wrote " + output);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"evmap: flocking event datasets and the evMAP model"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "JSON configuration file");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

  int index = 0;
  auto* simulate = app.add_subcommand("simulate", "Simulate one flock and write its trajectory and dispersion");
  simulate->add_option("--index", index, "Sequence index");
  auto* render = app.add_subcommand("render", "Render one simulated flock to PGM frames");
  int stride = 1;
  render->add_option("--index", index, "Sequence index");
  render->add_option("--stride", stride, "Write every n-th tick");
  auto* synth = app.add_subcommand("synth", "Generate one event sequence (EVMP plus label sidecar)");
  int previews = 0;
  synth->add_option("--index", index, "Sequence index");
  synth->add_option("--previews", previews, "Event-frame previews to write");
  auto* dataset = app.add_subcommand("dataset", "Dataset commands");
  dataset->require_subcommand(1);
  auto* build = dataset->add_subcommand("build", "Generate a full dataset with train/val/test splits");
  auto* train = app.add_subcommand("train", "Train evMAP from an experiment config");
  auto* evalc = app.add_subcommand("eval", "Evaluate a trained checkpoint (or the baseline) on the test split");
  bool train_first = false;
  evalc->add_flag("--train", train_first, "Train or resume first when the checkpoint is missing or incomplete");
  auto* ablate = app.add_subcommand("ablate", "Run a speed or noise ablation sweep");
  auto* plot = app.add_subcommand("plot", "Render a figure CSV (series,x,y) to SVG");
  std::string plot_in, plot_out, title = "", x_label = "x", y_label = "y";
  plot->add_option("--input", plot_in, "Figure CSV")->required();
  plot->add_option("--output", plot_out, "SVG path (default: next to the CSV)");
  plot->add_option("--title", title);
  plot->add_option("--x-label", x_label);
  plot->add_option("--y-label", y_label);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*simulate) return cmd_simulate(g, index);
    if (*render) return cmd_render(g, index, stride);
    if (*synth) return cmd_synth(g, index, previews);
    if (*build) return cmd_dataset_build(g);
    if (*train) return cmd_experiment(g, eval::RunMode::kTrainOnly);
    if (*evalc)
      return cmd_experiment(g, train_first ? eval::RunMode::kTrainAndEvaluate : eval::RunMode::kEvaluateOnly);
    if (*ablate) return cmd_ablate(g);
    if (*plot) return cmd_plot(plot_in, plot_out, title, x_label, y_label);
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const dvs::FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::runtime_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
