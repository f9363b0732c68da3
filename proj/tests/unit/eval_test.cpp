#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "evmap/data/config_json.hpp"
#include "evmap/eval/experiment.hpp"
#include "evmap/eval/metrics.hpp"
#include "evmap/eval/plot.hpp"

namespace fs = std::filesystem;
using namespace evmap;
using eval::CurvePoint;
using eval::ErrorCurve;
using nlohmann::json;

namespace {

ErrorCurve curve(std::vector<CurvePoint> pts) {
  ErrorCurve c;
  c.points = std::move(pts);
  if (!c.points.empty()) c.first_prediction_t_norm = c.points.front().t_norm;
  return c;
}

model::PredictionTrace class_trace(const std::vector<int>& classes, double chunk_ms = 5.0) {
  model::PredictionTrace t;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    model::TraceEntry e;
    e.chunk_end_ms = (static_cast<double>(k) + 1) * chunk_ms;
    e.predicted_class = classes[k];
    e.y_pred = classes[k];
    t.entries.push_back(e);
  }
  return t;
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("evmap_eval_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

}  // namespace

TEST(Eot, PerfectPredictorIsZero) {
  EXPECT_NEAR(eval::eot(curve({{0.0, 1.0}, {0.5, 1.0}, {1.0, 1.0}})), 0.0, 1e-9);
}

TEST(Eot, ConstantRatioOnePointFiveIsHalf) {
  EXPECT_NEAR(eval::eot(curve({{0.0, 1.5}, {0.3, 1.5}, {1.0, 1.5}})), 0.5, 1e-9);
  EXPECT_NEAR(eval::eot(curve({{0.0, 0.5}})), 0.5, 1e-9);
}

TEST(Eot, LateFirstPredictionIsPenalized) {
  EXPECT_NEAR(eval::eot(curve({{0.2, 1.0}, {0.6, 1.0}, {1.0, 1.0}})), 0.2, 1e-9);
}

TEST(Eot, TrapezoidAndHeldTail) {
  // e = 1 at 0, 0 at 0.5, tail 0 from 0.5: area 0.25.
  EXPECT_NEAR(eval::eot(curve({{0.0, 2.0}, {0.5, 1.0}})), 0.25, 1e-12);
  // held tail: e = 0.5 from 0.5 to 1.
  EXPECT_NEAR(eval::eot(curve({{0.0, 1.0}, {0.5, 1.0}, {0.5, 1.5}})), 0.25, 1e-12);
}

TEST(Eot, SquaredDeviation) {
  eval::EotOptions o;
  o.deviation = eval::Deviation::kSquared;
  EXPECT_NEAR(eval::eot(curve({{0.0, 1.5}}), o), 0.25, 1e-12);
}

TEST(Eot, NoPointsScoresPenaltyUpToFirstPrediction) {
  EXPECT_DOUBLE_EQ(eval::eot(ErrorCurve{}), 1.0);
  ErrorCurve late;
  late.first_prediction_t_norm = 1.4;
  EXPECT_DOUBLE_EQ(eval::eot(late), 1.0);
}

TEST(Eot, InvariantToDuplicatedPoint) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<CurvePoint> pts;
    for (int k = 0; k < 8; ++k) pts.push_back({0.1 * k + 0.05, u(rng)});
    const double base = eval::eot(curve(pts));
    auto dup = pts;
    const std::size_t at = static_cast<std::size_t>(rep) % pts.size();
    dup.insert(dup.begin() + static_cast<long>(at), pts[at]);
    EXPECT_NEAR(eval::eot(curve(dup)), base, 1e-12);
  }
}

TEST(Eot, MonotoneUnderPointwiseIncreaseOfDeviation) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<CurvePoint> a, b;
    for (int k = 0; k < 10; ++k) {
      const double d = u(rng);
      const double sign = u(rng) < 0.5 ? -1.0 : 1.0;
      a.push_back({0.1 * k, 1.0 + sign * d});
      b.push_back({0.1 * k, 1.0 + sign * (d + 0.3 * u(rng))});
    }
    EXPECT_LE(eval::eot(curve(a)), eval::eot(curve(b)) + 1e-12);
    EXPECT_GE(eval::eot(curve(a)), 0.0);
  }
}

TEST(Eot, DecreasingTimesThrow) {
  EXPECT_THROW(eval::eot(curve({{0.5, 1.0}, {0.2, 1.0}})), std::invalid_argument);
}

TEST(ErrorCurve, KeepsPredictionsUpToConvergence) {
  model::PredictionTrace t;
  for (int k = 1; k <= 10; ++k) t.entries.push_back({5.0 * k, 0.5, 0, 0.0, 0.0});
  const auto c = eval::error_curve(t, 2.0, 1.0, 20.0);
  ASSERT_EQ(c.points.size(), 4u);
  EXPECT_DOUBLE_EQ(c.points.front().t_norm, 0.25);
  EXPECT_DOUBLE_EQ(c.points.back().t_norm, 1.0);
  EXPECT_DOUBLE_EQ(c.points.front().ratio, 1.0);
  EXPECT_DOUBLE_EQ(*c.first_prediction_t_norm, 0.25);
  EXPECT_NEAR(eval::eot(c), 0.25, 1e-12);
}

TEST(ErrorCurve, RejectsNonPositiveLabels) {
  model::PredictionTrace t;
  t.entries.push_back({5.0, 1.0, 0, 0.0, 0.0});
  EXPECT_THROW(eval::error_curve(t, 1.0, 0.0, 20.0), std::invalid_argument);
  EXPECT_THROW(eval::error_curve(t, 1.0, -1.0, 20.0), std::invalid_argument);
  EXPECT_THROW(eval::error_curve(t, 1.0, 1.0, 0.0), std::invalid_argument);
}

TEST(Baseline, PredictsMeanTrainingLabel) {
  const eval::ConstantPredictor b({2.0, 4.0});
  EXPECT_DOUBLE_EQ(b.value(), 3.0);
  const auto t = b.trace({5.0, 10.0}, 5.5);
  ASSERT_EQ(t.entries.size(), 2u);
  const auto exact = eval::error_curve(t, 5.5, 3.0, 10.0);
  EXPECT_NEAR(eval::eot(exact), 0.5, 1e-12);  // only the no-prediction interval [0, 0.5)
  const auto c = eval::error_curve(b.trace({0.0, 10.0}, 5.5), 5.5, 3.0, 10.0);
  EXPECT_NEAR(eval::eot(c), 0.0, 1e-12);
  const auto d = eval::error_curve(b.trace({0.0, 10.0}, 5.5), 5.5, 1.5, 10.0);
  EXPECT_NEAR(c.points.front().ratio, 1.0, 1e-12);
  EXPECT_NEAR(d.points.front().ratio, 2.0, 1e-12);
  EXPECT_NEAR(eval::eot(d), 1.0, 1e-12);
  EXPECT_THROW(eval::ConstantPredictor({}), std::invalid_argument);
}

TEST(DetectionLatency, SustainedPredictionAfterOnset) {
  // onset at 20 ms; chunks end at 5, 10, ...
  const auto t = class_trace({0, 0, 0, 0, 1, 0, 1, 1, 1, 1});
  // chunk ending 25 flickers, first sustained run starts at chunk ending 35.
  EXPECT_DOUBLE_EQ(*eval::detection_latency(t, 20.0, 1, 2), 15.0);
  EXPECT_DOUBLE_EQ(*eval::detection_latency(t, 20.0, 1, 1), 5.0);
  EXPECT_FALSE(eval::detection_latency(t, 20.0, 1, 5).has_value());
  EXPECT_FALSE(eval::detection_latency(class_trace({0, 0, 0, 1}), 0.0, 1, 2).has_value());
  EXPECT_THROW(eval::detection_latency(t, 20.0, 1, 0), std::invalid_argument);
}

TEST(DetectionLatency, IgnoresPredictionsBeforeEvent) {
  const auto t = class_trace({1, 1, 1, 0, 0, 1, 1});
  EXPECT_DOUBLE_EQ(*eval::detection_latency(t, 15.0, 1, 2), 15.0);
  EXPECT_DOUBLE_EQ(*eval::detection_latency(t, 15.0, 0, 2), 5.0);
}

TEST(Summary, PerStrengthMeans) {
  const auto s = eval::summarize({{1.5, 0.2}, {1.5, 0.4}, {3.0, 0.6}});
  EXPECT_EQ(s.sequences, 3);
  EXPECT_NEAR(s.eot, 0.4, 1e-12);
  EXPECT_NEAR(s.per_strength.at(1.5), 0.3, 1e-12);
  EXPECT_EQ(s.per_strength_count.at(1.5), 2);
  EXPECT_NEAR(s.per_strength.at(3.0), 0.6, 1e-12);
}

TEST(Trend, CountsDecreasingPairs) {
  EXPECT_EQ(eval::trend_violations({0.1, 0.2, 0.3}), 0);
  EXPECT_EQ(eval::trend_violations({0.1, 0.1, 0.3}), 0);
  EXPECT_EQ(eval::trend_violations({0.3, 0.2, 0.4}), 1);
  EXPECT_EQ(eval::trend_violations({0.3, 0.2, 0.1}), 2);
}

TEST(Plot, SvgAndCsvCarryTheSameData) {
  const fs::path dir = temp_dir("plot");
  eval::PlotSpec spec{"t", "x", "y", {{"a", {0.0, 1.0, 2.0}, {1.0, 0.5, 0.25}}, {"b", {0.0, 2.0}, {2.0, 3.0}}}, 1.0};
  eval::write_plot(spec, dir / "fig.svg");
  const auto svg = read_lines(dir / "fig.svg");
  ASSERT_FALSE(svg.empty());
  std::string all;
  for (const auto& l : svg) all += l;
  EXPECT_NE(all.find("<svg"), std::string::npos);
  EXPECT_NE(all.find("</svg>"), std::string::npos);
  EXPECT_NE(all.find(">a<"), std::string::npos);
  EXPECT_NE(all.find(">b<"), std::string::npos);
  const auto csv = read_lines(dir / "fig.csv");
  ASSERT_EQ(csv.size(), 6u);
  EXPECT_EQ(csv[0], "series,x,y");
  EXPECT_EQ(csv[1], "a,0,1");
  EXPECT_EQ(csv[3], "a,2,0.25");
  EXPECT_EQ(csv[5], "b,2,3");
}

TEST(Plot, EmptySeriesStillRenders) {
  const std::string svg = eval::render_svg({"empty", "x", "y", {}, std::nullopt});
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

TEST(ExperimentConfig, DefaultsAndHeadFollowTask) {
  const auto c = eval::experiment_config_from_json(json{{"task", "presence"}, {"dataset", {{"task", "presence"}}}});
  EXPECT_EQ(c.model.head, model::Head::kClassification);
  const auto r = eval::experiment_config_from_json(json{{"task", "convergence_time"}});
  EXPECT_EQ(r.model.head, model::Head::kRegression);
  EXPECT_EQ(eval::to_json(eval::experiment_config_from_json(eval::to_json(r))), eval::to_json(r));
}

TEST(ExperimentConfig, ErrorsNameTheField) {
  try {
    eval::experiment_config_from_json(json{{"seed", "x"}});
    FAIL();
  } catch (const data::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("experiment.seed"), std::string::npos);
  }
  EXPECT_THROW(eval::experiment_config_from_json(json{{"bogus", 1}}), data::ConfigError);
  EXPECT_THROW(eval::experiment_config_from_json(json{{"task", "presence"}, {"model", {{"head", "regression"}}},
                                                      {"dataset", {{"task", "presence"}}}}),
               data::ConfigError);
  EXPECT_THROW(eval::experiment_config_from_json(json{{"eval", {{"deviation", "cubic"}}}}), data::ConfigError);
  EXPECT_THROW(eval::experiment_config_from_json(json{{"task", "presence"}, {"dataset", {{"task", "strength"}}}}),
               data::ConfigError);
  EXPECT_THROW(eval::ablation_config_from_json(json{{"ablation", {{"parameter", "ticks"}, {"values", {1}}}}}),
               data::ConfigError);
  const auto a = eval::ablation_config_from_json(json{{"ablation", {{"parameter", "noise_ratio"}, {"values", {0, 0.1}}}}});
  EXPECT_EQ(a.values.size(), 2u);
}

TEST(ExperimentConfig, ShippedConfigsParse) {
  int parsed = 0;
  for (const auto& entry : fs::directory_iterator(EVMAP_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream in(entry.path());
    const json j = json::parse(in);
    SCOPED_TRACE(entry.path().string());
    if (j.contains("ablation"))
      EXPECT_NO_THROW(eval::ablation_config_from_json(j, entry.path().parent_path()));
    else if (j.contains("task") && j.contains("model"))
      EXPECT_NO_THROW(eval::experiment_config_from_json(j, entry.path().parent_path()));
    else
      EXPECT_NO_THROW(data::gen_config_from_json(j));
    ++parsed;
  }
  EXPECT_GE(parsed, 6);
}

namespace {

eval::ExperimentConfig tiny_experiment(data::Task task) {
  eval::ExperimentConfig c;
  c.name = "tiny";
  c.task = task;
  c.seed = 11;
  c.threads = 2;
  c.dataset.task = task == data::Task::kPresence ? data::Task::kPresence : data::Task::kStrength;
  c.dataset.counts = {3, 1, 2};
  c.dataset.dvs.substeps = 3;
  c.model.embed_dim = 8;
  c.model.tokens = 4;
  c.model.memory_rows = 4;
  c.model.memory_cols = 4;
  c.model.fourier_features = 4;
  c.model.chunk_event_cap = 16;
  c.model.head = model::head_for(task);
  c.train.epochs = 2;
  c.train.batch_size = 2;
  return c;
}

}  // namespace

TEST(Experiment, StrengthRunWritesReportAndArtifacts) {
  const fs::path dir = temp_dir("strength");
  const auto cfg = tiny_experiment(data::Task::kStrength);
  const json r = eval::run_experiment(cfg, dir);
  EXPECT_EQ(r.at("task"), "strength");
  EXPECT_GE(r.at("avg_eot").get<double>(), 0.0);
  EXPECT_GE(r.at("baseline_avg_eot").get<double>(), 0.0);
  EXPECT_EQ(r.at("training").size(), 2u);
  EXPECT_EQ(r.at("sequences").size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "error_curves.svg"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "error_curves.csv"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "gate_trace.svg"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "loss.svg"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint" / "model.evck"));
  const std::string id = r.at("sequences")[0].at("id");
  EXPECT_TRUE(fs::exists(dir / "curves" / (id + "_evmap.csv")));
  EXPECT_TRUE(fs::exists(dir / "traces" / (id + ".csv")));

  // A second run reuses the dataset and checkpoint and reproduces the report.
  const auto before = fs::last_write_time(dir / "dataset" / "manifest.json");
  const json again = eval::run_experiment(cfg, dir);
  EXPECT_EQ(again, r);
  EXPECT_EQ(fs::last_write_time(dir / "dataset" / "manifest.json"), before);

  // Extending the epoch budget resumes rather than restarting.
  auto longer = cfg;
  longer.train.epochs = 3;
  longer.dataset_dir = dir / "dataset";
  const json more = eval::run_experiment(longer, dir);
  ASSERT_EQ(more.at("training").size(), 3u);

  auto baseline = cfg;
  baseline.predictor = eval::Predictor::kBaseline;
  baseline.dataset_dir = dir / "dataset";
  const json b = eval::run_experiment(baseline, dir / "baseline");
  EXPECT_DOUBLE_EQ(b.at("avg_eot").get<double>(), r.at("baseline_avg_eot").get<double>());
}

TEST(Experiment, PresenceRunReportsLatency) {
  const fs::path dir = temp_dir("presence");
  const json r = eval::run_experiment(tiny_experiment(data::Task::kPresence), dir);
  const auto& lat = r.at("detection_latency");
  EXPECT_EQ(lat.at("onsets").get<int>(), 2);
  EXPECT_GE(lat.at("timely_fraction").get<double>(), 0.0);
  EXPECT_LE(lat.at("timely_fraction").get<double>(), 1.0);
  EXPECT_TRUE(r.contains("chunk_accuracy"));
  EXPECT_TRUE(fs::exists(dir / "plots" / "gate_trace.csv"));
}

TEST(Experiment, EvaluateOnlyNeedsDatasetAndCheckpoint) {
  auto cfg = tiny_experiment(data::Task::kStrength);
  cfg.dataset_dir = temp_dir("missing") / "nowhere";
  EXPECT_THROW(eval::run_experiment(cfg, temp_dir("missing_out"), {}, eval::RunMode::kEvaluateOnly),
               std::runtime_error);
  EXPECT_FALSE(fs::exists(*cfg.dataset_dir));
}
