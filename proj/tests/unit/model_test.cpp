#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "evmap/ad/gradcheck.hpp"
#include "evmap/data/config_json.hpp"
#include "evmap/model/model.hpp"
#include "evmap/model/train.hpp"

namespace fs = std::filesystem;
using namespace evmap;
using ad::Tensor;
using model::Branch;
using model::Model;
using model::ModelConfig;

namespace {

ModelConfig small_config(model::Head head = model::Head::kRegression) {
  ModelConfig c;
  c.embed_dim = 16;
  c.tokens = 8;
  c.memory_rows = 8;
  c.memory_cols = 8;
  c.fourier_features = 8;
  c.chunk_event_cap = 8;
  c.head = head;
  return c;
}

data::Chunk random_chunk(std::mt19937_64& rng, int index, int n) {
  data::Chunk c;
  c.sequence_id = "toy";
  c.index = index;
  c.t_start_us = static_cast<std::uint64_t>(index) * 5000;
  c.t_end_us = c.t_start_us + 5000;
  for (int i = 0; i < n; ++i) {
    dvs::EventRecord e;
    e.x = static_cast<std::uint16_t>(rng() % 128);
    e.y = static_cast<std::uint16_t>(rng() % 128);
    e.t_us = static_cast<std::uint32_t>(c.t_start_us + rng() % 5000);
    e.polarity = (rng() & 1) ? 1 : -1;
    c.events.push_back(e);
  }
  dvs::sort_events(c.events);
  return c;
}

template <typename T>
ad::BasicTensor<T> random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  ad::BasicTensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

// Step-by-step dense attention in double: softmax(q k^T / sqrt(d)) v.
std::vector<double> attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
  const int n = q.rows();
  const int m = k.rows();
  const int d = q.cols();
  std::vector<double> out(static_cast<std::size_t>(n * v.cols()), 0.0);
  for (int i = 0; i < n; ++i) {
    std::vector<double> logits(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += static_cast<double>(q.at(i, c)) * k.at(j, c);
      logits[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(d));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (auto& l : logits) z += (l = std::exp(l - mx));
    for (int j = 0; j < m; ++j)
      for (int c = 0; c < v.cols(); ++c)
        out[static_cast<std::size_t>(i * v.cols() + c)] += logits[static_cast<std::size_t>(j)] / z * v.at(j, c);
  }
  return out;
}

Tensor project(const Tensor& a, const Tensor& w) {
  Tensor out({a.rows(), w.cols()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < w.cols(); ++j) {
      double s = 0.0;
      for (int k = 0; k < a.cols(); ++k) s += static_cast<double>(a.at(i, k)) * w.at(k, j);
      out.at(i, j) = static_cast<float>(s);
    }
  return out;
}

void set_param(Model& m, const std::string& name, float v) { m.params().get(name).mutable_value().fill(v); }

}  // namespace

TEST(Embed, RawFeatureContract) {
  data::Chunk c;
  c.index = 3;
  c.t_start_us = 15000;
  c.t_end_us = 20000;
  c.events = {{64, 32, 15000, 1}, {64, 32, 19999, 1}, {64, 32, 19999, -1}};
  const auto raw = model::raw_event_features<double>(c, 40, 128, 128);
  EXPECT_DOUBLE_EQ(raw.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(raw.at(0, 1), 0.25);
  EXPECT_DOUBLE_EQ(raw.at(0, 3), 0.0);
  EXPECT_NEAR(raw.at(1, 3), 1.0, 1e-3);
  EXPECT_DOUBLE_EQ(raw.at(0, 4), 3.0 / 40.0);
  for (int k : {0, 1, 3, 4}) EXPECT_EQ(raw.at(1, k), raw.at(2, k));
  EXPECT_NE(raw.at(1, 2), raw.at(2, 2));
}

TEST(Embed, IdenticalEventsGiveIdenticalRows) {
  Model m(small_config(), 1);
  data::Chunk c;
  c.t_end_us = 5000;
  c.events = {{5, 6, 100, 1}, {5, 6, 100, 1}, {9, 2, 300, -1}};
  const auto pi = m.embed(c, 1).value();
  ASSERT_EQ(pi.rows(), 3);
  ASSERT_EQ(pi.cols(), 16);
  for (int j = 0; j < pi.cols(); ++j) EXPECT_EQ(pi.at(0, j), pi.at(1, j));
}

TEST(Attention, SingleKeyReturnsItsValue) {
  std::mt19937_64 rng(2);
  const auto q = ad::constant(random_tensor<float>({3, 4}, rng));
  const auto k = ad::constant(random_tensor<float>({1, 4}, rng));
  const auto v = ad::constant(random_tensor<float>({1, 5}, rng));
  const auto out = model::attention(q, k, v).value();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_EQ(out.at(i, j), v.value().at(0, j));
}

TEST(Encode, SingleEventSelfAttentionIsValueProjection) {
  Model m(small_config(), 4);
  data::Chunk c;
  c.t_end_us = 5000;
  c.events = {{10, 20, 30, 1}};
  const auto pi = m.embed(c, 1);
  const auto v = project(pi.value(), m.params().get("encode.Wv").value());
  const auto q = ad::matmul(pi, m.params().get("encode.Wq"));
  const auto k = ad::matmul(pi, m.params().get("encode.Wk"));
  const auto mixed = model::attention(q, k, ad::constant(v)).value();
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_FLOAT_EQ(mixed[i], v[i]);
}

TEST(Encode, EmptyChunkGivesZeros) {
  Model m(small_config(), 4);
  const auto x = m.encode(ad::constant(Tensor({0, 16})));
  ASSERT_EQ(x.shape(), (ad::Shape{8, 8}));
  for (float v : x.value().values()) EXPECT_EQ(v, 0.0f);
}

TEST(Encode, PermutationInvariant) {
  Model m(small_config(), 5);
  std::mt19937_64 rng(6);
  auto c = random_chunk(rng, 0, 8);
  const auto x = m.encode(m.embed(c, 1)).value();
  std::shuffle(c.events.begin(), c.events.end(), rng);
  EXPECT_EQ(m.encode(m.embed(c, 1)).value(), x);
}

TEST(Read, ZeroMemoryRetrievesZero) {
  Model m(small_config(), 7);
  std::mt19937_64 rng(1);
  const auto x = ad::constant(random_tensor<float>({8, 8}, rng));
  const auto r = m.read(x, ad::constant(Tensor({8, 8})), Branch::kShort).value();
  for (float v : r.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Read, IdenticalRowsRetrieveTheirProjection) {
  Model m(small_config(), 7);
  std::mt19937_64 rng(1);
  const auto x = ad::constant(random_tensor<float>({8, 8}, rng));
  const auto row = random_tensor<float>({1, 8}, rng);
  Tensor mem({8, 8});
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) mem.at(i, j) = row.at(0, j);
  const auto r = m.read(x, ad::constant(mem), Branch::kLong).value();
  const auto proj = project(row, m.params().get("read_l.Wv").value());
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) EXPECT_NEAR(r.at(i, j), proj.at(0, j), 1e-6);
}

TEST(Read, MatchesDenseOracle) {
  Model m(small_config(), 8);
  std::mt19937_64 rng(3);
  const auto x = random_tensor<float>({8, 8}, rng);
  const auto mem = random_tensor<float>({8, 8}, rng);
  for (Branch b : {Branch::kShort, Branch::kLong}) {
    const std::string pre = b == Branch::kShort ? "read_s." : "read_l.";
    const auto r = m.read(ad::constant(x), ad::constant(mem), b).value();
    const auto oracle = attention_oracle(project(x, m.params().get(pre + "Wq").value()),
                                         project(mem, m.params().get(pre + "Wk").value()),
                                         project(mem, m.params().get(pre + "Wv").value()));
    for (std::size_t i = 0; i < r.size(); ++i) EXPECT_NEAR(r[i], oracle[i], 1e-5);
  }
}

TEST(Write, ZeroUpdateKeepsMemory) {
  Model m(small_config(), 9);
  std::mt19937_64 rng(4);
  const auto mem = random_tensor<float>({8, 8}, rng);
  EXPECT_EQ(m.write(ad::constant(mem), ad::constant(Tensor({8, 8})), Branch::kShort).value(), mem);
}

TEST(Write, ZeroMemoryTakesMeanValueRow) {
  Model m(small_config(), 9);
  std::mt19937_64 rng(4);
  const auto upd = random_tensor<float>({8, 8}, rng);
  const auto out = m.write(ad::constant(Tensor({8, 8})), ad::constant(upd), Branch::kLong).value();
  const auto v = project(upd, m.params().get("write_l.Wv").value());
  for (int j = 0; j < 8; ++j) {
    double mean = 0.0;
    for (int i = 0; i < 8; ++i) mean += v.at(i, j) / 8.0;
    for (int i = 0; i < 8; ++i) EXPECT_NEAR(out.at(i, j), mean, 1e-6);
  }
}

TEST(Write, MatchesDenseOracle) {
  Model m(small_config(), 10);
  std::mt19937_64 rng(5);
  const auto mem = random_tensor<float>({8, 8}, rng);
  const auto upd = random_tensor<float>({8, 8}, rng);
  const auto out = m.write(ad::constant(mem), ad::constant(upd), Branch::kShort).value();
  const auto oracle = attention_oracle(project(mem, m.params().get("write_s.Wq").value()),
                                       project(upd, m.params().get("write_s.Wk").value()),
                                       project(upd, m.params().get("write_s.Wv").value()));
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], mem[i] + oracle[i], 1e-5);
}

TEST(Update, ClosedGateKeepsPreviousMemory) {
  Model m(small_config(), 11);
  for (const char* b : {"update_s.", "update_l."}) {
    set_param(m, std::string(b) + "W_x", -1000.0f);
    set_param(m, std::string(b) + "W_m", -1000.0f);
  }
  std::mt19937_64 rng(6);
  const auto x = ad::constant(random_tensor<float>({8, 8}, rng, 0.1, 1.0));
  const auto sm = ad::constant(random_tensor<float>({8, 8}, rng, 0.1, 1.0));
  const auto lm = ad::constant(random_tensor<float>({8, 8}, rng, 0.1, 1.0));
  const auto u = m.update(x, sm, lm);
  EXPECT_EQ(u.sm.value(), sm.value());
  EXPECT_EQ(u.lm.value(), lm.value());
}

TEST(Update, OpenGateTakesCandidate) {
  Model m(small_config(), 11);
  for (const char* b : {"update_s.", "update_l."}) {
    set_param(m, std::string(b) + "W_x", 1000.0f);
    set_param(m, std::string(b) + "W_m", 1000.0f);
  }
  std::mt19937_64 rng(6);
  const auto x = ad::constant(random_tensor<float>({8, 8}, rng, 0.1, 1.0));
  const auto sm = ad::constant(random_tensor<float>({8, 8}, rng, 0.1, 1.0));
  const auto lm = ad::constant(random_tensor<float>({8, 8}, rng, 0.1, 1.0));
  const auto u = m.update(x, sm, lm);
  EXPECT_EQ(u.sm.value(), u.cand_s.value());
  EXPECT_EQ(u.lm.value(), u.cand_l.value());
}

TEST(Update, GatesReadShortTermMemoryByDefault) {
  std::mt19937_64 rng(12);
  const auto x = ad::constant(random_tensor<float>({8, 8}, rng));
  const auto sm = ad::constant(random_tensor<float>({8, 8}, rng));
  const auto lm1 = ad::constant(random_tensor<float>({8, 8}, rng));
  const auto lm2 = ad::constant(random_tensor<float>({8, 8}, rng));
  Model m(small_config(), 13);
  EXPECT_EQ(m.update(x, sm, lm1).sigma_l.value(), m.update(x, sm, lm2).sigma_l.value());
  auto cfg = small_config();
  cfg.long_gates_use_lm = true;
  Model alt(cfg, 13);
  EXPECT_NE(alt.update(x, sm, lm1).sigma_l.value(), alt.update(x, sm, lm2).sigma_l.value());
}

TEST(Update, GateSandwichOnRandomPasses) {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 100; ++trial) {
    Model m(small_config(), static_cast<std::uint64_t>(trial));
    const auto x = ad::constant(random_tensor<float>({8, 8}, rng, -2, 2));
    const auto sm = ad::constant(random_tensor<float>({8, 8}, rng, -2, 2));
    const auto lm = ad::constant(random_tensor<float>({8, 8}, rng, -2, 2));
    const auto u = m.update(x, sm, lm);
    auto check = [](const Tensor& prev, const Tensor& cand, const Tensor& sigma, const Tensor& out) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_GT(sigma[i], 0.0f);
        EXPECT_LT(sigma[i], 1.0f);
        EXPECT_GE(out[i], std::min(prev[i], cand[i]));
        EXPECT_LE(out[i], std::max(prev[i], cand[i]));
      }
    };
    check(sm.value(), u.cand_s.value(), u.sigma_s.value(), u.sm.value());
    check(lm.value(), u.cand_l.value(), u.sigma_l.value(), u.lm.value());
  }
}

TEST(Predict, EqualMemoriesIgnoreGates) {
  Model m(small_config(), 15);
  std::mt19937_64 rng(7);
  const auto mem = ad::constant(random_tensor<float>({8, 8}, rng));
  const auto a = m.predict(mem, mem, ad::constant(random_tensor<float>({8, 8}, rng, 0, 1)),
                           ad::constant(random_tensor<float>({8, 8}, rng, 0, 1)));
  const auto b = m.predict(mem, mem, ad::constant(random_tensor<float>({8, 8}, rng, 0, 1)),
                           ad::constant(random_tensor<float>({8, 8}, rng, 0, 1)));
  EXPECT_EQ(a.value(), b.value());
}

TEST(Predict, EqualGatesAverageMemories) {
  Model m(small_config(), 16);
  std::mt19937_64 rng(8);
  const auto sm = random_tensor<float>({8, 8}, rng);
  const auto lm = random_tensor<float>({8, 8}, rng);
  const auto sigma = ad::constant(random_tensor<float>({8, 8}, rng, 0, 1));
  Tensor avg({8, 8});
  for (std::size_t i = 0; i < avg.size(); ++i) avg[i] = 0.5f * (sm[i] + lm[i]);
  const auto y = m.predict(ad::constant(sm), ad::constant(lm), sigma, sigma).value();
  const auto y_avg = m.predict(ad::constant(avg), ad::constant(avg), sigma, sigma).value();
  EXPECT_NEAR(y[0], y_avg[0], 1e-5);
}

TEST(Predict, ZeroWeightsReturnBias) {
  Model m(small_config(model::Head::kClassification), 17);
  set_param(m, "head.W", 0.0f);
  m.params().get("head.b").mutable_value() = Tensor({1, 2}, std::vector<float>{0.25f, -1.5f});
  std::mt19937_64 rng(9);
  const auto y = m.predict(ad::constant(random_tensor<float>({8, 8}, rng)), ad::constant(random_tensor<float>({8, 8}, rng)),
                           ad::constant(random_tensor<float>({8, 8}, rng, 0, 1)),
                           ad::constant(random_tensor<float>({8, 8}, rng, 0, 1)))
                     .value();
  EXPECT_EQ(y[0], 0.25f);
  EXPECT_EQ(y[1], -1.5f);
}

TEST(Forward, TraceContract) {
  Model m(small_config(), 18);
  std::mt19937_64 rng(10);
  std::vector<data::Chunk> one{random_chunk(rng, 0, 5)};
  EXPECT_EQ(m.trace(one).entries.size(), 1u);

  std::vector<data::Chunk> chunks;
  for (int k = 0; k < 6; ++k) chunks.push_back(random_chunk(rng, k, k == 2 ? 0 : 8));
  const auto a = m.trace(chunks);
  const auto b = m.trace(chunks);
  ASSERT_EQ(a.entries.size(), 6u);
  for (std::size_t k = 0; k < a.entries.size(); ++k) {
    EXPECT_EQ(a.entries[k].y_pred, b.entries[k].y_pred);
    EXPECT_GT(a.entries[k].sigma_s_mean, 0.0);
    EXPECT_LT(a.entries[k].sigma_s_mean, 1.0);
    EXPECT_GT(a.entries[k].sigma_l_mean, 0.0);
    EXPECT_LT(a.entries[k].sigma_l_mean, 1.0);
    EXPECT_DOUBLE_EQ(a.entries[k].chunk_end_ms, 5.0 * static_cast<double>(k + 1));
  }
}

TEST(Forward, ShufflingEventsLeavesTraceBitwiseUnchanged) {
  Model m(small_config(), 19);
  std::mt19937_64 rng(11);
  std::vector<data::Chunk> chunks;
  for (int k = 0; k < 4; ++k) chunks.push_back(random_chunk(rng, k, 8));
  const auto a = m.trace(chunks);
  for (auto& c : chunks) std::shuffle(c.events.begin(), c.events.end(), rng);
  const auto b = m.trace(chunks);
  for (std::size_t k = 0; k < a.entries.size(); ++k) {
    EXPECT_EQ(a.entries[k].y_pred, b.entries[k].y_pred);
    EXPECT_EQ(a.entries[k].sigma_s_mean, b.entries[k].sigma_s_mean);
    EXPECT_EQ(a.entries[k].sigma_l_mean, b.entries[k].sigma_l_mean);
  }
}

TEST(GradCheck, EndToEndFloat64) {
  model::BasicModel<double> m(small_config(), 20);
  std::mt19937_64 rng(12);
  model::Sample s;
  s.id = "toy";
  s.chunks = {random_chunk(rng, 0, 8), random_chunk(rng, 1, 8)};
  s.target = 0.6;
  auto& store = m.params();
  const auto result = ad::gradient_check<double>(
      store.params(), store.names(), [&] { return model::sequence_loss(m, s, data::Task::kStrength); }, 1e-3, 1e-3);
  EXPECT_EQ(result.checked, store.count());
  EXPECT_LE(result.max_relative_error, 1e-3) << result.worst.parameter << "[" << result.worst.index << "] analytic "
                                             << result.worst.analytic << " numeric " << result.worst.numeric;
}

TEST(GradCheck, ClassificationHeadFloat64) {
  model::BasicModel<double> m(small_config(model::Head::kClassification), 21);
  std::mt19937_64 rng(13);
  model::Sample s;
  s.id = "toy";
  s.chunks = {random_chunk(rng, 0, 6), random_chunk(rng, 1, 7)};
  s.flags = {0, 1};
  auto& store = m.params();
  const auto result = ad::gradient_check<double>(
      store.params(), store.names(), [&] { return model::sequence_loss(m, s, data::Task::kPresence); }, 1e-3, 1e-3);
  EXPECT_LE(result.max_relative_error, 1e-3) << result.worst.parameter;
}

namespace {

std::vector<model::Sample> toy_samples(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<model::Sample> out;
  for (int i = 0; i < n; ++i) {
    model::Sample s;
    s.id = "toy" + std::to_string(i);
    for (int k = 0; k < 3; ++k) s.chunks.push_back(random_chunk(rng, k, 6));
    s.label = 1.5 + i;
    s.scale = model::kStrengthScale;
    s.target = s.label / s.scale;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST(Train, LossFiniteAndDecreasing) {
  Model m(small_config(), 22);
  model::TrainConfig tc;
  tc.epochs = 30;
  tc.batch_size = 2;
  tc.lr.base = 3e-3;
  tc.lr.every_epochs = 1000;
  model::Trainer trainer(m, data::Task::kStrength, tc);
  const auto samples = toy_samples(4, 1);
  const auto stats = trainer.fit(samples, &samples);
  ASSERT_EQ(stats.size(), 30u);
  for (const auto& s : stats) {
    EXPECT_TRUE(std::isfinite(s.train_loss));
    ASSERT_TRUE(s.val_loss.has_value());
    EXPECT_TRUE(std::isfinite(*s.val_loss));
  }
  EXPECT_LT(stats.back().val_loss.value(), stats.front().val_loss.value());
}

TEST(Train, HeadTaskMismatchThrows) {
  Model m(small_config(model::Head::kRegression), 23);
  EXPECT_THROW(model::Trainer(m, data::Task::kPresence, {}), std::invalid_argument);
}

TEST(Train, ResumeReproducesNextEpoch) {
  const fs::path dir = fs::temp_directory_path() / "evmap_model_test_resume";
  fs::remove_all(dir);
  const auto samples = toy_samples(3, 2);
  model::TrainConfig tc;
  tc.batch_size = 2;
  tc.seed = 5;

  Model a(small_config(), 24);
  model::Trainer ta(a, data::Task::kStrength, tc);
  ta.run_epoch(samples);
  ta.run_epoch(samples);
  ta.save(dir);
  const auto next = ta.run_epoch(samples);

  Model b(small_config(), 999);
  model::Trainer tb(b, data::Task::kStrength, tc);
  tb.resume(dir);
  EXPECT_EQ(tb.epochs_done(), 2);
  const auto resumed = tb.run_epoch(samples);
  EXPECT_EQ(resumed, next);
  for (std::size_t k = 0; k < a.params().params().size(); ++k)
    EXPECT_EQ(a.params().params()[k].value(), b.params().params()[k].value()) << a.params().names()[k];
  fs::remove_all(dir);
}

TEST(Train, LoadModelRestoresConfigAndWeights) {
  const fs::path dir = fs::temp_directory_path() / "evmap_model_test_load";
  fs::remove_all(dir);
  Model a(small_config(model::Head::kClassification), 25);
  model::Trainer t(a, data::Task::kPresence, {});
  t.save(dir);
  const Model b = model::load_model(dir / "model.evck");
  EXPECT_EQ(model::to_json(b.config()), model::to_json(a.config()));
  for (std::size_t k = 0; k < a.params().params().size(); ++k)
    EXPECT_EQ(a.params().params()[k].value(), b.params().params()[k].value());
  fs::remove_all(dir);
}

TEST(Train, TraceCsvColumns) {
  model::PredictionTrace trace;
  trace.entries.push_back({5.0, 0.5, -1, 0.25, 0.75});
  const fs::path path = fs::temp_directory_path() / "evmap_model_trace.csv";
  model::write_trace_csv(trace, 5.5, path);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_EQ(header, "chunk_end_ms,y_pred,sigma_S_mean,sigma_L_mean");
  EXPECT_EQ(row, "5,2.75,0.25,0.75");
  fs::remove(path);
}

TEST(Config, JsonRoundTripAndValidation) {
  const auto j = model::to_json(small_config());
  EXPECT_EQ(model::to_json(model::model_config_from_json(j)), j);
  auto bad = j;
  bad["tokens"] = 4;
  EXPECT_THROW(model::model_config_from_json(bad), data::ConfigError);
  bad = j;
  bad["heads"] = 2;
  EXPECT_THROW(model::model_config_from_json(bad), data::ConfigError);
}
