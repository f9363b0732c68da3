#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "evmap/data/config_json.hpp"
#include "evmap/data/dataset.hpp"
#include "evmap/dvs/evmp.hpp"

namespace fs = std::filesystem;
using namespace evmap;
using data::Chunk;
using data::GenConfig;
using dvs::EventRecord;
using dvs::EventStream;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("evmap_data_test_" + name);
  fs::remove_all(p);
  return p;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Small, fast configuration; a handful of substeps keeps synthesis cheap.
GenConfig small_config(data::Task task) {
  GenConfig c;
  c.task = task;
  c.counts = {3, 1, 2};
  c.dvs.substeps = 3;
  return c;
}

EventStream stream_with(std::vector<std::uint32_t> times, std::uint64_t duration_us) {
  EventStream s;
  s.duration_us = duration_us;
  for (auto t : times) s.events.push_back({1, 2, t, 1});
  return s;
}

}  // namespace

TEST(ChunkEvents, TwoHundredMillisecondsGivesFortyChunks) {
  const auto chunks = data::chunk_events(stream_with({0, 100, 199999}, 200000), 5.0, "s");
  ASSERT_EQ(chunks.size(), 40u);
  EXPECT_EQ(chunks.front().events.size(), 2u);
  EXPECT_EQ(chunks.back().events.size(), 1u);
  EXPECT_EQ(chunks[39].t_start_us, 195000u);
  EXPECT_EQ(chunks[39].t_end_us, 200000u);
}

TEST(ChunkEvents, EmptyStreamKeepsEmptyChunks) {
  const auto chunks = data::chunk_events(stream_with({}, 200000), 5.0);
  ASSERT_EQ(chunks.size(), 40u);
  for (const auto& c : chunks) EXPECT_TRUE(c.events.empty());
}

TEST(ChunkEvents, BoundaryEventBelongsToNextChunk) {
  const auto chunks = data::chunk_events(stream_with({4999, 5000}, 10000), 5.0);
  ASSERT_EQ(chunks.size(), 2u);
  ASSERT_EQ(chunks[0].events.size(), 1u);
  EXPECT_EQ(chunks[0].events[0].t_us, 4999u);
  ASSERT_EQ(chunks[1].events.size(), 1u);
  EXPECT_EQ(chunks[1].events[0].t_us, 5000u);
}

TEST(ChunkEvents, NonPositiveLengthThrows) {
  EXPECT_THROW(data::chunk_events(stream_with({}, 1000), 0.0), std::invalid_argument);
  EXPECT_THROW(data::chunk_events(stream_with({}, 1000), -5.0), std::invalid_argument);
}

TEST(SubsampleChunk, SmallChunkUnchanged) {
  Chunk c;
  c.sequence_id = "a";
  for (std::uint32_t i = 0; i < 100; ++i) c.events.push_back({static_cast<std::uint16_t>(i), 0, i, 1});
  EXPECT_EQ(data::subsample_chunk(c, 2048, 1), c);
}

TEST(SubsampleChunk, CapIsExactSortedSubset) {
  Chunk c;
  c.sequence_id = "a";
  c.index = 3;
  for (std::uint32_t i = 0; i < 5000; ++i)
    c.events.push_back({static_cast<std::uint16_t>(i % 128), static_cast<std::uint16_t>(i / 128), i, 1});
  const Chunk s = data::subsample_chunk(c, 2048, 9);
  ASSERT_EQ(s.events.size(), 2048u);
  std::set<std::uint32_t> input;
  for (const auto& e : c.events) input.insert(e.t_us);
  std::set<std::uint32_t> seen;
  for (std::size_t i = 0; i < s.events.size(); ++i) {
    EXPECT_TRUE(input.count(s.events[i].t_us));
    EXPECT_TRUE(seen.insert(s.events[i].t_us).second) << "duplicate event";
    if (i > 0) {
      EXPECT_LT(s.events[i - 1].t_us, s.events[i].t_us);
    }
  }
  EXPECT_EQ(data::subsample_chunk(c, 2048, 9), s);
  EXPECT_NE(data::subsample_chunk(c, 2048, 10).events, s.events);
  Chunk other = c;
  other.index = 4;
  EXPECT_NE(data::subsample_chunk(other, 2048, 9).events, s.events);
  EXPECT_THROW(data::subsample_chunk(c, 0, 9), std::invalid_argument);
}

TEST(DeriveSeed, IndependentAcrossIndicesAndAttempts) {
  std::set<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 100; ++i)
    for (std::uint64_t a = 0; a < 11; ++a) seeds.insert(data::derive_seed(5, i, a));
  EXPECT_EQ(seeds.size(), 1100u);
  // Retrying sequence 3 does not alter what sequence 4 uses.
  EXPECT_EQ(data::derive_seed(5, 4, 0), data::derive_seed(5, 4, 0));
  EXPECT_NE(data::derive_seed(5, 4, 0), data::derive_seed(6, 4, 0));
}

TEST(GenConfig, JsonRoundTripAndErrors) {
  GenConfig c = small_config(data::Task::kPresence);
  c.noise_ratio = 0.1;
  const auto j = data::to_json(c);
  const GenConfig back = data::gen_config_from_json(j);
  EXPECT_EQ(data::to_json(back), j);
  EXPECT_EQ(data::config_hash(j), data::config_hash(data::to_json(back)));

  auto bad = j;
  bad["speed_scale"] = "fast";
  try {
    data::gen_config_from_json(bad);
    FAIL() << "expected ConfigError";
  } catch (const data::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("speed_scale"), std::string::npos);
  }
  bad = j;
  bad["netlogo"]["visionn"] = 3;
  EXPECT_THROW(data::gen_config_from_json(bad), data::ConfigError);
  bad = j;
  bad["noise_ratio"] = 1.5;
  EXPECT_THROW(data::gen_config_from_json(bad), data::ConfigError);
  bad = j;
  bad["task"] = "steering";
  EXPECT_THROW(data::gen_config_from_json(bad), data::ConfigError);
}

TEST(Sequence, WriteReadRoundTrip) {
  const fs::path root = temp_dir("roundtrip");
  fs::create_directories(root);
  const auto g = data::generate_sequence(small_config(data::Task::kPresence), 11, 0);
  data::write_sequence(g.record, g.stream, root);
  const auto loaded = data::read_sequence(root, g.record.id);
  EXPECT_EQ(loaded.stream, g.stream);
  EXPECT_EQ(loaded.record, g.record);
  fs::remove_all(root);
}

TEST(Sequence, CorruptMagicNamesFormat) {
  const fs::path root = temp_dir("magic");
  fs::create_directories(root);
  const auto g = data::generate_sequence(small_config(data::Task::kPresence), 11, 0);
  data::write_sequence(g.record, g.stream, root);
  auto bytes = slurp(root / g.record.event_file);
  bytes[0] = 'X';
  std::ofstream(root / g.record.event_file, std::ios::binary | std::ios::trunc)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  try {
    data::read_sequence(root, g.record.id);
    FAIL() << "expected FormatError";
  } catch (const dvs::FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("EVMP"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(Sequence, TruncatedFileReportsCounts) {
  const fs::path root = temp_dir("trunc");
  fs::create_directories(root);
  const auto g = data::generate_sequence(small_config(data::Task::kPresence), 11, 0);
  ASSERT_GT(g.stream.events.size(), 2u);
  data::write_sequence(g.record, g.stream, root);
  const fs::path file = root / g.record.event_file;
  const std::size_t half = g.stream.events.size() / 2;
  fs::resize_file(file, dvs::kEvmpHeaderSize + half * dvs::kEvmpRecordSize);
  try {
    data::read_sequence(root, g.record.id);
    FAIL() << "expected FormatError";
  } catch (const dvs::FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(std::to_string(g.stream.events.size())), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(half)), std::string::npos) << msg;
  }
  fs::remove_all(root);
}

TEST(Sequence, PresenceFlagsFollowSchedule) {
  const auto g = data::generate_sequence(small_config(data::Task::kPresence), 3, 1);
  const auto& flags = g.record.labels.interaction_per_chunk;
  ASSERT_EQ(flags.size(), 40u);
  for (int k = 0; k < 40; ++k) EXPECT_EQ(flags[static_cast<std::size_t>(k)], (k >= 10 && k < 30) ? 1 : 0) << k;
  EXPECT_EQ(data::chunk_events(g.stream, 5.0).size(), flags.size());
}

TEST(Sequence, ChunkingIsAPartition) {
  const auto g = data::generate_sequence(small_config(data::Task::kPresence), 3, 2);
  const auto chunks = data::chunk_events(g.stream, 5.0, g.record.id);
  std::vector<EventRecord> joined;
  for (const auto& c : chunks) {
    for (const auto& e : c.events) {
      EXPECT_GE(e.t_us, c.t_start_us);
      EXPECT_LT(e.t_us, c.t_end_us);
    }
    joined.insert(joined.end(), c.events.begin(), c.events.end());
  }
  EXPECT_EQ(joined, g.stream.events);
}

TEST(Sequence, StrengthLabelsMatchResimulation) {
  const GenConfig cfg = small_config(data::Task::kStrength);
  for (int i = 0; i < 2; ++i) {
    const auto g = data::generate_sequence(cfg, 21, i);
    const double s = g.record.labels.interaction_strength;
    EXPECT_GE(s, 1.5);
    EXPECT_LE(s, 5.5);
    ASSERT_TRUE(g.record.labels.convergence_time_ticks.has_value());
    EXPECT_GT(*g.record.labels.convergence_time_ticks, 0);
    EXPECT_EQ(g.record.seed, data::derive_seed(21, static_cast<std::uint64_t>(i),
                                                static_cast<std::uint64_t>(g.record.attempt)));
    const auto traj = data::resimulate(cfg, g.record);
    EXPECT_EQ(flock::convergence_time(traj, cfg.convergence_threshold), g.record.labels.convergence_time_ticks);
    EXPECT_EQ(g.record.rule_params.at("max_align_turn").get<double>(), s);
    EXPECT_DOUBLE_EQ(*g.record.t_c_ms(), *g.record.labels.convergence_time_ticks * 1.0);
  }
}

TEST(Sequence, ExhaustedRetriesThrow) {
  GenConfig cfg = small_config(data::Task::kStrength);
  cfg.convergence_threshold = 1e-6;
  cfg.max_retries = 2;
  std::vector<std::string> log;
  EXPECT_THROW(data::generate_sequence(cfg, 1, 0, [&](const std::string& m) { log.push_back(m); }),
               std::runtime_error);
  EXPECT_EQ(log.size(), 3u);
}

TEST(BuildDataset, DeterministicDisjointSplits) {
  GenConfig cfg = small_config(data::Task::kPresence);
  cfg.noise_ratio = 0.1;
  const fs::path a = temp_dir("build_a");
  const fs::path b = temp_dir("build_b");
  const auto ma = data::build_dataset(cfg, 77, a, 2);
  const auto mb = data::build_dataset(cfg, 77, b, 1);
  EXPECT_EQ(ma.train.size(), 3u);
  EXPECT_EQ(ma.val.size(), 1u);
  EXPECT_EQ(ma.test.size(), 2u);
  std::set<std::string> ids;
  for (const auto* s : {&ma.train, &ma.val, &ma.test}) ids.insert(s->begin(), s->end());
  EXPECT_EQ(ids.size(), 6u);

  EXPECT_EQ(slurp(a / "manifest.json"), slurp(b / "manifest.json"));
  for (const auto& r : ma.records) {
    EXPECT_EQ(slurp(a / r.event_file), slurp(b / r.event_file)) << r.id;
    EXPECT_EQ(slurp(a / (r.id + ".json")), slurp(b / (r.id + ".json"))) << r.id;
  }
  const auto reread = data::read_manifest(a);
  EXPECT_EQ(reread.records, ma.records);
  EXPECT_EQ(reread.config_hash, data::config_hash(data::to_json(cfg)));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(BuildDataset, UnwritableRootThrows) {
  const fs::path file = temp_dir("blocker");
  std::ofstream(file) << "x";
  EXPECT_THROW(data::build_dataset(small_config(data::Task::kPresence), 1, file / "sub"), std::runtime_error);
  fs::remove_all(file);
}
