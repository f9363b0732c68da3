#pragma once

#include <cstdint>
#include <vector>

#include "evmap/render/render.hpp"

namespace evmap::dvs {

struct EventRecord {
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint32_t t_us = 0;
  std::int8_t polarity = 1;  // -1 or +1

  friend bool operator==(const EventRecord&, const EventRecord&) = default;
};

// Stream order: time, then row, column and polarity.
bool event_before(const EventRecord& a, const EventRecord& b);

struct EventStream {
  int width = 128;
  int height = 128;
  std::uint64_t duration_us = 0;
  std::vector<EventRecord> events;

  friend bool operator==(const EventStream&, const EventStream&) = default;
};

void sort_events(std::vector<EventRecord>& events);

struct DvsConfig {
  double contrast_threshold = 0.2;  // log-intensity units
  double linlog_knee = 20.0;        // 8-bit intensity
  double frame_period_us = 1000.0;  // one simulation tick
  int substeps = 33;

  void validate() const;
};

// Linear below the knee, logarithmic above; continuous at v == knee.
double log_intensity(double v, double knee);

// Incremental converter. Frames arrive in time order with their timestamps;
// each pixel emits one event per contrast-threshold crossing of its linearly
// interpolated log intensity.
class EventSynthesizer {
 public:
  EventSynthesizer(int width, int height, const DvsConfig& cfg);

  void push(const render::IntensityFrame& frame, double t_us);
  // Events emitted so far, sorted.
  EventStream finish(std::uint64_t duration_us);
  std::size_t pending() const { return events_.size(); }

 private:
  int width_;
  int height_;
  DvsConfig cfg_;
  std::vector<double> lut_;
  std::vector<double> reference_;
  std::vector<std::uint8_t> previous_;
  double previous_t_us_ = 0.0;
  bool primed_ = false;
  std::vector<EventRecord> events_;
};

// Frames are spaced frame_period_us / substeps apart starting at t = 0. The
// stream duration is frames.size() / substeps frame periods.
EventStream synthesize(const std::vector<render::IntensityFrame>& frames, const DvsConfig& cfg);

enum class NoiseRatioMode {
  kFractionOfTotal,   // noisy / (clean + noisy) == ratio
  kRelativeToClean,   // noisy == ratio * clean
};

std::size_t noise_event_count(std::size_t clean, double ratio, NoiseRatioMode mode);

// Adds uniformly distributed events (position, time, polarity) and re-sorts.
EventStream inject_noise(const EventStream& stream, double noise_ratio, std::uint64_t seed,
                         NoiseRatioMode mode = NoiseRatioMode::kFractionOfTotal);

// Visualization frame: mid-gray plus `step` per unit of net polarity in
// [t0_us, t0_us + window_us), clipped to [0, 255].
inline constexpr int kAggregateStep = 32;
render::IntensityFrame aggregate_to_frame(const EventStream& stream, std::uint64_t window_us,
                                          std::uint64_t t0_us);

}  // namespace evmap::dvs
