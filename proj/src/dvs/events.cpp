#include "evmap/dvs/events.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>
#include <tuple>

namespace evmap::dvs {

bool event_before(const EventRecord& a, const EventRecord& b) {
  return std::tie(a.t_us, a.y, a.x, a.polarity) < std::tie(b.t_us, b.y, b.x, b.polarity);
}

void sort_events(std::vector<EventRecord>& events) {
  std::sort(events.begin(), events.end(), event_before);
}

void DvsConfig::validate() const {
  if (!(contrast_threshold > 0)) throw std::invalid_argument("dvs: contrast_threshold must be > 0");
  if (!(linlog_knee > 0)) throw std::invalid_argument("dvs: linlog_knee must be > 0");
  if (!(frame_period_us > 0)) throw std::invalid_argument("dvs: frame_period_us must be > 0");
  if (substeps < 1) throw std::invalid_argument("dvs: substeps must be >= 1");
}

double log_intensity(double v, double knee) {
  if (v < knee) return v / knee;
  return 1.0 + std::log(v / knee);
}

EventSynthesizer::EventSynthesizer(int width, int height, const DvsConfig& cfg)
    : width_(width), height_(height), cfg_(cfg), lut_(256) {
  cfg_.validate();
  if (width <= 0 || height <= 0 || width > 65535 || height > 65535)
    throw std::invalid_argument("dvs: sensor size out of range");
  for (int v = 0; v < 256; ++v) lut_[static_cast<std::size_t>(v)] = log_intensity(v, cfg_.linlog_knee);
}

void EventSynthesizer::push(const render::IntensityFrame& frame, double t_us) {
  if (frame.width != width_ || frame.height != height_)
    throw std::invalid_argument("synthesize: frame size " + std::to_string(frame.width) + "x" +
                                std::to_string(frame.height) + " does not match sensor " +
                                std::to_string(width_) + "x" + std::to_string(height_));
  if (!primed_) {
    previous_ = frame.pixels;
    reference_.resize(previous_.size());
    for (std::size_t i = 0; i < previous_.size(); ++i) reference_[i] = lut_[previous_[i]];
    previous_t_us_ = t_us;
    primed_ = true;
    return;
  }
  if (!(t_us > previous_t_us_)) throw std::invalid_argument("synthesize: frame times must increase");

  const double threshold = cfg_.contrast_threshold;
  const double dt = t_us - previous_t_us_;
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * width_ + x);
      const std::uint8_t now = frame.pixels[i];
      if (now == previous_[i]) continue;
      const double from = lut_[previous_[i]];
      const double to = lut_[now];
      const double slope = (to - from) / dt;
      double& ref = reference_[i];
      const std::int8_t polarity = to > from ? 1 : -1;
      const double step = polarity * threshold;
      // Crossing levels move monotonically toward `to`.
      while ((polarity > 0 && ref + step <= to) || (polarity < 0 && ref + step >= to)) {
        ref += step;
        const double t = previous_t_us_ + (ref - from) / slope;
        events_.push_back({static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                           static_cast<std::uint32_t>(std::floor(t)), polarity});
      }
    }
  }
  previous_ = frame.pixels;
  previous_t_us_ = t_us;
}

EventStream EventSynthesizer::finish(std::uint64_t duration_us) {
  EventStream s;
  s.width = width_;
  s.height = height_;
  s.duration_us = duration_us;
  s.events = std::move(events_);
  events_.clear();
  sort_events(s.events);
  return s;
}

EventStream synthesize(const std::vector<render::IntensityFrame>& frames, const DvsConfig& cfg) {
  if (frames.size() < 2) throw std::invalid_argument("synthesize: need at least 2 frames");
  EventSynthesizer synth(frames.front().width, frames.front().height, cfg);
  const double dt = cfg.frame_period_us / cfg.substeps;
  for (std::size_t f = 0; f < frames.size(); ++f) synth.push(frames[f], static_cast<double>(f) * dt);
  const double periods = static_cast<double>(frames.size()) / cfg.substeps;
  return synth.finish(static_cast<std::uint64_t>(std::llround(periods * cfg.frame_period_us)));
}

std::size_t noise_event_count(std::size_t clean, double ratio, NoiseRatioMode mode) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw std::invalid_argument("inject_noise: ratio must be in [0, 1)");
  const double c = static_cast<double>(clean);
  const double n = mode == NoiseRatioMode::kFractionOfTotal ? ratio * c / (1.0 - ratio) : ratio * c;
  return static_cast<std::size_t>(std::llround(n));
}

EventStream inject_noise(const EventStream& stream, double noise_ratio, std::uint64_t seed,
                         NoiseRatioMode mode) {
  const std::size_t count = noise_event_count(stream.events.size(), noise_ratio, mode);
  EventStream out = stream;
  if (count == 0) return out;
  if (stream.duration_us == 0) throw std::invalid_argument("inject_noise: zero-duration stream");
  std::mt19937_64 rng(seed);
  auto draw = [&rng](std::uint64_t n) {
    return static_cast<std::uint64_t>(flock::uniform01(rng) * static_cast<double>(n));
  };
  out.events.reserve(out.events.size() + count);
  for (std::size_t k = 0; k < count; ++k) {
    EventRecord e;
    e.x = static_cast<std::uint16_t>(draw(static_cast<std::uint64_t>(stream.width)));
    e.y = static_cast<std::uint16_t>(draw(static_cast<std::uint64_t>(stream.height)));
    e.t_us = static_cast<std::uint32_t>(draw(stream.duration_us));
    e.polarity = (rng() >> 63) ? std::int8_t{1} : std::int8_t{-1};
    out.events.push_back(e);
  }
  sort_events(out.events);
  return out;
}

render::IntensityFrame aggregate_to_frame(const EventStream& stream, std::uint64_t window_us,
                                          std::uint64_t t0_us) {
  if (window_us == 0) throw std::invalid_argument("aggregate_to_frame: window must be positive");
  std::vector<int> net(static_cast<std::size_t>(stream.width * stream.height), 0);
  const auto first = std::lower_bound(
      stream.events.begin(), stream.events.end(), t0_us,
      [](const EventRecord& e, std::uint64_t t) { return e.t_us < t; });
  for (auto it = first; it != stream.events.end() && it->t_us < t0_us + window_us; ++it)
    net[static_cast<std::size_t>(it->y * stream.width + it->x)] += it->polarity;

  render::IntensityFrame f;
  f.width = stream.width;
  f.height = stream.height;
  f.pixels.resize(net.size());
  for (std::size_t i = 0; i < net.size(); ++i)
    f.pixels[i] = static_cast<std::uint8_t>(std::clamp(128 + kAggregateStep * net[i], 0, 255));
  return f;
}

}  // namespace evmap::dvs
