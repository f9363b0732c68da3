#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "evmap/flock/flock.hpp"

namespace evmap::render {

struct IntensityFrame {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, width * height
  int tick = 0;
  int substep = 0;

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
  friend bool operator==(const IntensityFrame&, const IntensityFrame&) = default;
};

enum class AgentShape { kTriangle, kDot };

struct RenderConfig {
  int width = 128;
  int height = 128;
  std::uint8_t background_intensity = 0;
  std::uint8_t agent_intensity = 255;
  double agent_length = 5.0;  // pixels
  AgentShape shape = AgentShape::kTriangle;

  void validate() const;
};

IntensityFrame render(const flock::FlockWorld& world, const RenderConfig& cfg);

// World state between two ticks. Positions follow the shortest toroidal path
// when the world wraps; headings follow the shortest arc.
flock::FlockWorld interpolate(const flock::FlockWorld& from, const flock::FlockWorld& to,
                              double alpha);

// ticks * substeps frames; frame (t, s) shows tick t advanced by s / substeps
// toward tick t + 1. The last tick is held.
std::vector<IntensityFrame> render_sequence(const flock::Trajectory& traj, const RenderConfig& cfg,
                                            int substeps);

// Streaming form of render_sequence, for pipelines that cannot hold every frame.
void for_each_frame(const flock::Trajectory& traj, const RenderConfig& cfg, int substeps,
                    const std::function<void(const IntensityFrame&)>& sink);

// Binary PGM (P5).
void write_pgm(const IntensityFrame& frame, const std::filesystem::path& path);

}  // namespace evmap::render
