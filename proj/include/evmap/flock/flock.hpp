#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

namespace evmap::flock {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2& operator+=(Vec2 o) { x += o.x; y += o.y; return *this; }
  Vec2& operator-=(Vec2 o) { x -= o.x; y -= o.y; return *this; }
  Vec2& operator*=(double s) { x *= s; y *= s; return *this; }
  friend Vec2 operator+(Vec2 a, Vec2 b) { return a += b; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return a -= b; }
  friend Vec2 operator*(Vec2 a, double s) { return a *= s; }
  friend Vec2 operator*(double s, Vec2 a) { return a *= s; }
  friend bool operator==(Vec2, Vec2) = default;
};

double norm(Vec2 v);

struct AgentState {
  Vec2 position;
  double heading = 0.0;  // radians, counter-clockwise from +x, in [0, 2pi)
  double speed = 1.0;    // world units per tick

  Vec2 velocity() const;
  friend bool operator==(const AgentState&, const AgentState&) = default;
};

// Plane of agents. Toroidal worlds wrap; non-toroidal worlds clamp positions
// into [0, world_size) and rely on border steering.
struct FlockWorld {
  double world_size = 51.2;
  bool toroidal = true;
  std::vector<AgentState> agents;

  std::size_t population() const { return agents.size(); }
  friend bool operator==(const FlockWorld&, const FlockWorld&) = default;
};

// Turn-limited rules. Turn limits are in degrees per tick.
struct NetLogoParams {
  int population = 100;
  double vision = 5.0;
  double minimum_separation = 0.5;
  double max_align_turn = 5.5;
  double max_cohere_turn = 3.0;
  double max_separate_turn = 1.5;
  double speed_scale = 1.0;
  double world_size = 51.2;
  int max_ticks = 200;

  void validate() const;
};

// Force rules. The world is bounded, with linear border steering inside
// `border_distance` of each wall.
struct ForceParams {
  double inner_radius = 3.0;
  double outer_radius = 10.0;
  double cohesion_strength = 0.005;
  double separation_strength = 0.1;
  double alignment_strength = 0.3;
  double border_strength = 0.5;
  double border_distance = 10.0;
  int population = 100;
  double speed = 1.0;
  double world_size = 51.2;

  void validate() const;
};

using RuleParams = std::variant<NetLogoParams, ForceParams>;

struct ScheduleSegment {
  int start_tick = 0;
  int end_tick = 0;  // exclusive
  bool interaction_on = true;
};

class InteractionSchedule {
 public:
  InteractionSchedule() = default;
  // Throws std::invalid_argument unless the segments tile [0, end) contiguously.
  explicit InteractionSchedule(std::vector<ScheduleSegment> segments);

  static InteractionSchedule always_on(int max_ticks);
  static InteractionSchedule always_off(int max_ticks);
  // off [0, 25%), on [25%, 75%), off [75%, 100%)
  static InteractionSchedule off_on_off_window(int max_ticks);

  bool empty() const { return segments_.empty(); }
  int end_tick() const { return segments_.empty() ? 0 : segments_.back().end_tick; }
  // Ticks past the last segment inherit the last segment's flag.
  bool interaction_on(int tick) const;
  const std::vector<ScheduleSegment>& segments() const { return segments_; }

 private:
  std::vector<ScheduleSegment> segments_;
};

struct Trajectory {
  int ticks = 0;
  std::vector<std::vector<AgentState>> states;  // states[t][agent]
  RuleParams params;
  std::uint64_t seed = 0;
  double world_size = 51.2;
  bool toroidal = true;

  FlockWorld world_at(int tick) const;
};

struct DispersionStats {
  double std_sin_norm = 0.0;
  double std_cos_norm = 0.0;
};

// Angle helpers.
double wrap_angle(double radians);                 // into [0, 2pi)
double angle_difference(double to, double from);   // shortest, in (-pi, pi]
double deg_to_rad(double degrees);

// Minimum-image displacement from `from` to `to` on a torus of side `size`.
Vec2 toroidal_delta(Vec2 from, Vec2 to, double size);
double world_distance(const FlockWorld& world, Vec2 a, Vec2 b);
Vec2 world_delta(const FlockWorld& world, Vec2 from, Vec2 to);

std::vector<std::size_t> find_flockmates(const FlockWorld& world, std::size_t agent_index,
                                         double vision);

FlockWorld netlogo_step(const FlockWorld& world, const NetLogoParams& params);

struct ForceTerms {
  Vec2 alignment;   // mean neighbour velocity
  Vec2 cohesion;    // neighbour centroid minus own position
  Vec2 separation;  // inverse-square repulsion from inner-radius neighbours
  Vec2 border;
};

ForceTerms force_terms(const FlockWorld& world, std::size_t agent_index, const ForceParams& params);
FlockWorld force_step(const FlockWorld& world, const ForceParams& params, double dt);

// Deterministic initial placement: uniform positions, uniform headings.
FlockWorld initial_world(const RuleParams& rules, std::uint64_t seed);

Trajectory simulate(const RuleParams& rules, const InteractionSchedule& schedule,
                    std::uint64_t seed, int max_ticks);

DispersionStats heading_stats(const std::vector<double>& headings);

// Uniformly random headings score about 0.35 on both components, so the
// threshold must sit below that for tick 0 to count as unconverged.
inline constexpr double kDefaultConvergenceThreshold = 0.26;

// Smallest tick t such that both dispersion components stay below `threshold`
// for every tick from t to the end of the trajectory.
std::optional<int> convergence_time(const Trajectory& traj, double threshold);
// Same criterion applied to a precomputed per-tick statistic (max of both components).
std::optional<int> convergence_time_from_series(const std::vector<DispersionStats>& series,
                                                double threshold);
std::vector<DispersionStats> dispersion_series(const Trajectory& traj);

// One tick per line: [[x, y, heading], ...]
std::string trajectory_to_jsonl(const Trajectory& traj);

// Portable uniform double in [0, 1) from a 64-bit engine.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace evmap::flock
