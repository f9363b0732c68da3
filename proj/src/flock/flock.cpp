#include "evmap/flock/flock.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace evmap::flock {

double norm(Vec2 v) { return std::hypot(v.x, v.y); }

Vec2 AgentState::velocity() const {
  return {speed * std::cos(heading), speed * std::sin(heading)};
}

void NetLogoParams::validate() const {
  if (population <= 10) throw std::invalid_argument("netlogo: population must exceed 10");
  if (vision <= 0) throw std::invalid_argument("netlogo: vision must be positive");
  if (minimum_separation < 0) throw std::invalid_argument("netlogo: minimum_separation must be >= 0");
  if (max_align_turn < 0 || max_cohere_turn < 0 || max_separate_turn < 0)
    throw std::invalid_argument("netlogo: turn limits must be >= 0");
  if (speed_scale <= 0) throw std::invalid_argument("netlogo: speed_scale must be positive");
  if (world_size <= 0) throw std::invalid_argument("netlogo: world_size must be positive");
}

void ForceParams::validate() const {
  if (!(inner_radius > 0 && inner_radius < outer_radius))
    throw std::invalid_argument("force: require 0 < inner_radius < outer_radius");
  if (cohesion_strength < 0 || separation_strength < 0 || alignment_strength < 0 ||
      border_strength < 0)
    throw std::invalid_argument("force: strengths must be >= 0");
  if (population <= 10) throw std::invalid_argument("force: population must exceed 10");
  if (speed <= 0) throw std::invalid_argument("force: speed must be positive");
  if (world_size <= 0) throw std::invalid_argument("force: world_size must be positive");
}

InteractionSchedule::InteractionSchedule(std::vector<ScheduleSegment> segments)
    : segments_(std::move(segments)) {
  int expected = 0;
  for (const auto& s : segments_) {
    if (s.start_tick != expected || s.end_tick <= s.start_tick)
      throw std::invalid_argument("schedule: segments must be contiguous and non-empty from tick 0");
    expected = s.end_tick;
  }
}

InteractionSchedule InteractionSchedule::always_on(int max_ticks) {
  return InteractionSchedule({{0, max_ticks, true}});
}

InteractionSchedule InteractionSchedule::always_off(int max_ticks) {
  return InteractionSchedule({{0, max_ticks, false}});
}

InteractionSchedule InteractionSchedule::off_on_off_window(int max_ticks) {
  const int onset = max_ticks / 4;
  const int offset = (3 * max_ticks) / 4;
  return InteractionSchedule({{0, onset, false}, {onset, offset, true}, {offset, max_ticks, false}});
}

bool InteractionSchedule::interaction_on(int tick) const {
  for (const auto& s : segments_)
    if (tick >= s.start_tick && tick < s.end_tick) return s.interaction_on;
  return segments_.empty() ? false : segments_.back().interaction_on;
}

FlockWorld Trajectory::world_at(int tick) const {
  FlockWorld w;
  w.world_size = world_size;
  w.toroidal = toroidal;
  w.agents = states.at(static_cast<std::size_t>(tick));
  return w;
}

double wrap_angle(double radians) {
  double a = std::fmod(radians, kTwoPi);
  if (a < 0) a += kTwoPi;
  if (a >= kTwoPi) a = 0.0;  // fmod(-tiny) + 2pi can round up to 2pi
  return a;
}

double angle_difference(double to, double from) {
  double d = std::fmod(to - from, kTwoPi);
  if (d > kPi) d -= kTwoPi;
  if (d <= -kPi) d += kTwoPi;
  return d;
}

double deg_to_rad(double degrees) { return degrees * kPi / 180.0; }

static double wrap_coordinate(double v, double size) {
  double r = std::fmod(v, size);
  if (r < 0) r += size;
  if (r >= size) r = 0.0;
  return r;
}

static double clamp_coordinate(double v, double size) {
  if (v < 0) return 0.0;
  if (v >= size) return std::nextafter(size, 0.0);
  return v;
}

Vec2 toroidal_delta(Vec2 from, Vec2 to, double size) {
  auto axis = [size](double d) {
    if (d >= size || d <= -size) d = std::fmod(d, size);
    if (d > size / 2) d -= size;
    if (d < -size / 2) d += size;
    return d;
  };
  return {axis(to.x - from.x), axis(to.y - from.y)};
}

Vec2 world_delta(const FlockWorld& world, Vec2 from, Vec2 to) {
  return world.toroidal ? toroidal_delta(from, to, world.world_size) : to - from;
}

double world_distance(const FlockWorld& world, Vec2 a, Vec2 b) {
  return norm(world_delta(world, a, b));
}

std::vector<std::size_t> find_flockmates(const FlockWorld& world, std::size_t agent_index,
                                         double vision) {
  if (agent_index >= world.agents.size())
    throw std::out_of_range("find_flockmates: agent index " + std::to_string(agent_index) +
                            " out of range for population " +
                            std::to_string(world.agents.size()));
  std::vector<std::size_t> mates;
  const Vec2 p = world.agents[agent_index].position;
  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    if (j == agent_index) continue;
    if (world_distance(world, p, world.agents[j].position) <= vision) mates.push_back(j);
  }
  return mates;
}

namespace {

// Apply `turn`, clamped to +-max_turn.
double turn_at_most(double heading, double turn, double max_turn) {
  if (std::abs(turn) > max_turn) turn = turn > 0 ? max_turn : -max_turn;
  return heading + turn;
}

// Uniform cell grid over a toroidal world; cells are at least `radius` wide so
// every neighbour within `radius` lies in the 3x3 block around an agent's cell.
class NeighborGrid {
 public:
  NeighborGrid(const FlockWorld& world, double radius) : world_(world), radius_(radius) {
    cells_per_axis_ = static_cast<int>(std::floor(world.world_size / radius));
    if (!world.toroidal || cells_per_axis_ < 3) {
      cells_per_axis_ = 0;
      return;
    }
    cell_size_ = world.world_size / cells_per_axis_;
    buckets_.resize(static_cast<std::size_t>(cells_per_axis_ * cells_per_axis_));
    for (std::size_t i = 0; i < world.agents.size(); ++i) {
      const auto [cx, cy] = cell_of(world.agents[i].position);
      buckets_[static_cast<std::size_t>(cy * cells_per_axis_ + cx)].push_back(i);
    }
  }

  // Same result and order as find_flockmates.
  void neighbors(std::size_t i, std::vector<std::size_t>& out) const {
    out.clear();
    if (cells_per_axis_ == 0) {
      out = find_flockmates(world_, i, radius_);
      return;
    }
    const Vec2 p = world_.agents[i].position;
    const auto [cx, cy] = cell_of(p);
    const double radius2 = radius_ * radius_;
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int x = (cx + dx + cells_per_axis_) % cells_per_axis_;
        const int y = (cy + dy + cells_per_axis_) % cells_per_axis_;
        for (std::size_t j : buckets_[static_cast<std::size_t>(y * cells_per_axis_ + x)]) {
          if (j == i) continue;
          const Vec2 d = world_delta(world_, p, world_.agents[j].position);
          if (d.x * d.x + d.y * d.y <= radius2) out.push_back(j);
        }
      }
    }
    std::sort(out.begin(), out.end());
  }

 private:
  std::pair<int, int> cell_of(Vec2 p) const {
    auto c = [this](double v) {
      return std::min(static_cast<int>(v / cell_size_), cells_per_axis_ - 1);
    };
    return {c(p.x), c(p.y)};
  }

  const FlockWorld& world_;
  double radius_;
  int cells_per_axis_ = 0;
  double cell_size_ = 0.0;
  std::vector<std::vector<std::size_t>> buckets_;
};

double netlogo_heading(const FlockWorld& world, std::size_t i, const NetLogoParams& p,
                       const std::vector<std::size_t>& mates, const std::vector<Vec2>& unit) {
  const AgentState& self = world.agents[i];
  if (mates.empty()) return self.heading;

  std::size_t nearest = mates.front();
  double nearest_d2 = std::numeric_limits<double>::infinity();
  double sx = 0.0;
  double sy = 0.0;
  Vec2 offset;
  for (std::size_t j : mates) {
    const Vec2 d = world_delta(world, self.position, world.agents[j].position);
    const double d2 = d.x * d.x + d.y * d.y;
    if (d2 < nearest_d2) {
      nearest_d2 = d2;
      nearest = j;
    }
    sx += unit[j].x;
    sy += unit[j].y;
    offset += d;
  }

  double heading = self.heading;
  if (nearest_d2 < p.minimum_separation * p.minimum_separation) {
    // Turn away from the nearest neighbour's heading.
    const double turn = angle_difference(heading, world.agents[nearest].heading);
    return turn_at_most(heading, turn, deg_to_rad(p.max_separate_turn));
  }

  if (sx != 0.0 || sy != 0.0) {
    const double mean_heading = std::atan2(sy, sx);
    heading = turn_at_most(heading, angle_difference(mean_heading, heading),
                           deg_to_rad(p.max_align_turn));
  }
  if (offset.x != 0.0 || offset.y != 0.0) {
    const double bearing = std::atan2(offset.y, offset.x);
    heading = turn_at_most(heading, angle_difference(bearing, heading),
                           deg_to_rad(p.max_cohere_turn));
  }
  return heading;
}

}  // namespace

FlockWorld netlogo_step(const FlockWorld& world, const NetLogoParams& params) {
  FlockWorld next = world;
  const bool interacting =
      params.max_align_turn > 0 || params.max_cohere_turn > 0 || params.max_separate_turn > 0;
  if (interacting) {
    const NeighborGrid grid(world, params.vision);
    std::vector<Vec2> unit(world.agents.size());
    for (std::size_t i = 0; i < unit.size(); ++i)
      unit[i] = {std::cos(world.agents[i].heading), std::sin(world.agents[i].heading)};
    std::vector<std::size_t> mates;
    for (std::size_t i = 0; i < world.agents.size(); ++i) {
      grid.neighbors(i, mates);
      next.agents[i].heading = wrap_angle(netlogo_heading(world, i, params, mates, unit));
    }
  }
  for (auto& a : next.agents) {
    const Vec2 v = a.velocity();
    a.position = {wrap_coordinate(a.position.x + v.x, world.world_size),
                  wrap_coordinate(a.position.y + v.y, world.world_size)};
  }
  return next;
}

ForceTerms force_terms(const FlockWorld& world, std::size_t i, const ForceParams& p) {
  if (i >= world.agents.size()) throw std::out_of_range("force_terms: agent index out of range");
  ForceTerms t;
  const Vec2 pi = world.agents[i].position;
  std::size_t outer_count = 0;
  Vec2 vel_sum;
  Vec2 offset_sum;
  for (std::size_t j = 0; j < world.agents.size(); ++j) {
    if (j == i) continue;
    const Vec2 d = world_delta(world, pi, world.agents[j].position);
    const double dist2 = d.x * d.x + d.y * d.y;
    const double dist = std::sqrt(dist2);
    if (dist <= p.outer_radius) {
      ++outer_count;
      vel_sum += world.agents[j].velocity();
      offset_sum += d;
    }
    // Coincident agents are skipped: the repulsion is singular at zero distance.
    if (dist <= p.inner_radius && dist2 > 0.0) t.separation -= d * (1.0 / dist2);
  }
  if (outer_count > 0) {
    const double inv = 1.0 / static_cast<double>(outer_count);
    t.alignment = vel_sum * inv;
    t.cohesion = offset_sum * inv;
  }
  if (!world.toroidal) {
    auto axis = [&](double v) {
      if (v < p.border_distance) return p.border_strength;
      if (v > world.world_size - p.border_distance) return -p.border_strength;
      return 0.0;
    };
    t.border = {axis(pi.x), axis(pi.y)};
  }
  return t;
}

FlockWorld force_step(const FlockWorld& world, const ForceParams& params, double dt) {
  if (!(dt > 0)) throw std::invalid_argument("force_step: dt must be positive");
  FlockWorld next = world;
  for (std::size_t i = 0; i < world.agents.size(); ++i) {
    const AgentState& a = world.agents[i];
    const ForceTerms t = force_terms(world, i, params);
    const Vec2 v = a.velocity();
    const Vec2 accel = params.alignment_strength * t.alignment +
                       params.cohesion_strength * t.cohesion +
                       params.separation_strength * t.separation + t.border;
    const Vec2 nv = v + accel * dt;
    AgentState& out = next.agents[i];
    if (nv.x != 0.0 || nv.y != 0.0) out.heading = wrap_angle(std::atan2(nv.y, nv.x));
    // Explicit Euler: position advances with the pre-update velocity.
    const Vec2 np = a.position + v * dt;
    if (world.toroidal) {
      out.position = {wrap_coordinate(np.x, world.world_size), wrap_coordinate(np.y, world.world_size)};
    } else {
      out.position = {clamp_coordinate(np.x, world.world_size),
                      clamp_coordinate(np.y, world.world_size)};
    }
  }
  return next;
}

namespace {

struct RulePopulation {
  int population;
  double world_size;
  double speed;
  bool toroidal;
};

RulePopulation describe(const RuleParams& rules) {
  return std::visit(
      [](const auto& p) -> RulePopulation {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, NetLogoParams>) {
          return {p.population, p.world_size, p.speed_scale, true};
        } else {
          return {p.population, p.world_size, p.speed, false};
        }
      },
      rules);
}

}  // namespace

FlockWorld initial_world(const RuleParams& rules, std::uint64_t seed) {
  std::visit([](const auto& p) { p.validate(); }, rules);
  const RulePopulation d = describe(rules);
  std::mt19937_64 rng(seed);
  FlockWorld w;
  w.world_size = d.world_size;
  w.toroidal = d.toroidal;
  w.agents.resize(static_cast<std::size_t>(d.population));
  for (auto& a : w.agents) {
    a.position.x = uniform01(rng) * d.world_size;
    a.position.y = uniform01(rng) * d.world_size;
    a.heading = uniform01(rng) * kTwoPi;
    a.speed = d.speed;
  }
  return w;
}

Trajectory simulate(const RuleParams& rules, const InteractionSchedule& schedule,
                    std::uint64_t seed, int max_ticks) {
  if (schedule.empty()) throw std::invalid_argument("simulate: empty interaction schedule");
  if (max_ticks < 1) throw std::invalid_argument("simulate: max_ticks must be >= 1");

  FlockWorld world = initial_world(rules, seed);
  Trajectory traj;
  traj.ticks = max_ticks;
  traj.params = rules;
  traj.seed = seed;
  traj.world_size = world.world_size;
  traj.toroidal = world.toroidal;
  traj.states.reserve(static_cast<std::size_t>(max_ticks));
  traj.states.push_back(world.agents);

  for (int t = 0; t + 1 < max_ticks; ++t) {
    const bool on = schedule.interaction_on(t);
    if (const auto* nl = std::get_if<NetLogoParams>(&rules)) {
      NetLogoParams p = *nl;
      if (!on) p.max_align_turn = p.max_cohere_turn = p.max_separate_turn = 0.0;
      world = netlogo_step(world, p);
    } else {
      ForceParams p = std::get<ForceParams>(rules);
      if (!on) p.alignment_strength = p.cohesion_strength = p.separation_strength = 0.0;
      world = force_step(world, p, 1.0);
    }
    traj.states.push_back(world.agents);
  }
  return traj;
}

DispersionStats heading_stats(const std::vector<double>& headings) {
  if (headings.size() < 2) throw std::invalid_argument("heading_stats: need at least 2 headings");
  auto normalized_std = [&](auto fn) {
    std::vector<double> v(headings.size());
    std::transform(headings.begin(), headings.end(), v.begin(), fn);
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double min = *lo;
    const double range = *hi - *lo;
    if (range <= 0.0) return 0.0;
    double mean = 0.0;
    for (double& x : v) {
      x = (x - min) / range;
      mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / static_cast<double>(v.size()));
  };
  return {normalized_std([](double h) { return std::sin(h); }),
          normalized_std([](double h) { return std::cos(h); })};
}

std::vector<DispersionStats> dispersion_series(const Trajectory& traj) {
  std::vector<DispersionStats> series;
  series.reserve(traj.states.size());
  std::vector<double> headings;
  for (const auto& tick : traj.states) {
    headings.clear();
    for (const auto& a : tick) headings.push_back(a.heading);
    series.push_back(heading_stats(headings));
  }
  return series;
}

std::optional<int> convergence_time_from_series(const std::vector<DispersionStats>& series,
                                                double threshold) {
  std::optional<int> tc;
  for (int t = static_cast<int>(series.size()) - 1; t >= 0; --t) {
    const auto& s = series[static_cast<std::size_t>(t)];
    if (s.std_sin_norm < threshold && s.std_cos_norm < threshold) {
      tc = t;
    } else {
      break;
    }
  }
  return tc;
}

std::optional<int> convergence_time(const Trajectory& traj, double threshold) {
  if (traj.states.empty()) return std::nullopt;
  return convergence_time_from_series(dispersion_series(traj), threshold);
}

std::string trajectory_to_jsonl(const Trajectory& traj) {
  std::ostringstream os;
  os.precision(17);
  for (const auto& tick : traj.states) {
    os << '[';
    for (std::size_t i = 0; i < tick.size(); ++i) {
      if (i) os << ',';
      os << '[' << tick[i].position.x << ',' << tick[i].position.y << ',' << tick[i].heading << ']';
    }
    os << "]\n";
  }
  return os.str();
}

}  // namespace evmap::flock
