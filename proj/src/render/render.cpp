#include "evmap/render/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace evmap::render {

using flock::FlockWorld;
using flock::Vec2;

void RenderConfig::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("render: frame size must be positive");
  if (agent_intensity == background_intensity)
    throw std::invalid_argument("render: agent and background intensity must differ");
  if (!(agent_length > 0)) throw std::invalid_argument("render: agent_length must be positive");
}

namespace {

class Canvas {
 public:
  Canvas(IntensityFrame& frame, bool wrap, std::uint8_t value)
      : frame_(frame), wrap_(wrap), value_(value) {}

  void plot(int x, int y) {
    if (wrap_) {
      x = ((x % frame_.width) + frame_.width) % frame_.width;
      y = ((y % frame_.height) + frame_.height) % frame_.height;
    } else if (x < 0 || y < 0 || x >= frame_.width || y >= frame_.height) {
      return;
    }
    // Every agent shares one intensity, so overlap compositing is plain assignment.
    frame_.pixels[static_cast<std::size_t>(y * frame_.width + x)] = value_;
  }

 private:
  IntensityFrame& frame_;
  bool wrap_;
  std::uint8_t value_;
};

double edge(Vec2 a, Vec2 b, Vec2 p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); }

// Fills pixels whose centres fall inside the triangle.
void fill_triangle(Canvas& canvas, Vec2 a, Vec2 b, Vec2 c) {
  const int x0 = static_cast<int>(std::floor(std::min({a.x, b.x, c.x})));
  const int x1 = static_cast<int>(std::ceil(std::max({a.x, b.x, c.x})));
  const int y0 = static_cast<int>(std::floor(std::min({a.y, b.y, c.y})));
  const int y1 = static_cast<int>(std::ceil(std::max({a.y, b.y, c.y})));
  const double area = edge(a, b, c);
  if (area == 0.0) return;
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const Vec2 p{x + 0.5, y + 0.5};
      const double w0 = edge(b, c, p) / area;
      const double w1 = edge(c, a, p) / area;
      const double w2 = edge(a, b, p) / area;
      if (w0 >= 0 && w1 >= 0 && w2 >= 0) canvas.plot(x, y);
    }
  }
}

void fill_disc(Canvas& canvas, Vec2 centre, double radius) {
  const int x0 = static_cast<int>(std::floor(centre.x - radius));
  const int x1 = static_cast<int>(std::ceil(centre.x + radius));
  const int y0 = static_cast<int>(std::floor(centre.y - radius));
  const int y1 = static_cast<int>(std::ceil(centre.y + radius));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - centre.x;
      const double dy = y + 0.5 - centre.y;
      if (dx * dx + dy * dy <= radius * radius) canvas.plot(x, y);
    }
  }
}

}  // namespace

IntensityFrame render(const FlockWorld& world, const RenderConfig& cfg) {
  cfg.validate();
  IntensityFrame frame;
  frame.width = cfg.width;
  frame.height = cfg.height;
  frame.pixels.assign(static_cast<std::size_t>(cfg.width * cfg.height), cfg.background_intensity);

  Canvas canvas(frame, world.toroidal, cfg.agent_intensity);
  const double sx = cfg.width / world.world_size;
  const double sy = cfg.height / world.world_size;
  const double len = cfg.agent_length;

  for (const auto& agent : world.agents) {
    const Vec2 centre{agent.position.x * sx, agent.position.y * sy};
    if (cfg.shape == AgentShape::kDot) {
      fill_disc(canvas, centre, len / 4.0);
      continue;
    }
    const Vec2 u{std::cos(agent.heading), std::sin(agent.heading)};
    const Vec2 n{-u.y, u.x};
    const Vec2 apex = centre + u * (len / 2.0);
    const Vec2 base = centre - u * (len / 2.0);
    const double half_width = 0.35 * len;
    fill_triangle(canvas, apex, base + n * half_width, base - n * half_width);
  }

  return frame;
}

FlockWorld interpolate(const FlockWorld& from, const FlockWorld& to, double alpha) {
  if (from.agents.size() != to.agents.size())
    throw std::invalid_argument("interpolate: population mismatch");
  FlockWorld out = from;
  for (std::size_t i = 0; i < from.agents.size(); ++i) {
    const auto& a = from.agents[i];
    const auto& b = to.agents[i];
    const Vec2 d = flock::world_delta(from, a.position, b.position);
    Vec2 p = a.position + d * alpha;
    if (from.toroidal) {
      auto wrap = [s = from.world_size](double v) {
        v = std::fmod(v, s);
        if (v < 0) v += s;
        return v >= s ? 0.0 : v;
      };
      p = {wrap(p.x), wrap(p.y)};
    }
    out.agents[i].position = p;
    out.agents[i].heading =
        flock::wrap_angle(a.heading + alpha * flock::angle_difference(b.heading, a.heading));
    out.agents[i].speed = a.speed + alpha * (b.speed - a.speed);
  }
  return out;
}

void for_each_frame(const flock::Trajectory& traj, const RenderConfig& cfg, int substeps,
                    const std::function<void(const IntensityFrame&)>& sink) {
  if (substeps < 1) throw std::invalid_argument("render_sequence: substeps must be >= 1");
  for (int t = 0; t < traj.ticks; ++t) {
    const FlockWorld cur = traj.world_at(t);
    const bool has_next = t + 1 < traj.ticks;
    const FlockWorld next = has_next ? traj.world_at(t + 1) : cur;
    for (int s = 0; s < substeps; ++s) {
      const double alpha = static_cast<double>(s) / substeps;
      IntensityFrame f = render(s == 0 ? cur : interpolate(cur, next, alpha), cfg);
      f.tick = t;
      f.substep = s;
      sink(f);
    }
  }
}

std::vector<IntensityFrame> render_sequence(const flock::Trajectory& traj, const RenderConfig& cfg,
                                            int substeps) {
  std::vector<IntensityFrame> frames;
  frames.reserve(static_cast<std::size_t>(traj.ticks) * static_cast<std::size_t>(std::max(substeps, 1)));
  for_each_frame(traj, cfg, substeps, [&](const IntensityFrame& f) { frames.push_back(f); });
  return frames;
}

void write_pgm(const IntensityFrame& frame, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path.string());
  out << "P5\n" << frame.width << ' ' << frame.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(frame.pixels.data()),
            static_cast<std::streamsize>(frame.pixels.size()));
}

}  // namespace evmap::render
