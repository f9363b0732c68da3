#include "evmap/data/config_json.hpp"

namespace evmap::data {

using nlohmann::json;

FieldReader::FieldReader(const json& j, std::string path) : object_(j), path_(std::move(path)) {
  if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
}

const json* FieldReader::child(const std::string& key) {
  auto it = object_.find(key);
  if (it == object_.end()) return nullptr;
  seen_.insert(key);
  if (!it->is_object()) throw ConfigError(path(key) + ": expected an object");
  return &*it;
}

void FieldReader::finish() const {
  for (auto it = object_.begin(); it != object_.end(); ++it)
    if (!seen_.count(it.key())) throw ConfigError(path_ + "." + it.key() + ": unknown field");
}

json to_json(const flock::NetLogoParams& p) {
  return {{"population", p.population},
          {"vision", p.vision},
          {"minimum_separation", p.minimum_separation},
          {"max_align_turn", p.max_align_turn},
          {"max_cohere_turn", p.max_cohere_turn},
          {"max_separate_turn", p.max_separate_turn},
          {"speed_scale", p.speed_scale},
          {"world_size", p.world_size},
          {"max_ticks", p.max_ticks}};
}

json to_json(const flock::ForceParams& p) {
  return {{"inner_radius", p.inner_radius},
          {"outer_radius", p.outer_radius},
          {"cohesion_strength", p.cohesion_strength},
          {"separation_strength", p.separation_strength},
          {"alignment_strength", p.alignment_strength},
          {"border_strength", p.border_strength},
          {"border_distance", p.border_distance},
          {"population", p.population},
          {"speed", p.speed},
          {"world_size", p.world_size}};
}

json to_json(const render::RenderConfig& c) {
  return {{"width", c.width},
          {"height", c.height},
          {"background_intensity", c.background_intensity},
          {"agent_intensity", c.agent_intensity},
          {"agent_length", c.agent_length},
          {"shape", c.shape == render::AgentShape::kTriangle ? "triangle" : "dot"}};
}

json to_json(const dvs::DvsConfig& c) {
  return {{"contrast_threshold", c.contrast_threshold},
          {"linlog_knee", c.linlog_knee},
          {"frame_period_us", c.frame_period_us},
          {"substeps", c.substeps}};
}

namespace {

template <typename F>
void validated(const std::string& path, F&& validate) {
  try {
    validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace

void read_into(const json& j, const std::string& path, flock::NetLogoParams& p) {
  FieldReader r(j, path);
  r.read("population", p.population);
  r.read("vision", p.vision);
  r.read("minimum_separation", p.minimum_separation);
  r.read("max_align_turn", p.max_align_turn);
  r.read("max_cohere_turn", p.max_cohere_turn);
  r.read("max_separate_turn", p.max_separate_turn);
  r.read("speed_scale", p.speed_scale);
  r.read("world_size", p.world_size);
  r.read("max_ticks", p.max_ticks);
  r.finish();
  validated(path, [&] { p.validate(); });
}

void read_into(const json& j, const std::string& path, flock::ForceParams& p) {
  FieldReader r(j, path);
  r.read("inner_radius", p.inner_radius);
  r.read("outer_radius", p.outer_radius);
  r.read("cohesion_strength", p.cohesion_strength);
  r.read("separation_strength", p.separation_strength);
  r.read("alignment_strength", p.alignment_strength);
  r.read("border_strength", p.border_strength);
  r.read("border_distance", p.border_distance);
  r.read("population", p.population);
  r.read("speed", p.speed);
  r.read("world_size", p.world_size);
  r.finish();
  validated(path, [&] { p.validate(); });
}

void read_into(const json& j, const std::string& path, render::RenderConfig& c) {
  FieldReader r(j, path);
  r.read("width", c.width);
  r.read("height", c.height);
  r.read("background_intensity", c.background_intensity);
  r.read("agent_intensity", c.agent_intensity);
  r.read("agent_length", c.agent_length);
  std::string shape;
  if (r.read("shape", shape)) {
    if (shape == "triangle")
      c.shape = render::AgentShape::kTriangle;
    else if (shape == "dot")
      c.shape = render::AgentShape::kDot;
    else
      throw ConfigError(r.path("shape") + ": expected \"triangle\" or \"dot\"");
  }
  r.finish();
  validated(path, [&] { c.validate(); });
}

void read_into(const json& j, const std::string& path, dvs::DvsConfig& c) {
  FieldReader r(j, path);
  r.read("contrast_threshold", c.contrast_threshold);
  r.read("linlog_knee", c.linlog_knee);
  r.read("frame_period_us", c.frame_period_us);
  r.read("substeps", c.substeps);
  r.finish();
  validated(path, [&] { c.validate(); });
}

std::string noise_mode_name(dvs::NoiseRatioMode mode) {
  return mode == dvs::NoiseRatioMode::kFractionOfTotal ? "fraction_of_total" : "relative_to_clean";
}

dvs::NoiseRatioMode parse_noise_mode(const std::string& name, const std::string& path) {
  if (name == "fraction_of_total") return dvs::NoiseRatioMode::kFractionOfTotal;
  if (name == "relative_to_clean") return dvs::NoiseRatioMode::kRelativeToClean;
  throw ConfigError(path + ": expected \"fraction_of_total\" or \"relative_to_clean\"");
}

}  // namespace evmap::data
