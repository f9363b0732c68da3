#pragma once

#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>
#include <string>

#include "evmap/dvs/events.hpp"
#include "evmap/flock/flock.hpp"
#include "evmap/render/render.hpp"

namespace evmap::data {

// Configuration problem; the message starts with the offending field path.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Reads optional fields from a JSON object, rejecting unknown keys and bad types.
class FieldReader {
 public:
  FieldReader(const nlohmann::json& j, std::string path);

  template <typename T>
  bool read(const std::string& key, T& out) {
    auto it = object_.find(key);
    if (it == object_.end()) return false;
    seen_.insert(key);
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
    return true;
  }

  // Nested object, or nullptr when absent.
  const nlohmann::json* child(const std::string& key);
  std::string path(const std::string& key) const { return path_ + "." + key; }
  // Throws ConfigError for keys that were never read.
  void finish() const;

 private:
  const nlohmann::json& object_;
  std::string path_;
  std::set<std::string> seen_;
};

nlohmann::json to_json(const flock::NetLogoParams& p);
nlohmann::json to_json(const flock::ForceParams& p);
nlohmann::json to_json(const render::RenderConfig& c);
nlohmann::json to_json(const dvs::DvsConfig& c);

void read_into(const nlohmann::json& j, const std::string& path, flock::NetLogoParams& p);
void read_into(const nlohmann::json& j, const std::string& path, flock::ForceParams& p);
void read_into(const nlohmann::json& j, const std::string& path, render::RenderConfig& c);
void read_into(const nlohmann::json& j, const std::string& path, dvs::DvsConfig& c);

std::string noise_mode_name(dvs::NoiseRatioMode mode);
dvs::NoiseRatioMode parse_noise_mode(const std::string& name, const std::string& path);

}  // namespace evmap::data
