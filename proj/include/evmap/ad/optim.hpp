#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "evmap/ad/autodiff.hpp"

namespace evmap::ad {

// Named, ordered collection of trainable leaves.
template <typename T>
class BasicParameterStore {
 public:
  // Uniform in [-bound, bound]; bound defaults to 1/sqrt(fan_in) with fan_in = rows.
  BasicVar<T>& create(const std::string& name, int rows, int cols, std::mt19937_64& rng, double bound = 0.0);
  BasicVar<T>& create(const std::string& name, BasicTensor<T> init);
  BasicVar<T>& get(const std::string& name);
  const BasicVar<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<BasicVar<T>>& params() { return params_; }
  const std::vector<BasicVar<T>>& params() const { return params_; }
  std::size_t count() const;  // total scalar parameters

  void zero_grad();
  // Scales every gradient so the global L2 norm is at most `max_norm`. Returns the original norm.
  double clip_grad_norm(double max_norm);

  // Copies values from a store with identical names and shapes.
  template <typename U>
  void assign_from(const BasicParameterStore<U>& other) {
    if (other.names() != names_) throw std::invalid_argument("assign_from: parameter names differ");
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (other.params()[k].shape() != params_[k].shape())
        throw std::invalid_argument("assign_from: shape of '" + names_[k] + "' differs");
      params_[k].mutable_value() = other.params()[k].value().template cast<T>();
    }
  }

 private:
  std::vector<std::string> names_;
  std::vector<BasicVar<T>> params_;
  std::map<std::string, std::size_t> index_;
};

using ParameterStore = BasicParameterStore<float>;

extern template class BasicParameterStore<float>;
extern template class BasicParameterStore<double>;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  explicit Adam(ParameterStore& store, AdamConfig cfg = {});
  // Parameters without a gradient buffer are treated as having a zero gradient.
  void step(double lr);
  std::int64_t steps() const { return t_; }
  // Moments and step count; doubles survive the JSON round trip exactly.
  nlohmann::json state() const;
  void load_state(const nlohmann::json& state);

 private:
  ParameterStore& store_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

struct StepSchedule {
  double base = 1e-3;
  int every_epochs = 25;
  double factor = 5.0;
};

// base * factor^-floor(epoch / every_epochs)
double lr_at(int epoch, const StepSchedule& schedule = {});

// Layout: "EVCK" | version u32 | header_len u64 | JSON header | float32 LE payload.
// The header lists parameter names and shapes in store order and the config hash.
// `metadata`, when not null, is stored verbatim in the header.
std::vector<std::uint8_t> encode_checkpoint(const ParameterStore& store, const std::string& config_hash,
                                            const nlohmann::json& metadata = nullptr);
void save_checkpoint(const ParameterStore& store, const std::string& config_hash,
                     const std::filesystem::path& path, const nlohmann::json& metadata = nullptr);
// Loads values into an existing store. Throws if names, shapes, or the hash differ.
void decode_checkpoint(ParameterStore& store, const std::string& config_hash, std::span<const std::uint8_t> bytes);
void load_checkpoint(ParameterStore& store, const std::string& config_hash, const std::filesystem::path& path);
std::string checkpoint_config_hash(const std::filesystem::path& path);
nlohmann::json checkpoint_metadata(const std::filesystem::path& path);

}  // namespace evmap::ad
