#include "evmap/ad/optim.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <stdexcept>

namespace evmap::ad {

template <typename T>
BasicVar<T>& BasicParameterStore<T>::create(const std::string& name, int rows, int cols, std::mt19937_64& rng,
                                            double bound) {
  BasicTensor<T> t({rows, cols});
  if (bound <= 0.0) bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (T& v : t.values()) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    v = static_cast<T>((2.0 * u - 1.0) * bound);
  }
  return create(name, std::move(t));
}

template <typename T>
BasicVar<T>& BasicParameterStore<T>::create(const std::string& name, BasicTensor<T> init) {
  if (index_.count(name)) throw std::invalid_argument("parameter '" + name + "' already exists");
  index_[name] = params_.size();
  names_.push_back(name);
  params_.push_back(parameter(std::move(init)));
  return params_.back();
}

template <typename T>
BasicVar<T>& BasicParameterStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <typename T>
const BasicVar<T>& BasicParameterStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return params_[it->second];
}

template <typename T>
std::size_t BasicParameterStore<T>::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value().size();
  return n;
}

template <typename T>
void BasicParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.mutable_grad() = BasicTensor<T>();
}

template <typename T>
double BasicParameterStore<T>::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (const auto& p : params_)
    for (T g : p.grad().values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<T>(max_norm / norm);
    for (auto& p : params_)
      for (T& g : p.mutable_grad().values()) g *= s;
  }
  return norm;
}

template class BasicParameterStore<float>;
template class BasicParameterStore<double>;

Adam::Adam(ParameterStore& store, AdamConfig cfg) : store_(store), cfg_(cfg) {
  for (const auto& p : store_.params()) {
    m_.emplace_back(p.value().size(), 0.0);
    v_.emplace_back(p.value().size(), 0.0);
  }
}

void Adam::step(double lr) {
  if (m_.size() != store_.params().size()) throw std::logic_error("adam: parameter store changed size");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < store_.params().size(); ++k) {
    Var& p = store_.params()[k];
    const Tensor& g = p.grad();
    if (!g.empty() && g.size() != m_[k].size())
      throw std::invalid_argument("adam: gradient of '" + store_.names()[k] + "' has shape " +
                                  shape_string(g.shape()) + ", parameter has " + shape_string(p.shape()));
    Tensor& w = p.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
      if (m_[k][i] == 0.0) continue;
      const double mhat = m_[k][i] / c1;
      const double vhat = v_[k][i] / c2;
      w[i] = static_cast<float>(w[i] - lr * mhat / (std::sqrt(vhat) + cfg_.epsilon));
    }
  }
}

nlohmann::json Adam::state() const {
  return {{"t", t_}, {"m", m_}, {"v", v_}};
}

void Adam::load_state(const nlohmann::json& state) {
  auto m = state.at("m").get<std::vector<std::vector<double>>>();
  auto v = state.at("v").get<std::vector<std::vector<double>>>();
  if (m.size() != m_.size() || v.size() != v_.size()) throw std::runtime_error("adam: state has a different parameter count");
  for (std::size_t k = 0; k < m_.size(); ++k)
    if (m[k].size() != m_[k].size() || v[k].size() != v_[k].size())
      throw std::runtime_error("adam: state shape differs for '" + store_.names()[k] + "'");
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = state.at("t").get<std::int64_t>();
}

double lr_at(int epoch, const StepSchedule& schedule) {
  if (epoch < 0) throw std::invalid_argument("lr_at: negative epoch");
  if (schedule.every_epochs <= 0) throw std::invalid_argument("lr_at: every_epochs must be positive");
  return schedule.base * std::pow(schedule.factor, -static_cast<double>(epoch / schedule.every_epochs));
}

namespace {

constexpr char kMagic[4] = {'E', 'V', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

std::uint64_t get_le(std::span<const std::uint8_t> in, std::size_t at, int bytes) {
  if (at + static_cast<std::size_t>(bytes) > in.size()) throw std::runtime_error("checkpoint: truncated data");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(in[at + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

struct Parsed {
  nlohmann::json header;
  std::size_t payload_at = 0;
};

Parsed parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic, expected \"EVCK\"");
  if (get_le(bytes, 4, 4) != kVersion) throw std::runtime_error("checkpoint: unsupported version");
  const std::uint64_t len = get_le(bytes, 8, 8);
  if (16 + len > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
  Parsed p;
  p.header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(16 + len));
  p.payload_at = 16 + len;
  return p;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const ParameterStore& store, const std::string& config_hash,
                                            const nlohmann::json& metadata) {
  nlohmann::json header;
  header["config_hash"] = config_hash;
  if (!metadata.is_null()) header["metadata"] = metadata;
  header["parameters"] = nlohmann::json::array();
  for (std::size_t k = 0; k < store.params().size(); ++k)
    header["parameters"].push_back({{"name", store.names()[k]}, {"shape", store.params()[k].shape()}});
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, kVersion, 4);
  put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& p : store.params()) {
    for (float v : p.value().values()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_le(out, bits, 4);
    }
  }
  return out;
}

void save_checkpoint(const ParameterStore& store, const std::string& config_hash,
                     const std::filesystem::path& path, const nlohmann::json& metadata) {
  const auto bytes = encode_checkpoint(store, config_hash, metadata);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

void decode_checkpoint(ParameterStore& store, const std::string& config_hash,
                       std::span<const std::uint8_t> bytes) {
  const Parsed p = parse(bytes);
  const auto stored_hash = p.header.at("config_hash").get<std::string>();
  if (stored_hash != config_hash)
    throw std::runtime_error("checkpoint: config hash mismatch (file " + stored_hash + ", expected " + config_hash +
                             ")");
  const auto& entries = p.header.at("parameters");
  if (entries.size() != store.params().size())
    throw std::runtime_error("checkpoint: parameter count mismatch (file " + std::to_string(entries.size()) +
                             ", model " + std::to_string(store.params().size()) + ")");
  std::size_t at = p.payload_at;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    Var& param = store.params()[k];
    if (entries[k].at("name").get<std::string>() != store.names()[k] ||
        entries[k].at("shape").get<Shape>() != param.shape())
      throw std::runtime_error("checkpoint: parameter '" + store.names()[k] + "' does not match");
    for (float& v : param.mutable_value().values()) {
      const auto bits = static_cast<std::uint32_t>(get_le(bytes, at, 4));
      std::memcpy(&v, &bits, 4);
      at += 4;
    }
  }
  if (at != bytes.size()) throw std::runtime_error("checkpoint: trailing bytes after payload");
}

void load_checkpoint(ParameterStore& store, const std::string& config_hash, const std::filesystem::path& path) {
  decode_checkpoint(store, config_hash, slurp(path));
}

std::string checkpoint_config_hash(const std::filesystem::path& path) {
  return parse(slurp(path)).header.at("config_hash").get<std::string>();
}

nlohmann::json checkpoint_metadata(const std::filesystem::path& path) {
  const auto header = parse(slurp(path)).header;
  return header.contains("metadata") ? header.at("metadata") : nlohmann::json();
}

}  // namespace evmap::ad
