#include "evmap/dvs/evmp.hpp"

#include <fstream>
#include <iterator>

namespace evmap::dvs {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(u & 0xFFu));
    u = static_cast<U>(u >> 8);
  }
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    using U = std::make_unsigned_t<T>;
    if (pos_ + sizeof(T) > bytes_.size())
      throw FormatError("EVMP: unexpected end of data", pos_);
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u = static_cast<U>(u | (static_cast<U>(bytes_[pos_ + i]) << (8 * i)));
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_evmp(const EventStream& stream) {
  std::vector<std::uint8_t> out;
  out.reserve(kEvmpHeaderSize + kEvmpRecordSize * stream.events.size());
  out.insert(out.end(), {'E', 'V', 'M', 'P'});
  put_le(out, kEvmpVersion);
  put_le(out, static_cast<std::uint16_t>(stream.width));
  put_le(out, static_cast<std::uint16_t>(stream.height));
  put_le(out, static_cast<std::uint64_t>(stream.duration_us));
  put_le(out, static_cast<std::uint64_t>(stream.events.size()));
  for (const auto& e : stream.events) {
    put_le(out, e.x);
    put_le(out, e.y);
    put_le(out, e.t_us);
    put_le(out, e.polarity);
    out.insert(out.end(), {0, 0, 0});
  }
  return out;
}

EventStream decode_evmp(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || bytes[0] != 'E' || bytes[1] != 'V' || bytes[2] != 'M' || bytes[3] != 'P')
    throw FormatError("EVMP: bad magic, expected \"EVMP\"", 0);
  Reader r(bytes.subspan(4));
  const auto version = r.get<std::uint32_t>();
  if (version != kEvmpVersion)
    throw FormatError("EVMP: unsupported version " + std::to_string(version), 4);
  EventStream s;
  s.width = r.get<std::uint16_t>();
  s.height = r.get<std::uint16_t>();
  s.duration_us = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  const std::uint64_t available = r.remaining() / kEvmpRecordSize;
  if (available != count || r.remaining() % kEvmpRecordSize != 0)
    throw FormatError("EVMP: header declares " + std::to_string(count) + " records but payload holds " +
                          std::to_string(available) + " (" + std::to_string(r.remaining()) + " bytes)",
                      kEvmpHeaderSize);
  s.events.resize(count);
  for (auto& e : s.events) {
    const std::uint64_t at = 4 + r.position();
    e.x = r.get<std::uint16_t>();
    e.y = r.get<std::uint16_t>();
    e.t_us = r.get<std::uint32_t>();
    e.polarity = r.get<std::int8_t>();
    const auto p0 = r.get<std::uint8_t>();
    const auto p1 = r.get<std::uint8_t>();
    const auto p2 = r.get<std::uint8_t>();
    if (e.x >= s.width || e.y >= s.height) throw FormatError("EVMP: event outside sensor", at);
    if (e.polarity != 1 && e.polarity != -1) throw FormatError("EVMP: polarity must be +-1", at + 8);
    if (p0 != 0 || p1 != 0 || p2 != 0) throw FormatError("EVMP: nonzero padding", at + 9);
  }
  return s;
}

void write_evmp(const EventStream& stream, const std::filesystem::path& path) {
  const auto bytes = encode_evmp(stream);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("EVMP: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("EVMP: write failed for " + path.string());
}

EventStream read_evmp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("EVMP: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_evmp(bytes);
}

}  // namespace evmap::dvs
