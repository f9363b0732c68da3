#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "evmap/dvs/events.hpp"

namespace evmap::dvs {

// Malformed EVMP content. `offset` is the byte position where decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Little-endian layout:
//   "EVMP" | version u32 | width u16 | height u16 | duration_us u64 | count u64
//   count x { x u16 | y u16 | t_us u32 | polarity i8 | pad u8[3] }
inline constexpr std::uint32_t kEvmpVersion = 1;
inline constexpr std::size_t kEvmpHeaderSize = 28;
inline constexpr std::size_t kEvmpRecordSize = 12;

std::vector<std::uint8_t> encode_evmp(const EventStream& stream);
EventStream decode_evmp(std::span<const std::uint8_t> bytes);

void write_evmp(const EventStream& stream, const std::filesystem::path& path);
EventStream read_evmp(const std::filesystem::path& path);

}  // namespace evmap::dvs
