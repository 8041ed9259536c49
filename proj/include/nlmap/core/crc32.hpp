#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace nlmap {

namespace detail {
inline std::array<uint32_t, 256> make_crc_table() {
  std::array<uint32_t, 256> table{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    table[i] = c;
  }
  return table;
}
}  // namespace detail

/// IEEE CRC-32, incremental. Pass the previous value to continue a stream.
inline uint32_t crc32(const void* data, size_t len, uint32_t crc = 0) {
  static const auto table = detail::make_crc_table();
  const auto* p = static_cast<const unsigned char*>(data);
  crc = ~crc;
  for (size_t i = 0; i < len; ++i) crc = table[(crc ^ p[i]) & 0xFF] ^ (crc >> 8);
  return ~crc;
}

}  // namespace nlmap
