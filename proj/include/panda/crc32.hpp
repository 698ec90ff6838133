#pragma once

#include <array>
#include <cstddef>
#include <cstdint>

namespace panda {

// Standard CRC-32 (IEEE 802.3, reflected, poly 0xEDB88320).
namespace detail {
constexpr std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}
inline constexpr auto kCrcTable = make_crc_table();
}  // namespace detail

inline uint32_t crc32_update(uint32_t crc, const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    crc ^= 0xFFFFFFFFu;
    for (size_t i = 0; i < len; ++i) crc = detail::kCrcTable[(crc ^ p[i]) & 0xFFu] ^ (crc >> 8);
    return crc ^ 0xFFFFFFFFu;
}

inline uint32_t crc32(const void* data, size_t len) { return crc32_update(0, data, len); }

}  // namespace panda
