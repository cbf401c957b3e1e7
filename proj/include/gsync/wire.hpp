/*
 Copyright 2026 The gsync Authors

 Licensed under the Apache License, Version 2.0 (the "License");
 you may not use this file except in compliance with the License.
 You may obtain a copy of the License at

     http://www.apache.org/licenses/LICENSE-2.0

 Unless required by applicable law or agreed to in writing, software
 distributed under the License is distributed on an "AS IS" BASIS,
 WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 See the License for the specific language governing permissions and
 limitations under the License.
*/
#pragma once

#include <array>
#include <cstdint>
#include <cstring>

#include "gsync/errors.hpp"
#include "gsync/precision.hpp"

namespace gsync {

// Framing for the socket transport. Every chunk on the wire is a fixed
// 27-byte header followed by payload_len payload bytes; multi-byte fields are
// little-endian. Layout:
//   [0..3]  magic "GSYN"        [4]     version (1)
//   [5]     msg_type            [6..13] request_tag
//   [14..17] chunk_index        [18..21] total_chunks
//   [22]    dtype               [23..26] payload_len
inline constexpr std::array<std::uint8_t, 4> kWireMagic = {0x47, 0x53, 0x59, 0x4E};
inline constexpr std::uint8_t kWireVersion = 1;

enum class WireMsgType : std::uint8_t { Chunk = 1 };

struct WireHeader {
  static constexpr std::size_t kSize = 27;

  std::uint8_t msg_type = static_cast<std::uint8_t>(WireMsgType::Chunk);
  std::uint64_t request_tag = 0;
  std::uint32_t chunk_index = 0;
  std::uint32_t total_chunks = 0;
  std::uint8_t dtype = static_cast<std::uint8_t>(Precision::FP32);
  std::uint32_t payload_len = 0;

  void encode(std::uint8_t out[kSize]) const {
    std::memcpy(out, kWireMagic.data(), 4);
    out[4] = kWireVersion;
    out[5] = msg_type;
    put_le64(out + 6, request_tag);
    put_le32(out + 14, chunk_index);
    put_le32(out + 18, total_chunks);
    out[22] = dtype;
    put_le32(out + 23, payload_len);
  }

  static WireHeader decode(const std::uint8_t in[kSize]) {
    if (std::memcmp(in, kWireMagic.data(), 4) != 0)
      throw HeaderCorruptError("bad wire magic");
    if (in[4] != kWireVersion)
      throw HeaderCorruptError("unsupported wire version " + std::to_string(in[4]));
    WireHeader h;
    h.msg_type = in[5];
    h.request_tag = get_le64(in + 6);
    h.chunk_index = get_le32(in + 14);
    h.total_chunks = get_le32(in + 18);
    h.dtype = in[22];
    h.payload_len = get_le32(in + 23);
    if (h.msg_type != static_cast<std::uint8_t>(WireMsgType::Chunk))
      throw HeaderCorruptError("unknown msg_type " + std::to_string(h.msg_type));
    if (h.dtype > static_cast<std::uint8_t>(Precision::INT8))
      throw HeaderCorruptError("unknown dtype " + std::to_string(h.dtype));
    return h;
  }

 private:
  static void put_le32(std::uint8_t* p, std::uint32_t v) {
    p[0] = static_cast<std::uint8_t>(v);
    p[1] = static_cast<std::uint8_t>(v >> 8);
    p[2] = static_cast<std::uint8_t>(v >> 16);
    p[3] = static_cast<std::uint8_t>(v >> 24);
  }
  static void put_le64(std::uint8_t* p, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
  }
  static std::uint32_t get_le32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  static std::uint64_t get_le64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }
};

}  // namespace gsync
