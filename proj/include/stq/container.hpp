#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "stq/error.hpp"
#include "stq/tensor.hpp"

namespace stq {

// Binary container shared by calibration sets and checkpoints:
//
//   magic[4] | version u8 | header_len u32 LE | header (UTF-8 JSON)
//   | payload (little-endian f64) | crc32 u32 LE of the payload
inline constexpr std::uint8_t kContainerVersion = 1;

namespace detail {

inline std::uint32_t crc32_of(const std::vector<std::uint8_t>& bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = ::crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline void put_f64(std::vector<std::uint8_t>& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

inline double get_f64(const std::uint8_t* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

struct Container {
  nlohmann::json header;
  std::vector<std::uint8_t> payload;

  void append(const Tensor& t) {
    payload.reserve(payload.size() + t.numel() * 8);
    for (auto v : t.data()) detail::put_f64(payload, static_cast<double>(v));
  }

  // Reads `shape` worth of values starting at byte offset `offset`.
  Tensor tensor_at(std::size_t offset, const Shape& shape) const {
    const std::size_t n = shape_numel(shape);
    if (offset + n * 8 > payload.size()) throw FormatError(FormatError::Kind::truncated, "tensor runs past payload");
    Tensor t(shape);
    for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<Real>(detail::get_f64(payload.data() + offset + i * 8));
    return t;
  }
};

inline void write_container(const std::filesystem::path& path, const char (&magic)[5], const Container& c) {
  std::vector<std::uint8_t> bytes(magic, magic + 4);
  bytes.push_back(kContainerVersion);
  const std::string header = c.header.dump();
  detail::put_u32(bytes, static_cast<std::uint32_t>(header.size()));
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.insert(bytes.end(), c.payload.begin(), c.payload.end());
  detail::put_u32(bytes, detail::crc32_of(c.payload));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError(FormatError::Kind::io, "cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw FormatError(FormatError::Kind::io, "write failed for " + path.string());
}

// Payload size a header declares, and the record size it is made of.
struct PayloadLayout {
  std::size_t bytes = 0;
  std::size_t unit = 8;
};

// A file whose payload is a whole number of records but disagrees with the
// header is an integrity error; one that stops short mid-record is
// truncated.
inline Container read_container(const std::filesystem::path& path, const char (&magic)[5],
                                const std::function<PayloadLayout(const nlohmann::json&)>& layout_of) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(FormatError::Kind::io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 9) throw FormatError(FormatError::Kind::truncated, path.string() + ": file too short");
  if (std::memcmp(bytes.data(), magic, 4) != 0)
    throw FormatError(FormatError::Kind::malformed_header, path.string() + ": bad magic");
  if (bytes[4] != kContainerVersion)
    throw FormatError(FormatError::Kind::malformed_header,
                      path.string() + ": unsupported version " + std::to_string(bytes[4]));
  const std::size_t hlen = detail::get_u32(bytes.data() + 5);
  if (9 + hlen > bytes.size()) throw FormatError(FormatError::Kind::truncated, path.string() + ": header truncated");
  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.begin() + 9, bytes.begin() + 9 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed_header, path.string() + ": header is not JSON: " + e.what());
  }
  PayloadLayout layout;
  try {
    layout = layout_of(c.header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(FormatError::Kind::malformed_header, path.string() + ": header fields: " + e.what());
  }
  const std::size_t rest = bytes.size() - 9 - hlen;
  if (rest < 4) throw FormatError(FormatError::Kind::truncated, path.string() + ": missing checksum");
  const std::size_t got = rest - 4;
  const std::size_t expected = layout.bytes;
  if (got != expected) {
    if (got < expected && got % layout.unit != 0)
      throw FormatError(FormatError::Kind::truncated, path.string() + ": payload truncated (" + std::to_string(got) +
                                                          " of " + std::to_string(expected) + " bytes)");
    throw FormatError(FormatError::Kind::integrity, path.string() + ": header declares " + std::to_string(expected) +
                                                        " payload bytes, file holds " + std::to_string(got));
  }
  c.payload.assign(bytes.begin() + 9 + static_cast<std::ptrdiff_t>(hlen), bytes.end() - 4);
  const std::uint32_t stored = detail::get_u32(bytes.data() + bytes.size() - 4);
  if (stored != detail::crc32_of(c.payload))
    throw FormatError(FormatError::Kind::checksum, path.string() + ": CRC32 mismatch");
  return c;
}

}  // namespace stq
