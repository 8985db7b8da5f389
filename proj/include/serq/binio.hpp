// Copyright 2026 The SERQ Authors
// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitive readers/writers shared by the tensor, quantized
// tensor and MX file sections, plus atomic whole-file writes.

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace serq {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace binio {

inline constexpr std::size_t kMagicBytes = 16;

template <typename U>
void write_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(U));
}

template <typename U>
U read_le(std::istream& is, std::string_view what) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U))) {
    throw FormatError(std::string(what) + ": unexpected end of data");
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(buf[i]) << (8 * i);
  return value;
}

inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }
inline double read_f64(std::istream& is, std::string_view what) {
  return std::bit_cast<double>(read_le<std::uint64_t>(is, what));
}
inline void write_i32(std::ostream& os, std::int32_t v) { write_le(os, std::bit_cast<std::uint32_t>(v)); }
inline std::int32_t read_i32(std::istream& is, std::string_view what) {
  return std::bit_cast<std::int32_t>(read_le<std::uint32_t>(is, what));
}

/// Writes `magic` NUL-padded to kMagicBytes.
void write_magic(std::ostream& os, std::string_view magic);
/// Throws FormatError if the next kMagicBytes do not match `magic` padded.
void expect_magic(std::istream& is, std::string_view magic);

}  // namespace binio

/// Writes via `<path>.tmp` then renames over `path`.
void write_file_atomic(const std::filesystem::path& path,
                       const std::function<void(std::ostream&)>& writer);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace serq
