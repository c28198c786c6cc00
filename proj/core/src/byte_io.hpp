#pragma once

// Little-endian primitive encoding shared by the dataset and checkpoint files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "diffcls/error.hpp"

namespace diffcls::io {

template <class UInt>
void write_le(std::ostream& os, UInt value) {
  unsigned char bytes[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) {
    bytes[i] = static_cast<unsigned char>((value >> (8 * i)) & 0xFF);
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(UInt));
}

template <class UInt>
UInt read_le(std::istream& is, const char* what) {
  unsigned char bytes[sizeof(UInt)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(UInt))) {
    throw FormatError(std::string("unexpected end of file while reading ") + what);
  }
  UInt value = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i) value |= static_cast<UInt>(bytes[i]) << (8 * i);
  return value;
}

inline void write_f32(std::ostream& os, double value) {
  write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(static_cast<float>(value)));
}

inline double read_f32(std::istream& is, const char* what) {
  return static_cast<double>(std::bit_cast<float>(read_le<std::uint32_t>(is, what)));
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
  char got[4];
  if (!is.read(got, 4) || std::memcmp(got, magic, 4) != 0) {
    throw FormatError(std::string("bad magic bytes in ") + what + " (expected " + magic + ")");
  }
}

}  // namespace diffcls::io
