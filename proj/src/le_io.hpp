#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "mfsgd/errors.hpp"

namespace mfsgd::detail {

template <typename U>
void put_le(std::ostream& out, U value) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(U));
}

inline void put_f32(std::ostream& out, float x) { put_le(out, std::bit_cast<std::uint32_t>(x)); }
inline void put_f64(std::ostream& out, double x) { put_le(out, std::bit_cast<std::uint64_t>(x)); }

inline void read_exact(std::istream& in, char* dst, std::size_t count, const char* what) {
  in.read(dst, static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) {
    throw FormatError(std::string("truncated stream while reading ") + what);
  }
}

template <typename U>
U get_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(U)];
  read_exact(in, reinterpret_cast<char*>(bytes), sizeof(U), what);
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline float get_f32(std::istream& in, const char* what) { return std::bit_cast<float>(get_le<std::uint32_t>(in, what)); }
inline double get_f64(std::istream& in, const char* what) { return std::bit_cast<double>(get_le<std::uint64_t>(in, what)); }

template <typename U>
U load_le(const unsigned char* p) {
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(p[i]) << (8 * i);
  return value;
}

}  // namespace mfsgd::detail
