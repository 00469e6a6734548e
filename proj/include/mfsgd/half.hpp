#pragma once

#include <bit>
#include <cstdint>

namespace mfsgd {

/// IEEE 754 binary16 bit pattern used as feature-matrix storage.
enum class Half : std::uint16_t {};

constexpr std::uint16_t bits(Half h) noexcept { return static_cast<std::uint16_t>(h); }

/// Round-to-nearest-even narrowing of a binary32 value to binary16.
/// Values at or beyond 65520 in magnitude become infinity; NaN stays NaN.
constexpr Half encode_f16(float x) noexcept {
  const std::uint32_t f = std::bit_cast<std::uint32_t>(x);
  const auto sign = static_cast<std::uint16_t>((f >> 16) & 0x8000u);
  const std::uint32_t mag = f & 0x7fffffffu;

  if (mag >= 0x7f800000u) {
    const std::uint16_t payload = mag > 0x7f800000u ? static_cast<std::uint16_t>(0x0200u | ((mag >> 13) & 0x03ffu)) : 0;
    return Half{static_cast<std::uint16_t>(sign | 0x7c00u | payload)};
  }
  if (mag >= 0x477ff000u) {  // 65520 and up round to infinity
    return Half{static_cast<std::uint16_t>(sign | 0x7c00u)};
  }
  if (mag < 0x38800000u) {  // below 2^-14: subnormal or zero
    const std::uint32_t exponent = mag >> 23;
    if (exponent < 102) {  // below 2^-25, rounds to zero
      return Half{sign};
    }
    const std::uint32_t mantissa = (mag & 0x007fffffu) | 0x00800000u;
    const std::uint32_t shift = 126 - exponent;
    std::uint32_t q = mantissa >> shift;
    const std::uint32_t rem = mantissa & ((1u << shift) - 1);
    const std::uint32_t halfway = 1u << (shift - 1);
    if (rem > halfway || (rem == halfway && (q & 1u))) {
      ++q;
    }
    return Half{static_cast<std::uint16_t>(sign | q)};
  }
  std::uint32_t h = (mag - 0x38000000u) >> 13;
  const std::uint32_t rem = mag & 0x1fffu;
  if (rem > 0x1000u || (rem == 0x1000u && (h & 1u))) {
    ++h;
  }
  return Half{static_cast<std::uint16_t>(sign | h)};
}

/// Exact widening of binary16 to binary32.
constexpr float decode_f16(Half h) noexcept {
  const std::uint32_t v = bits(h);
  const std::uint32_t sign = (v & 0x8000u) << 16;
  const std::uint32_t exponent = (v >> 10) & 0x1fu;
  const std::uint32_t mantissa = v & 0x03ffu;

  if (exponent == 0) {
    const float magnitude = static_cast<float>(mantissa) * 0x1p-24f;
    return sign ? -magnitude : magnitude;
  }
  if (exponent == 31) {
    return std::bit_cast<float>(sign | 0x7f800000u | (mantissa << 13));
  }
  return std::bit_cast<float>(sign | ((exponent + 112) << 23) | (mantissa << 13));
}

}  // namespace mfsgd
