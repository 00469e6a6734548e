#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "mfsgd/model.hpp"

namespace mfsgd {

// Feature checkpoint, little-endian:
//   "MFCK", version u8, precision u8 (0 = f32, 1 = f16), 2 reserved zero bytes,
//   rows u64, k u64, scaling offset f64, scaling factor f64,
//   rows * k row-major elements (4 or 2 bytes each)
inline constexpr std::uint8_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderBytes = 40;

struct Checkpoint {
  Precision precision = Precision::full32;
  RatingScaling scaling;
  /// Stored features widened to float; half checkpoints widen exactly.
  FeatureMatrixF features;
};

template <FeatureElement E>
void write_checkpoint(const FeatureMatrix<E>& features, const RatingScaling& scaling, std::ostream& out);

Checkpoint read_checkpoint(std::istream& in);

template <FeatureElement E>
void save_checkpoint(const FeatureMatrix<E>& features, const RatingScaling& scaling, const std::string& path);

Checkpoint load_checkpoint(const std::string& path);

}  // namespace mfsgd
