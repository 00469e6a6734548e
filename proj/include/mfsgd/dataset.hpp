#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "mfsgd/model.hpp"

namespace mfsgd {

/// Observed ratings of an m x n matrix. Samples hold model-domain values;
/// `scaling` maps them back to the rating domain.
struct RatingDataset {
  std::uint64_t m = 0;
  std::uint64_t n = 0;
  std::vector<Sample> samples;
  RatingScaling scaling;

  std::uint64_t size() const { return samples.size(); }

  /// Throws UsageError if any sample lies outside (m, n).
  void validate() const;
};

struct SplitPair {
  RatingDataset train;
  std::vector<Sample> test;
};

struct TextOptions {
  bool one_based = false;
  std::optional<std::uint64_t> rows;
  std::optional<std::uint64_t> cols;
};

/// Parses whitespace-separated "u v r" lines. Blank lines and '#' comments are
/// skipped; dimensions are inferred as max index + 1 unless given.
RatingDataset parse_text(std::istream& in, const TextOptions& options = {});
void write_text(const RatingDataset& dataset, std::ostream& out);

// Binary layout, all little-endian:
//   header (32 bytes): "MFSG", version u8, 3 reserved zero bytes, m u64, n u64, N u64
//   body: N records of u u32, v u32, r f32 (12 bytes each)
inline constexpr std::uint8_t kBinaryVersion = 1;
inline constexpr std::size_t kBinaryHeaderBytes = 32;
inline constexpr std::size_t kBinaryRecordBytes = 12;

void write_binary(const RatingDataset& dataset, std::ostream& out);
RatingDataset read_binary(std::istream& in);

/// Loads a dataset from disk, choosing binary or text by the file's magic bytes.
RatingDataset load_dataset(const std::string& path, const TextOptions& options = {});
void save_dataset(const RatingDataset& dataset, const std::string& path, bool binary);

RatingDataset shuffle(const RatingDataset& dataset, std::uint64_t seed);

/// Holds out round(test_fraction * N) samples drawn uniformly without replacement.
/// The train side keeps the original relative order.
SplitPair split(const RatingDataset& dataset, double test_fraction, std::uint64_t seed);

/// Rescales ratings linearly so the observed range maps onto [lo, hi].
RatingDataset rescale_ratings(const RatingDataset& dataset, double lo = 0.0, double hi = 4.0);

struct SyntheticProblem {
  RatingDataset dataset;
  FeatureMatrixF p_true;
  FeatureMatrixF q_true;
};

/// Low-rank ground truth: P*, Q* uniform in [0, 1/sqrt(rank)); round(density*m*n)
/// distinct cells, each rated p*_u . q*_v + N(0, noise_sigma^2).
SyntheticProblem synth_lowrank(std::uint64_t m, std::uint64_t n, Index rank, double density, double noise_sigma,
                               std::uint64_t seed);

}  // namespace mfsgd
