#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mfsgd/dataset.hpp"

namespace mfsgd {

struct GridShape {
  std::uint64_t rows = 1;  ///< row bands (i)
  std::uint64_t cols = 1;  ///< column groups (j)

  std::uint64_t blocks() const { return rows * cols; }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

/// Parses "IxJ" (e.g. "8x8").
GridShape parse_grid(const std::string& text);

struct BlockId {
  std::uint64_t band = 0;
  std::uint64_t group = 0;

  friend bool operator==(const BlockId&, const BlockId&) = default;
  friend auto operator<=>(const BlockId&, const BlockId&) = default;
};

/// i x j partition of an m x n rating matrix into equal-width bands and groups
/// (the remainder goes to the last one). Per-block sample ranges index into
/// the block-sorted sample array the grid was built alongside.
class BlockGrid {
 public:
  BlockGrid() = default;
  BlockGrid(std::uint64_t m, std::uint64_t n, GridShape shape);

  GridShape shape() const { return shape_; }
  std::uint64_t m() const { return m_; }
  std::uint64_t n() const { return n_; }

  std::uint64_t band_of(std::uint64_t u) const;
  std::uint64_t group_of(std::uint64_t v) const;

  std::uint64_t band_begin(std::uint64_t band) const { return row_cuts_[band]; }
  std::uint64_t band_end(std::uint64_t band) const { return row_cuts_[band + 1]; }
  std::uint64_t group_begin(std::uint64_t group) const { return col_cuts_[group]; }
  std::uint64_t group_end(std::uint64_t group) const { return col_cuts_[group + 1]; }
  const std::vector<std::uint64_t>& row_cuts() const { return row_cuts_; }
  const std::vector<std::uint64_t>& col_cuts() const { return col_cuts_; }

  std::uint64_t index(BlockId b) const { return b.band * shape_.cols + b.group; }
  BlockId block(std::uint64_t index) const { return {index / shape_.cols, index % shape_.cols}; }
  bool valid(BlockId b) const { return b.band < shape_.rows && b.group < shape_.cols; }

  /// [begin, end) of block b in the block-sorted samples.
  std::uint64_t block_begin(BlockId b) const { return offsets_.at(index(b)); }
  std::uint64_t block_end(BlockId b) const { return offsets_.at(index(b) + 1); }
  std::uint64_t block_size(BlockId b) const { return block_end(b) - block_begin(b); }

  void set_offsets(std::vector<std::uint64_t> offsets) { offsets_ = std::move(offsets); }
  const std::vector<std::uint64_t>& offsets() const { return offsets_; }

 private:
  std::uint64_t m_ = 0;
  std::uint64_t n_ = 0;
  GridShape shape_;
  std::vector<std::uint64_t> row_cuts_;
  std::vector<std::uint64_t> col_cuts_;
  std::vector<std::uint64_t> offsets_;
};

struct BlockedDataset {
  BlockGrid grid;
  RatingDataset data;  ///< samples counting-sorted by block index, stable within a block
};

/// Buckets samples into an i x j grid. Throws UsageError if i > m or j > n.
BlockedDataset build_block_grid(const RatingDataset& dataset, GridShape shape);

/// True iff the blocks share neither a row band nor a column group.
bool independent(const BlockGrid& grid, BlockId a, BlockId b);

struct Feasibility {
  bool pass = false;
  double bound = 0.0;  ///< min(floor(m/i), floor(n/j)) / safety_factor
  std::string reason;
};

/// Hogwild convergence guard: s < min(floor(m/i), floor(n/j)) / safety_factor.
Feasibility feasibility_check(std::uint64_t s, std::uint64_t m, std::uint64_t n, std::uint64_t i, std::uint64_t j,
                              double safety_factor = 20.0);

}  // namespace mfsgd
