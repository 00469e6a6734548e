#include "mfsgd/grid.hpp"

#include <algorithm>
#include <charconv>
#include <sstream>

namespace mfsgd {

namespace {

std::vector<std::uint64_t> equal_cuts(std::uint64_t extent, std::uint64_t parts) {
  std::vector<std::uint64_t> cuts(parts + 1);
  const std::uint64_t width = extent / parts;
  for (std::uint64_t p = 0; p < parts; ++p) cuts[p] = p * width;
  cuts[parts] = extent;
  return cuts;
}

}  // namespace

GridShape parse_grid(const std::string& text) {
  const auto x = text.find_first_of("xX");
  GridShape shape;
  const auto parse = [&](std::string_view part, std::uint64_t& out) {
    const auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), out);
    return ec == std::errc{} && ptr == part.data() + part.size() && out > 0;
  };
  const std::string_view view = text;
  if (x == std::string::npos || !parse(view.substr(0, x), shape.rows) || !parse(view.substr(x + 1), shape.cols)) {
    throw UsageError("grid must look like IxJ with positive integers, got '" + text + "'");
  }
  return shape;
}

BlockGrid::BlockGrid(std::uint64_t m, std::uint64_t n, GridShape shape) : m_(m), n_(n), shape_(shape) {
  if (shape.rows == 0 || shape.cols == 0) throw UsageError("grid dimensions must be positive");
  if (shape.rows > m || shape.cols > n) {
    throw UsageError("grid " + std::to_string(shape.rows) + "x" + std::to_string(shape.cols) + " exceeds matrix " +
                     std::to_string(m) + "x" + std::to_string(n));
  }
  row_cuts_ = equal_cuts(m, shape.rows);
  col_cuts_ = equal_cuts(n, shape.cols);
}

std::uint64_t BlockGrid::band_of(std::uint64_t u) const {
  return std::min(u / (m_ / shape_.rows), shape_.rows - 1);
}

std::uint64_t BlockGrid::group_of(std::uint64_t v) const {
  return std::min(v / (n_ / shape_.cols), shape_.cols - 1);
}

BlockedDataset build_block_grid(const RatingDataset& dataset, GridShape shape) {
  BlockedDataset out{BlockGrid(dataset.m, dataset.n, shape), RatingDataset{}};
  const BlockGrid& grid = out.grid;
  const std::uint64_t blocks = shape.blocks();

  std::vector<std::uint64_t> offsets(blocks + 1, 0);
  std::vector<std::uint64_t> block_of(dataset.samples.size());
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const Sample& s = dataset.samples[i];
    block_of[i] = grid.index({grid.band_of(s.u), grid.group_of(s.v)});
    ++offsets[block_of[i] + 1];
  }
  for (std::uint64_t b = 0; b < blocks; ++b) offsets[b + 1] += offsets[b];

  out.data.m = dataset.m;
  out.data.n = dataset.n;
  out.data.scaling = dataset.scaling;
  out.data.samples.resize(dataset.samples.size());
  std::vector<std::uint64_t> cursor(offsets.begin(), offsets.end() - 1);
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    out.data.samples[cursor[block_of[i]]++] = dataset.samples[i];
  }
  out.grid.set_offsets(std::move(offsets));
  return out;
}

bool independent(const BlockGrid& grid, BlockId a, BlockId b) {
  if (!grid.valid(a) || !grid.valid(b)) throw UsageError("block id outside grid");
  return a.band != b.band && a.group != b.group;
}

Feasibility feasibility_check(std::uint64_t s, std::uint64_t m, std::uint64_t n, std::uint64_t i, std::uint64_t j,
                              double safety_factor) {
  if (s == 0 || m == 0 || n == 0 || i == 0 || j == 0 || !(safety_factor > 0.0)) {
    throw UsageError("feasibility_check arguments must be positive");
  }
  Feasibility out;
  const std::uint64_t smallest = std::min(m / i, n / j);
  out.bound = static_cast<double>(smallest) / safety_factor;
  out.pass = static_cast<double>(s) < out.bound;
  if (!out.pass) {
    std::ostringstream why;
    why << s << " workers >= min(floor(" << m << "/" << i << "), floor(" << n << "/" << j << "))/" << safety_factor
        << " = " << out.bound;
    out.reason = why.str();
  }
  return out;
}

}  // namespace mfsgd
