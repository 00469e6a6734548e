#include "mfsgd/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_set>

#include "le_io.hpp"

namespace mfsgd {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'S', 'G'};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

// Splits off the next whitespace-delimited token.
std::string_view next_token(std::string_view& s) {
  const auto start = s.find_first_not_of(" \t");
  if (start == std::string_view::npos) {
    s = {};
    return {};
  }
  const auto end = s.find_first_of(" \t", start);
  std::string_view token = s.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
  s = end == std::string_view::npos ? std::string_view{} : s.substr(end);
  return token;
}

template <typename T>
bool parse_number(std::string_view token, T& out) {
  const auto* begin = token.data();
  const auto* end = token.data() + token.size();
  const auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc{} && ptr == end;
}

}  // namespace

void RatingDataset::validate() const {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    if (s.u >= m || s.v >= n) {
      throw UsageError("sample " + std::to_string(i) + " at (" + std::to_string(s.u) + ", " + std::to_string(s.v) +
                       ") lies outside " + std::to_string(m) + " x " + std::to_string(n));
    }
    if (!std::isfinite(s.r)) throw UsageError("sample " + std::to_string(i) + " has a non-finite rating");
  }
}

RatingDataset parse_text(std::istream& in, const TextOptions& options) {
  RatingDataset out;
  std::uint64_t max_u = 0;
  std::uint64_t max_v = 0;
  std::string line;
  std::uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view rest = line;
    if (const auto hash = rest.find('#'); hash != std::string_view::npos) rest = rest.substr(0, hash);
    rest = trim(rest);
    if (rest.empty()) continue;

    const auto fail = [&](const std::string& why) {
      throw FormatError("line " + std::to_string(line_no) + ": " + why + ": '" + line + "'");
    };
    std::uint64_t u = 0;
    std::uint64_t v = 0;
    float r = 0.0f;
    if (!parse_number(next_token(rest), u)) fail("bad row index");
    if (!parse_number(next_token(rest), v)) fail("bad column index");
    if (!parse_number(next_token(rest), r)) fail("bad rating");
    if (!trim(rest).empty()) fail("trailing fields");
    if (!std::isfinite(r)) fail("non-finite rating");
    if (options.one_based) {
      if (u == 0 || v == 0) fail("index 0 in 1-based input");
      --u;
      --v;
    }
    if (u > 0xffffffffULL || v > 0xffffffffULL) fail("index exceeds 32 bits");
    if (options.rows && u >= *options.rows) fail("row index outside explicit dimension");
    if (options.cols && v >= *options.cols) fail("column index outside explicit dimension");
    max_u = std::max(max_u, u);
    max_v = std::max(max_v, v);
    out.samples.push_back({static_cast<std::uint32_t>(u), static_cast<std::uint32_t>(v), r});
  }
  if (out.samples.empty()) throw UsageError("rating text contains no samples");
  out.m = options.rows.value_or(max_u + 1);
  out.n = options.cols.value_or(max_v + 1);
  return out;
}

void write_text(const RatingDataset& dataset, std::ostream& out) {
  if (!dataset.scaling.is_identity()) throw UsageError("refusing to persist a rescaled dataset");
  char buf[64];
  for (const Sample& s : dataset.samples) {
    auto* p = std::to_chars(buf, buf + sizeof buf, s.u).ptr;
    *p++ = ' ';
    p = std::to_chars(p, buf + sizeof buf, s.v).ptr;
    *p++ = ' ';
    p = std::to_chars(p, buf + sizeof buf, s.r).ptr;
    *p++ = '\n';
    out.write(buf, p - buf);
  }
  if (!out) throw IoError("failed writing rating text");
}

void write_binary(const RatingDataset& dataset, std::ostream& out) {
  if (!dataset.scaling.is_identity()) throw UsageError("refusing to persist a rescaled dataset");
  out.write(kMagic, 4);
  const char version_and_reserved[4] = {static_cast<char>(kBinaryVersion), 0, 0, 0};
  out.write(version_and_reserved, 4);
  detail::put_le<std::uint64_t>(out, dataset.m);
  detail::put_le<std::uint64_t>(out, dataset.n);
  detail::put_le<std::uint64_t>(out, dataset.samples.size());
  for (const Sample& s : dataset.samples) {
    detail::put_le<std::uint32_t>(out, s.u);
    detail::put_le<std::uint32_t>(out, s.v);
    detail::put_f32(out, s.r);
  }
  if (!out) throw IoError("failed writing binary dataset");
}

RatingDataset read_binary(std::istream& in) {
  char magic[4];
  detail::read_exact(in, magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("bad magic: not an MFSG rating file");
  char version_and_reserved[4];
  detail::read_exact(in, version_and_reserved, 4, "version");
  if (static_cast<std::uint8_t>(version_and_reserved[0]) != kBinaryVersion) {
    throw FormatError("unsupported MFSG version " + std::to_string(static_cast<int>(version_and_reserved[0])));
  }
  RatingDataset out;
  out.m = detail::get_le<std::uint64_t>(in, "m");
  out.n = detail::get_le<std::uint64_t>(in, "n");
  const auto count = detail::get_le<std::uint64_t>(in, "N");

  constexpr std::size_t kChunk = 1 << 16;
  std::vector<unsigned char> buffer(kChunk * kBinaryRecordBytes);
  out.samples.reserve(std::min<std::uint64_t>(count, 1ULL << 24));
  std::uint64_t remaining = count;
  while (remaining > 0) {
    const auto batch = static_cast<std::size_t>(std::min<std::uint64_t>(remaining, kChunk));
    detail::read_exact(in, reinterpret_cast<char*>(buffer.data()), batch * kBinaryRecordBytes, "sample records");
    for (std::size_t i = 0; i < batch; ++i) {
      const unsigned char* rec = buffer.data() + i * kBinaryRecordBytes;
      out.samples.push_back({detail::load_le<std::uint32_t>(rec), detail::load_le<std::uint32_t>(rec + 4),
                             std::bit_cast<float>(detail::load_le<std::uint32_t>(rec + 8))});
    }
    remaining -= batch;
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes after " + std::to_string(count) + " records");
  }
  try {
    out.validate();
  } catch (const UsageError& e) {
    throw FormatError(e.what());
  }
  return out;
}

RatingDataset load_dataset(const std::string& path, const TextOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  const bool is_binary = in.gcount() == 4 && std::equal(magic, magic + 4, kMagic);
  in.clear();
  in.seekg(0);
  if (is_binary) return read_binary(in);
  return parse_text(in, options);
}

void save_dataset(const RatingDataset& dataset, const std::string& path, bool binary) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create " + path);
  if (binary) {
    write_binary(dataset, out);
  } else {
    write_text(dataset, out);
  }
  out.flush();
  if (!out) throw IoError("failed writing " + path);
}

RatingDataset shuffle(const RatingDataset& dataset, std::uint64_t seed) {
  RatingDataset out = dataset;
  Rng rng(seed);
  fisher_yates(std::span<Sample>(out.samples), rng);
  return out;
}

SplitPair split(const RatingDataset& dataset, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw UsageError("test fraction must lie in (0, 1)");
  const std::size_t total = dataset.samples.size();
  const auto test_count = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(total)));
  if (test_count == 0 || test_count == total) {
    throw UsageError("test fraction " + std::to_string(test_fraction) + " of " + std::to_string(total) +
                     " samples leaves one side empty");
  }

  // Partial Fisher-Yates: the first test_count slots become the held-out set.
  std::vector<std::size_t> index(total);
  for (std::size_t i = 0; i < total; ++i) index[i] = i;
  Rng rng(seed);
  for (std::size_t i = 0; i < test_count; ++i) {
    const std::size_t j = i + rng.below(total - i);
    std::swap(index[i], index[j]);
  }
  std::vector<bool> held_out(total, false);
  SplitPair out;
  out.test.reserve(test_count);
  for (std::size_t i = 0; i < test_count; ++i) {
    held_out[index[i]] = true;
    out.test.push_back(dataset.samples[index[i]]);
  }
  out.train.m = dataset.m;
  out.train.n = dataset.n;
  out.train.scaling = dataset.scaling;
  out.train.samples.reserve(total - test_count);
  for (std::size_t i = 0; i < total; ++i) {
    if (!held_out[i]) out.train.samples.push_back(dataset.samples[i]);
  }
  return out;
}

RatingDataset rescale_ratings(const RatingDataset& dataset, double lo, double hi) {
  if (dataset.samples.empty()) throw UsageError("cannot rescale an empty dataset");
  if (!(hi > lo)) throw UsageError("rescale target range is empty");
  if (!dataset.scaling.is_identity()) throw UsageError("dataset is already rescaled");
  const auto [min_it, max_it] = std::minmax_element(dataset.samples.begin(), dataset.samples.end(),
                                                    [](const Sample& a, const Sample& b) { return a.r < b.r; });
  const double span = static_cast<double>(max_it->r) - static_cast<double>(min_it->r);
  RatingDataset out = dataset;
  // A constant rating column only needs the offset.
  out.scaling.factor = span > 0.0 ? (hi - lo) / span : 1.0;
  out.scaling.offset = static_cast<double>(min_it->r) - lo / out.scaling.factor;
  for (Sample& s : out.samples) s.r = static_cast<float>(out.scaling.to_model(s.r));
  return out;
}

SyntheticProblem synth_lowrank(std::uint64_t m, std::uint64_t n, Index rank, double density, double noise_sigma,
                               std::uint64_t seed) {
  if (m == 0 || n == 0) throw UsageError("synthetic matrix needs positive dimensions");
  if (rank < 1) throw UsageError("synthetic rank must be at least 1");
  if (!(density > 0.0 && density <= 1.0)) throw UsageError("density must lie in (0, 1]");
  if (!(noise_sigma >= 0.0)) throw UsageError("noise sigma must be non-negative");
  if (m > 0xffffffffULL || n > 0xffffffffULL) throw UsageError("dimensions exceed 32-bit indices");
  const double cells = static_cast<double>(m) * static_cast<double>(n);
  if (density * cells < 1.0) throw UsageError("density * m * n < 1 yields no samples");
  const auto count = static_cast<std::uint64_t>(std::llround(density * cells));
  const std::uint64_t total_cells = m * n;

  SyntheticProblem out{
      RatingDataset{m, n, {}, {}},
      init_features<float>(static_cast<Index>(m), rank, derive_seed(seed, 0, 1)),
      init_features<float>(static_cast<Index>(n), rank, derive_seed(seed, 0, 2)),
  };

  Rng rng(derive_seed(seed, 0, 3));
  std::vector<std::uint64_t> picked;
  picked.reserve(count);
  if (total_cells <= (1ULL << 24) || count * 4 > total_cells) {
    std::vector<std::uint64_t> cell(total_cells);
    for (std::uint64_t i = 0; i < total_cells; ++i) cell[i] = i;
    for (std::uint64_t i = 0; i < count; ++i) {
      std::swap(cell[i], cell[i + rng.below(total_cells - i)]);
      picked.push_back(cell[i]);
    }
  } else {
    // Floyd's algorithm for sparse draws over a large cell space.
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(count * 2);
    for (std::uint64_t j = total_cells - count; j < total_cells; ++j) {
      const std::uint64_t t = rng.below(j + 1);
      picked.push_back(seen.insert(t).second ? t : j);
      if (picked.back() == j) seen.insert(j);
    }
  }

  Rng noise(derive_seed(seed, 0, 4));
  out.dataset.samples.reserve(count);
  for (const std::uint64_t c : picked) {
    const auto u = static_cast<std::uint32_t>(c / n);
    const auto v = static_cast<std::uint32_t>(c % n);
    const double clean = predict(out.p_true, out.q_true, u, v);
    const double r = noise_sigma > 0.0 ? clean + noise_sigma * noise.gaussian() : clean;
    out.dataset.samples.push_back({u, v, static_cast<float>(r)});
  }
  return out;
}

}  // namespace mfsgd
