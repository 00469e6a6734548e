#include "mfsgd/checkpoint.hpp"

#include <fstream>

#include "le_io.hpp"

namespace mfsgd {

namespace {

constexpr char kMagic[4] = {'M', 'F', 'C', 'K'};

std::uint8_t precision_code(Precision p) { return p == Precision::half16 ? 1 : 0; }

}  // namespace

template <FeatureElement E>
void write_checkpoint(const FeatureMatrix<E>& features, const RatingScaling& scaling, std::ostream& out) {
  out.write(kMagic, 4);
  const char head[4] = {static_cast<char>(kCheckpointVersion), static_cast<char>(precision_code(FeatureMatrix<E>::precision)),
                        0, 0};
  out.write(head, 4);
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(features.rows()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(features.k()));
  detail::put_f64(out, scaling.offset);
  detail::put_f64(out, scaling.factor);
  const E* data = features.storage().data();
  for (Index i = 0; i < features.storage().size(); ++i) {
    if constexpr (std::same_as<E, float>) {
      detail::put_f32(out, data[i]);
    } else {
      detail::put_le<std::uint16_t>(out, bits(data[i]));
    }
  }
  if (!out) throw IoError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  detail::read_exact(in, magic, 4, "checkpoint magic");
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = detail::get_le<std::uint8_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto code = detail::get_le<std::uint8_t>(in, "checkpoint precision");
  if (code > 1) throw FormatError("unknown checkpoint precision code " + std::to_string(code));
  (void)detail::get_le<std::uint16_t>(in, "checkpoint reserved bytes");
  const auto rows = detail::get_le<std::uint64_t>(in, "checkpoint rows");
  const auto k = detail::get_le<std::uint64_t>(in, "checkpoint rank");
  Checkpoint ck;
  ck.scaling.offset = detail::get_f64(in, "checkpoint scaling offset");
  ck.scaling.factor = detail::get_f64(in, "checkpoint scaling factor");
  ck.precision = code == 1 ? Precision::half16 : Precision::full32;
  if (k == 0 || rows > (std::uint64_t{1} << 40) / k) throw FormatError("implausible checkpoint dimensions");
  ck.features = FeatureMatrixF(static_cast<Index>(rows), static_cast<Index>(k));
  float* data = ck.features.storage().data();
  for (std::uint64_t i = 0; i < rows * k; ++i) {
    data[i] = code == 1 ? decode_f16(Half{detail::get_le<std::uint16_t>(in, "checkpoint features")})
                        : detail::get_f32(in, "checkpoint features");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint features");
  return ck;
}

template <FeatureElement E>
void save_checkpoint(const FeatureMatrix<E>& features, const RatingScaling& scaling, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  write_checkpoint(features, scaling, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_checkpoint(in);
}

template void write_checkpoint<float>(const FeatureMatrix<float>&, const RatingScaling&, std::ostream&);
template void write_checkpoint<Half>(const FeatureMatrix<Half>&, const RatingScaling&, std::ostream&);
template void save_checkpoint<float>(const FeatureMatrix<float>&, const RatingScaling&, const std::string&);
template void save_checkpoint<Half>(const FeatureMatrix<Half>&, const RatingScaling&, const std::string&);

}  // namespace mfsgd
