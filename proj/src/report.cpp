#include "mfsgd/report.hpp"

#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <string_view>

#include <json.hpp>

#include "mfsgd/errors.hpp"

namespace mfsgd {

namespace {

std::string shortest(double x) {
  char buf[64];
  const auto result = std::to_chars(buf, buf + sizeof buf, x);
  return {buf, result.ptr};
}

template <typename T>
T parse_field(std::string_view token, std::size_t line_no, const char* name) {
  T value{};
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc{} || ptr != token.data() + token.size()) {
    throw FormatError("report line " + std::to_string(line_no) + ": bad " + name + " '" + std::string(token) + "'");
  }
  return value;
}

nlohmann::json to_json(const TrainReport& report) {
  nlohmann::json records = nlohmann::json::array();
  for (const EpochRecord& e : report.epochs) {
    records.push_back({
        {"epoch", e.epoch},
        {"lr", e.lr},
        {"epoch_seconds", e.epoch_seconds},
        {"test_rmse", e.test_rmse ? nlohmann::json(*e.test_rmse) : nlohmann::json(nullptr)},
        {"updates", e.updates},
    });
  }
  const ReportMetadata& m = report.meta;
  return {
      {"schema_version", kReportSchemaVersion},
      {"metadata",
       {
           {"scheme", m.scheme},
           {"precision", m.precision},
           {"workers", m.workers},
           {"batch_len", m.batch_len},
           {"columns", m.columns},
           {"grid_rows", m.grid_rows},
           {"grid_cols", m.grid_cols},
           {"devices", m.devices},
           {"seed", m.seed},
           {"samples", m.samples},
       }},
      {"totals",
       {
           {"elapsed_seconds", report.elapsed_seconds()},
           {"updates", report.total_updates()},
           {"updates_per_second", report.updates_per_second()},
           {"wait_seconds", report.wait_seconds},
           {"conflicts", report.conflicts},
       }},
      {"records", records},
  };
}

TrainReport from_json(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("schema_version")) throw FormatError("report JSON lacks schema_version");
  if (j.at("schema_version").get<int>() != kReportSchemaVersion) {
    throw FormatError("unsupported report schema_version " + j.at("schema_version").dump());
  }
  TrainReport report;
  const auto& m = j.at("metadata");
  report.meta.scheme = m.at("scheme").get<std::string>();
  report.meta.precision = m.at("precision").get<std::string>();
  report.meta.workers = m.at("workers").get<std::uint64_t>();
  report.meta.batch_len = m.at("batch_len").get<std::uint64_t>();
  report.meta.columns = m.at("columns").get<std::uint64_t>();
  report.meta.grid_rows = m.at("grid_rows").get<std::uint64_t>();
  report.meta.grid_cols = m.at("grid_cols").get<std::uint64_t>();
  report.meta.devices = m.at("devices").get<std::uint64_t>();
  report.meta.seed = m.at("seed").get<std::uint64_t>();
  report.meta.samples = m.at("samples").get<std::uint64_t>();
  const auto& totals = j.at("totals");
  report.wait_seconds = totals.at("wait_seconds").get<double>();
  report.conflicts = totals.at("conflicts").get<std::uint64_t>();
  for (const auto& r : j.at("records")) {
    EpochRecord e;
    e.epoch = r.at("epoch").get<std::int64_t>();
    e.lr = r.at("lr").get<double>();
    e.epoch_seconds = r.at("epoch_seconds").get<double>();
    if (!r.at("test_rmse").is_null()) e.test_rmse = r.at("test_rmse").get<double>();
    e.updates = r.at("updates").get<std::uint64_t>();
    record_epoch(report, e);
  }
  return report;
}

}  // namespace

double updates_per_sec(double iterations, double samples, double elapsed_seconds) {
  if (!(elapsed_seconds > 0.0)) throw UsageError("elapsed time must be positive");
  return iterations * samples / elapsed_seconds;
}

double TrainReport::elapsed_seconds() const {
  double total = 0.0;
  for (const EpochRecord& e : epochs) total += e.epoch_seconds;
  return total;
}

std::uint64_t TrainReport::total_updates() const {
  std::uint64_t total = 0;
  for (const EpochRecord& e : epochs) total += e.updates;
  return total;
}

double TrainReport::updates_per_second() const {
  const double elapsed = elapsed_seconds();
  if (epochs.empty() || !(elapsed > 0.0)) return 0.0;
  return static_cast<double>(total_updates()) / elapsed;
}

std::optional<double> TrainReport::final_rmse() const {
  if (epochs.empty()) return std::nullopt;
  return epochs.back().test_rmse;
}

void record_epoch(TrainReport& report, const EpochRecord& record) {
  const std::int64_t expected = report.epochs.empty() ? 0 : report.epochs.back().epoch + 1;
  if (record.epoch != expected) {
    throw UsageError("out-of-order epoch " + std::to_string(record.epoch) + ", expected " + std::to_string(expected));
  }
  report.epochs.push_back(record);
}

std::size_t emit(const TrainReport& report, ReportFormat format, std::ostream& out) {
  const std::string text = emit_string(report, format);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing report");
  return text.size();
}

std::string emit_string(const TrainReport& report, ReportFormat format) {
  if (format == ReportFormat::json) return to_json(report).dump(2) + "\n";
  std::string text = kCsvHeader;
  text += '\n';
  for (const EpochRecord& e : report.epochs) {
    text += std::to_string(e.epoch);
    text += ',';
    text += shortest(e.lr);
    text += ',';
    text += shortest(e.epoch_seconds);
    text += ',';
    if (e.test_rmse) text += shortest(*e.test_rmse);
    text += ',';
    text += std::to_string(e.updates);
    text += '\n';
  }
  return text;
}

TrainReport parse_report(std::istream& in, ReportFormat format) {
  if (format == ReportFormat::json) {
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad report JSON: ") + e.what());
    }
  }
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("report CSV header mismatch");
  TrainReport report;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest = line;
    for (;;) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (fields.size() != 5) throw FormatError("report line " + std::to_string(line_no) + ": expected 5 fields");
    EpochRecord e;
    e.epoch = parse_field<std::int64_t>(fields[0], line_no, "epoch");
    e.lr = parse_field<double>(fields[1], line_no, "lr");
    e.epoch_seconds = parse_field<double>(fields[2], line_no, "epoch_seconds");
    if (!fields[3].empty()) e.test_rmse = parse_field<double>(fields[3], line_no, "test_rmse");
    e.updates = parse_field<std::uint64_t>(fields[4], line_no, "updates");
    record_epoch(report, e);
  }
  return report;
}

TrainReport parse_report(const std::string& text, ReportFormat format) {
  std::istringstream in(text);
  return parse_report(in, format);
}

}  // namespace mfsgd
