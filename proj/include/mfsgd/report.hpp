#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace mfsgd {

/// #Updates/s = (#Iterations x #Samples) / elapsed seconds.
double updates_per_sec(double iterations, double samples, double elapsed_seconds);

struct EpochRecord {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double epoch_seconds = 0.0;
  std::optional<double> test_rmse;
  std::uint64_t updates = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct ReportMetadata {
  std::string scheme = "serial";
  std::string precision = "full32";
  std::uint64_t workers = 1;
  std::uint64_t batch_len = 0;
  std::uint64_t columns = 0;
  std::uint64_t grid_rows = 1;
  std::uint64_t grid_cols = 1;
  std::uint64_t devices = 1;
  std::uint64_t seed = 0;
  std::uint64_t samples = 0;

  friend bool operator==(const ReportMetadata&, const ReportMetadata&) = default;
};

struct TrainReport {
  ReportMetadata meta;
  std::vector<EpochRecord> epochs;
  /// Worker time spent blocked on scheduling (lock arrays, tables).
  double wait_seconds = 0.0;
  std::uint64_t conflicts = 0;

  double elapsed_seconds() const;
  std::uint64_t total_updates() const;
  /// Total updates over total elapsed; 0 for an empty report.
  double updates_per_second() const;
  std::optional<double> final_rmse() const;

  friend bool operator==(const TrainReport&, const TrainReport&) = default;
};

/// Appends an epoch; its index must be exactly one past the previous (0 first).
void record_epoch(TrainReport& report, const EpochRecord& record);

enum class ReportFormat { csv, json };

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kCsvHeader = "epoch,lr,epoch_seconds,test_rmse,updates";

/// Writes the report and returns the number of bytes emitted. CSV carries only
/// the per-epoch records; JSON carries metadata, totals and records.
std::size_t emit(const TrainReport& report, ReportFormat format, std::ostream& out);
std::string emit_string(const TrainReport& report, ReportFormat format);

TrainReport parse_report(std::istream& in, ReportFormat format);
TrainReport parse_report(const std::string& text, ReportFormat format);

}  // namespace mfsgd
