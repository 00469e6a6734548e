#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "mfsgd/errors.hpp"
#include "mfsgd/report.hpp"

using namespace mfsgd;

namespace {

TrainReport random_report(std::mt19937_64& gen, std::size_t epochs) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TrainReport r;
  r.meta.scheme = "wavefront";
  r.meta.precision = "half16";
  r.meta.workers = gen() % 64 + 1;
  r.meta.columns = gen() % 64 + 1;
  r.meta.grid_rows = gen() % 8 + 1;
  r.meta.grid_cols = gen() % 8 + 1;
  r.meta.devices = gen() % 4 + 1;
  r.meta.seed = gen();
  r.meta.samples = gen() % 1'000'000;
  r.wait_seconds = unit(gen);
  r.conflicts = gen() % 5;
  for (std::size_t t = 0; t < epochs; ++t) {
    EpochRecord e{static_cast<std::int64_t>(t), 0.08 * unit(gen), unit(gen) * 1e-3, std::nullopt, gen() % 100'000};
    if (gen() % 3 != 0) e.test_rmse = unit(gen) / 3.0;
    record_epoch(r, e);
  }
  return r;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(UpdatesPerSec, Examples) {
  EXPECT_EQ(updates_per_sec(1, 1000, 1.0), 1000.0);
  EXPECT_EQ(updates_per_sec(10, 1000, 2.0), 5000.0);
  EXPECT_EQ(updates_per_sec(0, 123456, 1.0), 0.0);
  EXPECT_THROW(updates_per_sec(1, 1, 0.0), UsageError);
  EXPECT_THROW(updates_per_sec(1, 1, -1.0), UsageError);
}

TEST(UpdatesPerSec, MatchesHandArithmetic) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> pos(1e-3, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double it = static_cast<double>(gen() % 200), n = static_cast<double>(gen() % 10'000'000), s = pos(gen);
    EXPECT_DOUBLE_EQ(updates_per_sec(it, n, s), it * n / s);
  }
}

TEST(RecordEpoch, AppendOnlyAndOrdered) {
  TrainReport r;
  record_epoch(r, {0});
  EXPECT_EQ(r.epochs.size(), 1u);
  for (std::int64_t t = 1; t < 10; ++t) record_epoch(r, {t});
  ASSERT_EQ(r.epochs.size(), 10u);
  for (std::size_t t = 0; t < 10; ++t) EXPECT_EQ(r.epochs[t].epoch, static_cast<std::int64_t>(t));

  TrainReport gap;
  for (std::int64_t t = 0; t <= 3; ++t) record_epoch(gap, {t});
  EXPECT_THROW(record_epoch(gap, {5}), UsageError);
  EXPECT_THROW(record_epoch(gap, {3}), UsageError);
  TrainReport fresh;
  EXPECT_THROW(record_epoch(fresh, {1}), UsageError);
}

TEST(TrainReport, Totals) {
  TrainReport r;
  EXPECT_EQ(r.updates_per_second(), 0.0);
  EXPECT_EQ(r.final_rmse(), std::nullopt);
  record_epoch(r, {0, 0.1, 0.5, 0.9, 1000});
  record_epoch(r, {1, 0.1, 1.5, 0.7, 1000});
  EXPECT_DOUBLE_EQ(r.elapsed_seconds(), 2.0);
  EXPECT_EQ(r.total_updates(), 2000u);
  EXPECT_DOUBLE_EQ(r.updates_per_second(), 1000.0);
  EXPECT_EQ(r.final_rmse(), 0.7);
}

TEST(Emit, EmptyCsvIsHeaderOnly) {
  const std::string csv = emit_string(TrainReport{}, ReportFormat::csv);
  EXPECT_EQ(csv, std::string(kCsvHeader) + "\n");
}

TEST(Emit, TenEpochsGiveElevenCsvLines) {
  std::mt19937_64 gen(2);
  const auto r = random_report(gen, 10);
  const std::string csv = emit_string(r, ReportFormat::csv);
  EXPECT_EQ(line_count(csv), 11u);
  std::ostringstream sink;
  EXPECT_EQ(emit(r, ReportFormat::csv, sink), csv.size());
}

TEST(Emit, JsonCarriesSchemaVersionAndRoundtrips) {
  std::mt19937_64 gen(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = random_report(gen, gen() % 30);
    const std::string json = emit_string(r, ReportFormat::json);
    EXPECT_NE(json.find("\"schema_version\": 1"), std::string::npos);
    EXPECT_EQ(parse_report(json, ReportFormat::json), r);
  }
}

TEST(Emit, CsvRoundtripsRecords) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = random_report(gen, gen() % 30);
    const auto back = parse_report(emit_string(r, ReportFormat::csv), ReportFormat::csv);
    EXPECT_EQ(back.epochs, r.epochs);
  }
}

TEST(Parse, RejectsMalformedInput) {
  EXPECT_THROW(parse_report("epoch,lr\n", ReportFormat::csv), FormatError);
  EXPECT_THROW(parse_report(std::string(kCsvHeader) + "\n0,x,1,,5\n", ReportFormat::csv), FormatError);
  EXPECT_THROW(parse_report(std::string(kCsvHeader) + "\n1,0.1,1,,5\n", ReportFormat::csv), UsageError);
  EXPECT_THROW(parse_report("{\"records\": []}", ReportFormat::json), FormatError);
  EXPECT_THROW(parse_report("{\"schema_version\": 2}", ReportFormat::json), FormatError);
}

TEST(Emit, FailingSinkIsIoError) {
  std::ostringstream sink;
  sink.setstate(std::ios::badbit);
  EXPECT_THROW(emit(TrainReport{}, ReportFormat::csv, sink), IoError);
}
