// Acceptance run: one line per criterion. Exit status is non-zero if any
// gating criterion fails; soft and dataset-gated checks only print.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "mfsgd/dataset.hpp"
#include "mfsgd/pipeline.hpp"
#include "mfsgd/scheduling.hpp"

using namespace mfsgd;

namespace {

int failures = 0;

void verdict(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] criterion %d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

void note(int id, const char* tag, const char* name, const std::string& detail) {
  std::printf("[%s] criterion %d %s: %s\n", tag, id, name, detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// synth_lowrank(m=2000, n=1000, rank=8, density=0.02, noise_sigma=0.01),
// 1% held out, ratings mapped onto [0, 4] for training.
struct Instance {
  SyntheticProblem synth = synth_lowrank(2000, 1000, 8, 0.02, 0.01, 1);
  SplitPair parts = split(synth.dataset, 0.01, 2);
  RatingDataset train = rescale_ratings(parts.train);
  Hyperparams hyper{.k = 8, .lambda_p = 0.05, .lambda_q = 0.05, .alpha = 0.08, .beta = 0.3};
  static constexpr double kNoise = 0.01;
};

const Instance& instance() {
  static const Instance inst;
  return inst;
}

TrainOptions options(std::int64_t epochs, bool with_test = true) {
  TrainOptions o;
  o.hyper = instance().hyper;
  o.epochs = epochs;
  o.seed = 7;
  if (with_test) o.test = instance().parts.test;
  return o;
}

template <FeatureElement E = float>
std::pair<FeatureMatrix<E>, FeatureMatrix<E>> fresh() {
  return {init_features<E>(2000, 8, 11), init_features<E>(1000, 8, 12)};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double c1_serial_rmse = 0.0;

void criterion_1() {
  auto [P, Q] = fresh();
  const auto t0 = std::chrono::steady_clock::now();
  const auto report = run_serial(instance().train, P, Q, options(100));
  const double elapsed = seconds_since(t0);
  c1_serial_rmse = *report.final_rmse();
  const double bar = 3.0 * Instance::kNoise;
  verdict(1, "convergence recovery", c1_serial_rmse <= bar && elapsed < 30.0,
          fmt("serial test RMSE %.5f after 100 epochs (bar <= %.3f), %.2f s (bar < 30 s)", c1_serial_rmse, bar,
              elapsed));
}

void criterion_2() {
  auto [P1, Q1] = fresh();
  const double r1 = *run_batch_hogwild(instance().train, P1, Q1, 1, 256, options(100)).final_rmse();
  auto [P8, Q8] = fresh();
  const double r8 = *run_batch_hogwild(instance().train, P8, Q8, 8, 256, options(100)).final_rmse();
  const double rel = std::fabs(r8 - r1) / r1;
  verdict(2, "hogwild parity", rel <= 0.05,
          fmt("s=8 RMSE %.5f vs s=1 RMSE %.5f, relative gap %.4f (bar <= 0.05)", r8, r1, rel));
}

void criterion_3() {
  const std::uint64_t n = instance().train.size();
  std::vector<std::pair<std::string, SchemeParams>> configs;
  configs.push_back({"serial", {Scheme::serial}});
  for (std::uint64_t s : {1, 2, 4, 8}) {
    for (std::uint64_t f : {1, 7, 256, 5000}) configs.push_back({fmt("hogwild s=%llu f=%llu", s, f), {Scheme::batch_hogwild, s, f}});
  }
  for (auto [s, c] : {std::pair{1, 1}, {1, 5}, {4, 8}, {8, 8}, {3, 16}, {16, 16}}) {
    configs.push_back({fmt("wavefront s=%d c=%d", s, c), {Scheme::wavefront, std::uint64_t(s), 256, std::uint64_t(c)}});
  }
  for (auto [s, i, j] : {std::tuple{1, 1, 1}, {2, 2, 2}, {4, 4, 4}, {4, 8, 8}, {3, 5, 7}}) {
    configs.push_back({fmt("global-table s=%d grid=%dx%d", s, i, j),
                       {Scheme::global_table, std::uint64_t(s), 256, 1, {std::uint64_t(i), std::uint64_t(j)}}});
  }
  std::uint64_t runs = 0;
  std::string first_bad;
  for (const auto& [label, params] : configs) {
    auto [P, Q] = fresh();
    const auto report = train(instance().train, P, Q, params, options(2, false)).report;
    ++runs;
    for (const auto& e : report.epochs) {
      if (e.updates != n && first_bad.empty()) first_bad = label + fmt(" epoch %lld: %llu", e.epoch, e.updates);
    }
  }
  for (auto [shape, devices, lookahead] : {std::tuple{GridShape{1, 1}, 1ull, 1ull}, {GridShape{4, 4}, 2ull, 2ull},
                                           {GridShape{8, 8}, 2ull, 4ull}, {GridShape{8, 1}, 4ull, 2ull}}) {
    for (const SchemeParams& scheme : {SchemeParams{Scheme::serial}, SchemeParams{Scheme::batch_hogwild, 2, 256},
                                       SchemeParams{Scheme::wavefront, 2, 256, 4}}) {
      PipelineConfig config;
      config.devices = devices;
      config.lookahead = lookahead;
      config.scheme = scheme;
      config.clock = PipelineClock::simulated;
      auto [P, Q] = fresh();
      const auto run = run_pipeline(instance().train, P, Q, shape, config, options(2, false));
      ++runs;
      for (const auto& e : run.report.epochs) {
        if (e.updates != n && first_bad.empty()) {
          first_bad = fmt("pipeline %llux%llu %s epoch %lld: %llu", shape.rows, shape.cols,
                          to_string(scheme.scheme).c_str(), e.epoch, e.updates);
        }
      }
    }
  }
  verdict(3, "exactly-once", first_bad.empty(),
          first_bad.empty() ? fmt("%llu configurations x 2 epochs, every epoch applied exactly N=%llu updates", runs, n)
                            : "mismatch at " + first_bad);
}

void criterion_4() {
  std::mt19937_64 gen(4);
  std::uint64_t conflicts = 0, probe = 0;
  const int runs = 120;
  for (int r = 0; r < runs; ++r) {
    const std::uint64_t c = 1 + gen() % 16, s = 1 + gen() % c;
    auto [P, Q] = fresh();
    TrainOptions o = options(1, false);
    o.seed = gen();
    const auto result = run_wavefront(instance().train, P, Q, s, c, o);
    conflicts += detect_conflicts(result.trace, ConflictAxis::row_or_column);
    probe += result.trace.conflict_count;
  }
  verdict(4, "wavefront safety", conflicts == 0 && probe == 0,
          fmt("%d randomized runs (s <= c <= 16): %llu trace conflicts, %llu runtime overlaps", runs, conflicts, probe));
}

void criterion_5() {
  const BlockGrid grid(2000, 1000, {2, 2});
  const auto orders = feasible_block_orders(grid, 2);
  std::set<std::vector<BlockId>> realized;
  for (std::uint64_t seed = 0; seed < 500; ++seed) realized.insert(flatten(select_schedule(grid, 2, 1, seed)));
  const std::set<std::vector<BlockId>> feasible(orders.begin(), orders.end());
  verdict(5, "schedule-order oracle", orders.size() == 8 && realized == feasible,
          fmt("%zu of 24 complete orders feasible (want 8); scheduler realizes %zu distinct orders, %s", orders.size(),
              realized.size(), realized == feasible ? "exactly the feasible set" : "NOT the feasible set"));
}

void criterion_6() {
  const auto j2 = feasibility_check(768, 50'082'604, 40'000, 1, 2);
  const auto j4 = feasibility_check(768, 50'082'604, 40'000, 1, 4);
  verdict(6, "feasibility pair", j2.pass && !j4.pass,
          fmt("s=768, min dim 40000: j=2 bound %.0f -> %s; j=4 bound %.0f -> %s", j2.bound, j2.pass ? "pass" : "fail",
              j4.bound, j4.pass ? "pass" : "fail"));
}

void criterion_7() {
  const double sets[][2] = {{0.08, 0.3}, {0.08, 0.2}, {0.08, 0.3}};
  double worst = 0.0;
  for (const auto& ab : sets) {
    const LearningRateSchedule schedule(ab[0], ab[1]);
    for (int t = 0; t <= 100; ++t) {
      const double direct = ab[0] / (1.0 + ab[1] * std::pow(static_cast<double>(t), 1.5));
      worst = std::max(worst, std::fabs(lr_at_epoch(schedule, t) - direct) / direct);
    }
  }
  verdict(7, "learning-rate schedule", worst <= 1e-9,
          fmt("max relative deviation %.3g over t=0..100 for netflix/yahoo/hugewiki (bar <= 1e-9)", worst));
}

void criterion_8() {
  bool bitwise = true;
  for (const SchemeParams& scheme : {SchemeParams{Scheme::serial}, SchemeParams{Scheme::batch_hogwild, 1, 256},
                                     SchemeParams{Scheme::wavefront, 1, 256, 4}}) {
    auto [P1, Q1] = fresh();
    auto [P2, Q2] = fresh();
    PipelineConfig config;
    config.scheme = scheme;
    run_pipeline(instance().train, P1, Q1, {1, 1}, config, options(3, false));
    train(instance().train, P2, Q2, scheme, options(3, false));
    bitwise = bitwise && P1 == P2 && Q1 == Q2;
  }

  // Fully observed 64x64 matrix in 32 column groups gives 32 equal blocks.
  RatingDataset dense{64, 64, {}, {}};
  for (std::uint32_t u = 0; u < 64; ++u) {
    for (std::uint32_t v = 0; v < 64; ++v) dense.samples.push_back({u, v, 1.0f});
  }
  double worst = 0.0;
  for (auto [d, c] : {std::pair{0.02, 0.01}, {0.01, 0.02}, {0.01, 0.01}, {0.001, 0.05}, {0.05, 0.001}}) {
    PipelineConfig config;
    config.lookahead = 32;
    config.clock = PipelineClock::simulated;
    config.delay.per_block_seconds = d;
    config.delay.compute_seconds_per_sample = c / 128.0;
    auto P = init_features(64, 8, 1), Q = init_features(64, 8, 2);
    TrainOptions o = options(1, false);
    const auto run = run_pipeline(dense, P, Q, {1, 32}, config, o);
    const double model = analytic_pipeline_seconds(32, d, c);
    worst = std::max(worst, std::fabs(run.trace.epoch_seconds[0] - model) / model);
  }
  verdict(8, "pipeline equivalence", bitwise && worst <= 0.05,
          fmt("devices=1 1x1 grid bitwise-equal to direct run: %s; simulated epoch vs max(d,c)*blocks+d worst "
              "relative gap %.4f (bar <= 0.05)",
              bitwise ? "yes" : "no", worst));
}

void criterion_9() {
  std::mt19937_64 gen(9);
  std::uniform_real_distribution<double> log_mag(std::log(std::ldexp(1.0, -14)), std::log(65504.0));
  double worst = 0.0;
  for (int i = 0; i < 100'000; ++i) {
    const float x = static_cast<float>((gen() & 1 ? -1.0 : 1.0) * std::exp(log_mag(gen)));
    worst = std::max(worst, std::fabs(static_cast<double>(decode_f16(encode_f16(x))) - x) / std::fabs(x));
  }
  auto [P, Q] = fresh<Half>();
  const double half_rmse = *run_serial(instance().train, P, Q, options(100)).final_rmse();
  const double gap = std::fabs(half_rmse - c1_serial_rmse);
  verdict(9, "half precision", worst <= std::ldexp(1.0, -11) && gap <= 1e-2,
          fmt("roundtrip max relative error %.3g over 1e5 normal values (bar <= 2^-11 = %.3g); half16 RMSE %.5f vs "
              "full32 %.5f, gap %.5f (bar <= 0.01)",
              worst, std::ldexp(1.0, -11), half_rmse, c1_serial_rmse, gap));
}

void criterion_10() {
  const RatingDataset& d = instance().synth.dataset;
  std::ostringstream bin_out;
  write_binary(d, bin_out);
  std::istringstream bin_in(bin_out.str());
  const RatingDataset from_bin = read_binary(bin_in);
  std::ostringstream text_out;
  write_text(from_bin, text_out);
  std::istringstream text_in(text_out.str());
  const RatingDataset from_text = parse_text(text_in, {.rows = d.m, .cols = d.n});
  std::ostringstream bin_again;
  write_binary(from_text, bin_again);
  auto a = d.samples, b = from_text.samples;
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const bool samples_ok = a == b && bin_again.str() == bin_out.str();

  auto [P, Q] = fresh();
  TrainReport report = run_serial(instance().train, P, Q, options(5));
  report.wait_seconds = 0.125;
  const bool json_ok = parse_report(emit_string(report, ReportFormat::json), ReportFormat::json) == report;
  const bool csv_ok = parse_report(emit_string(report, ReportFormat::csv), ReportFormat::csv).epochs == report.epochs;
  verdict(10, "formats", samples_ok && json_ok && csv_ok,
          fmt("binary->text->binary multiset %s; JSON emit/parse %s; CSV emit/parse %s", samples_ok ? "equal" : "DIFFERS",
              json_ok ? "identity" : "DIFFERS", csv_ok ? "identity" : "DIFFERS"));
}

void criterion_11() {
  const unsigned cores = std::max(1u, std::thread::hardware_concurrency());
  std::string line = fmt("%u core(s); updates/s:", cores);
  double previous = 0.0;
  bool monotone = true;
  for (std::uint64_t s = 1; s <= std::max(cores, 4u); s *= 2) {
    auto [P, Q] = fresh();
    const double ups = run_batch_hogwild(instance().train, P, Q, s, 256, options(5, false)).updates_per_second();
    line += fmt(" s=%llu %.3g", s, ups);
    if (s <= cores && ups <= previous) monotone = false;
    previous = ups;
  }
  line += monotone ? " (monotone up to s=cores)" : " (not monotone up to s=cores)";
  line += "; global-table 8x8 wait fraction:";
  for (std::uint64_t s : {1, 2, 4, 8}) {
    auto [P, Q] = fresh();
    const auto report = run_global_table(instance().train, P, Q, s, {8, 8}, options(3, false)).report;
    line += fmt(" s=%llu %.3f", s, report.wait_seconds / (report.elapsed_seconds() * static_cast<double>(s)));
  }
  note(11, "SOFT", "throughput trend", line + " (informational, not gating)");
}

void criterion_12() {
  const char* train_path = std::getenv("MFSGD_NETFLIX_TRAIN");
  const char* test_path = std::getenv("MFSGD_NETFLIX_TEST");
  if (!train_path || !test_path) {
    note(12, "SKIP", "netflix", "set MFSGD_NETFLIX_TRAIN and MFSGD_NETFLIX_TEST to run");
    return;
  }
  TextOptions text;
  text.one_based = std::getenv("MFSGD_NETFLIX_ONE_BASED") != nullptr;
  const RatingDataset raw = load_dataset(train_path, text);
  text.rows = raw.m;
  text.cols = raw.n;
  const RatingDataset test = load_dataset(test_path, text);
  const RatingDataset scaled = rescale_ratings(raw);
  const Hyperparams hyper{.k = 128, .lambda_p = 0.05, .lambda_q = 0.05, .alpha = 0.08, .beta = 0.3};
  FeatureMatrixF P = init_features(static_cast<Index>(raw.m), 128, 1);
  FeatureMatrixF Q = init_features(static_cast<Index>(raw.n), 128, 2);
  TrainOptions o;
  o.hyper = hyper;
  o.epochs = 60;
  o.test = test.samples;
  o.target_rmse = 0.93;
  const std::uint64_t s = std::max(1u, std::thread::hardware_concurrency());
  const auto report = run_batch_hogwild(scaled, P, Q, s, 256, o);
  verdict(12, "netflix", *report.final_rmse() <= 0.93,
          fmt("test RMSE %.4f after %zu epochs (bar <= 0.93 within 60)", *report.final_rmse(), report.epochs.size()));
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();
  criterion_10();
  criterion_11();
  criterion_12();
  std::printf("%d gating criterion(s) failed\n", failures);
  return failures == 0 ? 0 : 1;
}
