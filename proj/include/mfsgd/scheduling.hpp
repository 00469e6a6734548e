#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mfsgd/dataset.hpp"
#include "mfsgd/grid.hpp"
#include "mfsgd/model.hpp"
#include "mfsgd/report.hpp"
#include "mfsgd/worker_team.hpp"

namespace mfsgd {

// ---------------------------------------------------------------------------
// Plans and instrumentation

struct SampleRange {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  friend bool operator==(const SampleRange&, const SampleRange&) = default;
};

/// Per-worker chunk lists for batch-Hogwild!: ceil(N/f) consecutive chunks of
/// the shuffled sample array, dealt to workers round-robin.
struct WorkerPlan {
  std::uint64_t workers = 1;
  std::uint64_t batch_len = 256;
  std::vector<std::vector<SampleRange>> ranges;
};

WorkerPlan plan_batch_hogwild(std::uint64_t n_samples, std::uint64_t workers, std::uint64_t batch_len = 256);

/// Worker w sweeps column groups order[w][0], order[w][1], ... within its row band.
struct WavefrontPlan {
  std::uint64_t workers = 1;
  std::uint64_t columns = 1;
  std::vector<std::vector<std::uint32_t>> order;
};

/// s independent seeded permutations of {0..c-1}. Throws UsageError if s > c.
WavefrontPlan make_column_permutations(std::uint64_t workers, std::uint64_t columns, std::uint64_t seed);

/// One flag per column group: free, or held by exactly one worker.
class ColumnLockArray {
 public:
  explicit ColumnLockArray(std::size_t columns);

  std::size_t size() const { return columns_; }
  /// Blocks until the column is free, then takes it.
  void acquire(std::size_t column, int worker);
  /// Non-blocking attempt; true on success.
  bool try_acquire(std::size_t column, int worker);
  void release(std::size_t column, int worker);
  std::optional<int> holder(std::size_t column) const;

 private:
  static constexpr int kFree = -1;
  std::size_t columns_;
  std::unique_ptr<std::atomic<int>[]> holder_;
};

/// Interval record of one worker holding one block. Ticks come from a logical
/// clock shared by all workers of a run; an interval is [start, end).
struct TraceEvent {
  std::uint32_t worker = 0;
  std::uint64_t band = 0;
  std::uint64_t group = 0;
  std::uint64_t start = 0;
  std::uint64_t end = 0;
};

struct ConflictTrace {
  std::vector<TraceEvent> events;
  /// Overlaps observed at runtime by per-group occupancy counters.
  std::uint64_t conflict_count = 0;
  double total_wait_seconds = 0.0;
};

enum class ConflictAxis { column, row_or_column };

/// Counts pairs of events from different workers whose intervals overlap on
/// the same column group (or, with row_or_column, the same row band).
/// Throws UsageError on a malformed trace: end < start, or one worker's events
/// out of order or overlapping.
std::uint64_t detect_conflicts(const ConflictTrace& trace, ConflictAxis axis = ConflictAxis::column);

// ---------------------------------------------------------------------------
// Training

enum class Scheme { serial, batch_hogwild, wavefront, global_table };

std::string to_string(Scheme scheme);
Scheme parse_scheme(const std::string& name);

struct SchemeParams {
  Scheme scheme = Scheme::serial;
  std::uint64_t workers = 1;      ///< s
  std::uint64_t batch_len = 256;  ///< f, batch-Hogwild! only
  std::uint64_t columns = 1;      ///< c, wavefront only (row bands = workers)
  GridShape grid{1, 1};           ///< global-table only
};

struct TrainOptions {
  Hyperparams hyper;
  std::int64_t epochs = 20;
  std::uint64_t seed = 1;
  /// Held-out samples in the rating domain; empty disables test RMSE.
  std::span<const Sample> test;
  std::optional<double> target_rmse;
  /// Skip the Hogwild feasibility guard.
  bool force = false;
};

struct TrainResult {
  TrainReport report;
  ConflictTrace trace;
};

/// Thrown when a feature goes non-finite; carries every completed epoch.
class TrainingDiverged : public DivergenceError {
 public:
  TrainingDiverged(const std::string& what, TrainReport so_far)
      : DivergenceError(what), report(std::move(so_far)) {}
  TrainReport report;
};

/// Checks scheme parameters against the dataset; throws UsageError.
void validate_scheme(const SchemeParams& params, std::uint64_t m, std::uint64_t n, bool force);

struct PassResult {
  std::uint64_t updates = 0;
  bool diverged = false;
  double wait_seconds = 0.0;
};

/// Executes single passes (one epoch's worth of updates over a dataset) with a
/// fixed scheme. Owns the worker threads and scratch so repeated passes do not
/// respawn them.
template <FeatureElement E>
class PassRunner {
 public:
  PassRunner(const SchemeParams& params, Index k);

  const SchemeParams& params() const { return params_; }

  /// Visits every sample of `data` once at learning rate `rate`. All sample
  /// orders derive from `pass_seed`. Events are appended to `trace` if given.
  PassResult run(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                 const Hyperparams& hyper, std::uint64_t pass_seed, ConflictTrace* trace = nullptr);

 private:
  PassResult serial(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                    const Hyperparams& hyper, std::uint64_t pass_seed);
  PassResult hogwild(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                     const Hyperparams& hyper, std::uint64_t pass_seed);
  PassResult wavefront(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                       const Hyperparams& hyper, std::uint64_t pass_seed, ConflictTrace* trace);
  PassResult global_table(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                          const Hyperparams& hyper, std::uint64_t pass_seed, ConflictTrace* trace);

  SchemeParams params_;
  std::vector<SgdKernel> kernels_;
  std::unique_ptr<WorkerTeam> team_;
  std::vector<Sample> order_;
  std::atomic<std::uint64_t> ticks_{0};
};

/// Epoch driver shared by every scheme: applies the learning-rate schedule,
/// reshuffles per epoch, records the report, honors target RMSE, and barriers
/// all workers between epochs.
template <FeatureElement E>
TrainResult train(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, const SchemeParams& params,
                  const TrainOptions& options);

template <FeatureElement E>
TrainReport run_serial(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q,
                       const TrainOptions& options) {
  return train(data, P, Q, SchemeParams{Scheme::serial}, options).report;
}

template <FeatureElement E>
TrainReport run_batch_hogwild(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q,
                              std::uint64_t workers, std::uint64_t batch_len, const TrainOptions& options) {
  return train(data, P, Q, SchemeParams{Scheme::batch_hogwild, workers, batch_len}, options).report;
}

template <FeatureElement E>
TrainResult run_wavefront(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, std::uint64_t workers,
                          std::uint64_t columns, const TrainOptions& options) {
  return train(data, P, Q, SchemeParams{Scheme::wavefront, workers, 256, columns}, options);
}

template <FeatureElement E>
TrainResult run_global_table(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q,
                             std::uint64_t workers, GridShape grid, const TrainOptions& options) {
  return train(data, P, Q, SchemeParams{Scheme::global_table, workers, 256, 1, grid}, options);
}

/// Fills the report metadata fields that describe a scheme.
ReportMetadata describe(const SchemeParams& params, Precision precision, std::uint64_t seed, std::uint64_t samples);

extern template class PassRunner<float>;
extern template class PassRunner<Half>;
extern template TrainResult train<float>(const RatingDataset&, FeatureMatrix<float>&, FeatureMatrix<float>&,
                                         const SchemeParams&, const TrainOptions&);
extern template TrainResult train<Half>(const RatingDataset&, FeatureMatrix<Half>&, FeatureMatrix<Half>&,
                                        const SchemeParams&, const TrainOptions&);

}  // namespace mfsgd
