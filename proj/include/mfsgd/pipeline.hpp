#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mfsgd/grid.hpp"
#include "mfsgd/report.hpp"
#include "mfsgd/scheduling.hpp"

namespace mfsgd {

/// Per-epoch block assignment. rounds[r][d] is the queue device d processes
/// serially in round r. Queues on different devices within one round are
/// pairwise independent; blocks within one queue need not be.
struct RoundSchedule {
  std::uint64_t devices = 1;
  std::uint64_t lookahead = 1;
  std::vector<std::vector<std::vector<BlockId>>> rounds;
};

/// Largest per-device lookahead accepted by select_schedule: ceil(max(i, j) / devices).
std::uint64_t max_lookahead(GridShape shape, std::uint64_t devices);

/// Randomly fills rounds: each device in turn draws uniformly among the
/// remaining blocks whose band and group are not held by another device in the
/// current round, up to `lookahead` blocks per device. Several seeded fills
/// are drawn and the one with the fewest rounds is kept. Every block appears
/// exactly once.
RoundSchedule select_schedule(const BlockGrid& grid, std::uint64_t devices, std::uint64_t lookahead,
                              std::uint64_t seed);

/// Flattened block order of a schedule (round by round, device by device).
std::vector<BlockId> flatten(const RoundSchedule& schedule);

/// All complete block orders that `workers` concurrent workers can realize
/// while never idling: every consecutive group of `workers` blocks must be
/// pairwise independent. Exhaustive; intended for small grids.
std::vector<std::vector<BlockId>> feasible_block_orders(const BlockGrid& grid, std::uint64_t workers);

// ---------------------------------------------------------------------------
// Transfer/compute pipeline timing

struct StageDurations {
  double stage_in = 0.0;
  double compute = 0.0;
  double stage_out = 0.0;
};

struct StageTimes {
  double in_start = 0.0, in_end = 0.0;
  double compute_start = 0.0, compute_end = 0.0;
  double out_start = 0.0, out_end = 0.0;
};

/// Three serial streams (stage-in, compute, stage-out) with double buffering:
///   in(k)      starts after in(k-1) and compute(k-2)
///   compute(k) starts after in(k) and compute(k-1)
///   out(k)     starts after compute(k) and out(k-1)
std::vector<StageTimes> simulate_device_timeline(std::span<const StageDurations> blocks, double start = 0.0);

/// Closed form for `blocks` equal blocks with transfer d and compute c: max(d, c) * blocks + d.
double analytic_pipeline_seconds(std::uint64_t blocks, double transfer, double compute);

struct DelayModel {
  double bytes_per_second = std::numeric_limits<double>::infinity();
  double per_block_seconds = 0.0;
  /// Modeled compute cost; 0 means measure the real compute time.
  double compute_seconds_per_sample = 0.0;

  double transfer_seconds(std::uint64_t bytes) const;
};

enum class PipelineClock {
  wall,       ///< transfers sleep for their modeled duration; times are measured
  simulated,  ///< no sleeping; times come from simulate_device_timeline
};

struct DeviceWorker {
  std::uint64_t id = 0;
  std::uint64_t capacity_samples = std::numeric_limits<std::uint64_t>::max();
  DelayModel delay;
};

struct PipelineConfig {
  std::uint64_t devices = 1;
  std::uint64_t lookahead = 1;
  SchemeParams scheme;  ///< applied inside each device to the block it holds
  std::uint64_t capacity_samples = std::numeric_limits<std::uint64_t>::max();
  DelayModel delay;
  PipelineClock clock = PipelineClock::wall;
};

enum class Stage { stage_in, compute, stage_out };
std::string to_string(Stage stage);

struct StageEvent {
  std::int64_t epoch = 0;
  std::uint64_t round = 0;
  std::uint64_t device = 0;
  BlockId block;
  Stage stage = Stage::compute;
  double start = 0.0;  ///< seconds from the start of the epoch
  double end = 0.0;
};

struct PipelineTrace {
  std::vector<StageEvent> events;
  std::vector<double> epoch_seconds;
};

/// CSV (epoch,round,device,band,group,stage,start,end) or JSON rendering.
std::size_t emit_pipeline_trace(const PipelineTrace& trace, ReportFormat format, std::ostream& out);

struct PipelineResult {
  TrainReport report;
  PipelineTrace trace;
};

/// Trains over an i x j block grid with simulated devices. Per round, each
/// device stages in its next block (samples plus the P/Q segments it touches)
/// while computing the current one with `config.scheme`, then stages updated
/// segments back to the master matrices. Devices meet at a barrier after every
/// round. Block b (grid index) of epoch t runs one pass of the scheme with
/// pass seed derive_seed(options.seed, t, b). In simulated clock mode the
/// report's epoch_seconds are virtual. Stage-in costs per_block_seconds plus
/// bytes over bandwidth; stage-out costs bytes over bandwidth.
template <FeatureElement E>
PipelineResult run_pipeline(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, GridShape grid,
                            const PipelineConfig& config, const TrainOptions& options);

extern template PipelineResult run_pipeline<float>(const RatingDataset&, FeatureMatrix<float>&, FeatureMatrix<float>&,
                                                   GridShape, const PipelineConfig&, const TrainOptions&);
extern template PipelineResult run_pipeline<Half>(const RatingDataset&, FeatureMatrix<Half>&, FeatureMatrix<Half>&,
                                                  GridShape, const PipelineConfig&, const TrainOptions&);

}  // namespace mfsgd
