#include "mfsgd/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <future>
#include <map>
#include <memory>
#include <ostream>
#include <set>
#include <thread>

#include <json.hpp>

namespace mfsgd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_between(Clock::time_point a, Clock::time_point b) { return std::chrono::duration<double>(b - a).count(); }

}  // namespace

std::uint64_t max_lookahead(GridShape shape, std::uint64_t devices) {
  if (devices == 0) throw UsageError("device count must be at least 1");
  const std::uint64_t span = std::max(shape.rows, shape.cols);
  return (span + devices - 1) / devices;
}

namespace {

// One random greedy fill: each device in turn draws uniformly among the
// remaining blocks whose band and group no other device holds this round.
std::vector<std::vector<std::vector<BlockId>>> greedy_rounds(const BlockGrid& grid, std::uint64_t devices,
                                                             std::uint64_t lookahead, Rng& rng) {
  constexpr std::uint64_t kNone = std::numeric_limits<std::uint64_t>::max();
  std::vector<BlockId> remaining;
  for (std::uint64_t b = 0; b < grid.shape().blocks(); ++b) remaining.push_back(grid.block(b));
  std::vector<std::vector<std::vector<BlockId>>> rounds;
  std::vector<BlockId> eligible;
  while (!remaining.empty()) {
    std::vector<std::vector<BlockId>> round(devices);
    std::vector<std::uint64_t> band_owner(grid.shape().rows, kNone);
    std::vector<std::uint64_t> group_owner(grid.shape().cols, kNone);
    for (std::uint64_t slot = 0; slot < lookahead; ++slot) {
      for (std::uint64_t d = 0; d < devices; ++d) {
        eligible.clear();
        for (const BlockId& b : remaining) {
          const bool band_ok = band_owner[b.band] == kNone || band_owner[b.band] == d;
          const bool group_ok = group_owner[b.group] == kNone || group_owner[b.group] == d;
          if (band_ok && group_ok) eligible.push_back(b);
        }
        if (eligible.empty()) continue;
        const BlockId pick = eligible[rng.below(eligible.size())];
        round[d].push_back(pick);
        band_owner[pick.band] = d;
        group_owner[pick.group] = d;
        std::erase(remaining, pick);
      }
    }
    rounds.push_back(std::move(round));
  }
  return rounds;
}

}  // namespace

RoundSchedule select_schedule(const BlockGrid& grid, std::uint64_t devices, std::uint64_t lookahead,
                              std::uint64_t seed) {
  if (devices == 0) throw UsageError("device count must be at least 1");
  const std::uint64_t bound = max_lookahead(grid.shape(), devices);
  if (lookahead == 0 || lookahead > bound) {
    throw UsageError("lookahead " + std::to_string(lookahead) + " outside [1, " + std::to_string(bound) + "] for a " +
                     std::to_string(grid.shape().rows) + "x" + std::to_string(grid.shape().cols) + " grid and " +
                     std::to_string(devices) + " devices");
  }
  // Keeps the fill with the fewest rounds among a bounded number of attempts.
  const std::uint64_t blocks = grid.shape().blocks();
  const std::uint64_t floor_rounds = (blocks + devices * lookahead - 1) / (devices * lookahead);
  const std::uint64_t attempts = std::clamp<std::uint64_t>(4'000'000 / (blocks * blocks), 1, 64);
  Rng rng(seed);
  RoundSchedule best{devices, lookahead, {}};
  for (std::uint64_t a = 0; a < attempts; ++a) {
    auto rounds = greedy_rounds(grid, devices, lookahead, rng);
    if (best.rounds.empty() || rounds.size() < best.rounds.size()) best.rounds = std::move(rounds);
    if (best.rounds.size() <= floor_rounds) break;
  }
  return best;
}

std::vector<BlockId> flatten(const RoundSchedule& schedule) {
  std::vector<BlockId> order;
  for (const auto& round : schedule.rounds) {
    for (const auto& queue : round) order.insert(order.end(), queue.begin(), queue.end());
  }
  return order;
}

std::vector<std::vector<BlockId>> feasible_block_orders(const BlockGrid& grid, std::uint64_t workers) {
  if (workers == 0) throw UsageError("worker count must be at least 1");
  if (grid.shape().blocks() > 10) throw UsageError("exhaustive order enumeration is limited to 10 blocks");
  std::vector<BlockId> order;
  for (std::uint64_t b = 0; b < grid.shape().blocks(); ++b) order.push_back(grid.block(b));
  std::vector<std::vector<BlockId>> feasible;
  do {
    bool ok = true;
    for (std::size_t start = 0; ok && start < order.size(); start += workers) {
      const std::size_t stop = std::min<std::size_t>(start + workers, order.size());
      for (std::size_t a = start; ok && a < stop; ++a) {
        for (std::size_t b = a + 1; ok && b < stop; ++b) ok = independent(grid, order[a], order[b]);
      }
    }
    if (ok) feasible.push_back(order);
  } while (std::next_permutation(order.begin(), order.end()));
  return feasible;
}

std::vector<StageTimes> simulate_device_timeline(std::span<const StageDurations> blocks, double start) {
  std::vector<StageTimes> times(blocks.size());
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    StageTimes& t = times[k];
    t.in_start = start;
    if (k >= 1) t.in_start = std::max(t.in_start, times[k - 1].in_end);
    if (k >= 2) t.in_start = std::max(t.in_start, times[k - 2].compute_end);
    t.in_end = t.in_start + blocks[k].stage_in;

    t.compute_start = t.in_end;
    if (k >= 1) t.compute_start = std::max(t.compute_start, times[k - 1].compute_end);
    t.compute_end = t.compute_start + blocks[k].compute;

    t.out_start = t.compute_end;
    if (k >= 1) t.out_start = std::max(t.out_start, times[k - 1].out_end);
    t.out_end = t.out_start + blocks[k].stage_out;
  }
  return times;
}

double analytic_pipeline_seconds(std::uint64_t blocks, double transfer, double compute) {
  return std::max(transfer, compute) * static_cast<double>(blocks) + transfer;
}

double DelayModel::transfer_seconds(std::uint64_t bytes) const {
  double seconds = per_block_seconds;
  if (std::isfinite(bytes_per_second) && bytes_per_second > 0.0) {
    seconds += static_cast<double>(bytes) / bytes_per_second;
  }
  return seconds;
}

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::stage_in: return "stage_in";
    case Stage::compute: return "compute";
    case Stage::stage_out: return "stage_out";
  }
  return "unknown";
}

std::size_t emit_pipeline_trace(const PipelineTrace& trace, ReportFormat format, std::ostream& out) {
  std::string text;
  if (format == ReportFormat::json) {
    nlohmann::json events = nlohmann::json::array();
    for (const StageEvent& e : trace.events) {
      events.push_back({{"epoch", e.epoch},
                        {"round", e.round},
                        {"device", e.device},
                        {"band", e.block.band},
                        {"group", e.block.group},
                        {"stage", to_string(e.stage)},
                        {"start", e.start},
                        {"end", e.end}});
    }
    text = nlohmann::json{{"schema_version", kReportSchemaVersion},
                          {"epoch_seconds", trace.epoch_seconds},
                          {"events", events}}
               .dump(2) +
           "\n";
  } else {
    text = "epoch,round,device,band,group,stage,start,end\n";
    for (const StageEvent& e : trace.events) {
      text += std::to_string(e.epoch) + ',' + std::to_string(e.round) + ',' + std::to_string(e.device) + ',' +
              std::to_string(e.block.band) + ',' + std::to_string(e.block.group) + ',' + to_string(e.stage) + ',' +
              nlohmann::json(e.start).dump() + ',' + nlohmann::json(e.end).dump() + '\n';
    }
  }
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw IoError("failed writing pipeline trace");
  return text.size();
}

// ---------------------------------------------------------------------------

namespace {

template <FeatureElement E>
using SegmentPtr = std::shared_ptr<FeatureMatrix<E>>;

template <FeatureElement E>
struct StagedBlock {
  BlockId id;
  RatingDataset local;
  SegmentPtr<E> p;
  SegmentPtr<E> q;
  double in_seconds = 0.0;
};

struct DeviceRoundOutcome {
  std::uint64_t updates = 0;
  bool diverged = false;
  double wait_seconds = 0.0;
  std::uint64_t conflicts = 0;
  std::vector<StageDurations> durations;
  std::vector<StageEvent> wall_events;
};

void copy_rows(const auto& src, std::uint64_t src_row, auto& dst, std::uint64_t dst_row, std::uint64_t rows) {
  const auto k = static_cast<std::uint64_t>(src.k());
  std::copy_n(src.storage().data() + src_row * k, rows * k, dst.storage().data() + dst_row * k);
}

/// Runs one device's queue for one round.
template <FeatureElement E>
class DeviceRound {
 public:
  DeviceRound(const BlockedDataset& blocked, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, const DeviceWorker& device,
              PipelineClock clock, Clock::time_point epoch_start)
      : blocked_(blocked), P_(P), Q_(Q), device_(device), clock_(clock), epoch_start_(epoch_start) {}

  DeviceRoundOutcome run(const std::vector<BlockId>& queue, PassRunner<E>& runner, float rate,
                         const Hyperparams& hyper, std::uint64_t seed, std::int64_t epoch, std::uint64_t round) {
    DeviceRoundOutcome outcome;
    if (queue.empty()) return outcome;
    const BlockGrid& grid = blocked_.grid;
    for (std::size_t k = 0; k < queue.size(); ++k) {
      const std::uint64_t size = grid.block_size(queue[k]);
      const std::uint64_t next = k + 1 < queue.size() ? grid.block_size(queue[k + 1]) : 0;
      if (size + next > device_.capacity_samples) {
        throw ConfigError("device " + std::to_string(device_.id) + " capacity " +
                          std::to_string(device_.capacity_samples) + " cannot hold resident and staged blocks (" +
                          std::to_string(size) + " + " + std::to_string(next) + " samples)");
      }
    }
    plan_residency(queue);
    outcome.durations.resize(queue.size());

    const auto stamp = [&](std::size_t k, Stage stage, Clock::time_point a, Clock::time_point b) {
      if (clock_ != PipelineClock::wall) return;
      std::lock_guard lock(events_mu_);
      outcome.wall_events.push_back(
          {epoch, round, device_.id, queue[k], stage, seconds_between(epoch_start_, a), seconds_between(epoch_start_, b)});
    };

    auto stage_in = [&](std::size_t k) {
      const auto t0 = Clock::now();
      StagedBlock<E> staged = load(queue[k], k);
      pause(staged.in_seconds);
      stamp(k, Stage::stage_in, t0, Clock::now());
      return staged;
    };
    auto stage_out = [&](std::size_t k, StagedBlock<E> staged) {
      const auto t0 = Clock::now();
      const double seconds = store(staged, k);
      outcome.durations[k].stage_out = seconds;
      pause(seconds);
      stamp(k, Stage::stage_out, t0, Clock::now());
    };

    std::future<StagedBlock<E>> incoming = std::async(std::launch::async, stage_in, 0);
    std::future<void> outgoing;
    for (std::size_t k = 0; k < queue.size(); ++k) {
      StagedBlock<E> current = incoming.get();
      outcome.durations[k].stage_in = current.in_seconds;
      if (k + 1 < queue.size()) incoming = std::async(std::launch::async, stage_in, k + 1);

      ConflictTrace trace;
      const auto t0 = Clock::now();
      const PassResult pass = runner.run(current.local, *current.p, *current.q, rate, hyper,
                                         derive_seed(seed, static_cast<std::uint64_t>(epoch), grid.index(current.id)),
                                         &trace);
      const auto t1 = Clock::now();
      stamp(k, Stage::compute, t0, t1);
      outcome.updates += pass.updates;
      outcome.wait_seconds += pass.wait_seconds;
      outcome.conflicts += trace.conflict_count;
      outcome.durations[k].compute =
          device_.delay.compute_seconds_per_sample > 0.0
              ? device_.delay.compute_seconds_per_sample * static_cast<double>(current.local.size())
              : seconds_between(t0, t1);
      if (pass.diverged) {
        outcome.diverged = true;
        if (k + 1 < queue.size()) incoming.wait();
        break;
      }

      outgoing = std::async(std::launch::async, [&, k, prev = std::move(outgoing), block = std::move(current)]() mutable {
        if (prev.valid()) prev.get();
        stage_out(k, std::move(block));
      });
    }
    if (outgoing.valid()) outgoing.get();
    return outcome;
  }

 private:
  void plan_residency(const std::vector<BlockId>& queue) {
    p_first_.assign(queue.size(), false);
    p_last_.assign(queue.size(), false);
    q_first_.assign(queue.size(), false);
    q_last_.assign(queue.size(), false);
    std::set<std::uint64_t> seen_bands, seen_groups;
    for (std::size_t k = 0; k < queue.size(); ++k) {
      p_first_[k] = seen_bands.insert(queue[k].band).second;
      q_first_[k] = seen_groups.insert(queue[k].group).second;
    }
    seen_bands.clear();
    seen_groups.clear();
    for (std::size_t k = queue.size(); k-- > 0;) {
      p_last_[k] = seen_bands.insert(queue[k].band).second;
      q_last_[k] = seen_groups.insert(queue[k].group).second;
    }
    p_resident_.clear();
    q_resident_.clear();
  }

  StagedBlock<E> load(BlockId id, std::size_t k) {
    const BlockGrid& grid = blocked_.grid;
    StagedBlock<E> staged;
    staged.id = id;
    const std::uint64_t row0 = grid.band_begin(id.band);
    const std::uint64_t rows = grid.band_end(id.band) - row0;
    const std::uint64_t col0 = grid.group_begin(id.group);
    const std::uint64_t cols = grid.group_end(id.group) - col0;
    const std::uint64_t bytes_per_row = static_cast<std::uint64_t>(P_.k()) * sizeof(E);

    staged.local.m = rows;
    staged.local.n = cols;
    staged.local.scaling = blocked_.data.scaling;
    staged.local.samples.reserve(grid.block_size(id));
    for (std::uint64_t i = grid.block_begin(id); i < grid.block_end(id); ++i) {
      Sample s = blocked_.data.samples[i];
      s.u = static_cast<std::uint32_t>(s.u - row0);
      s.v = static_cast<std::uint32_t>(s.v - col0);
      staged.local.samples.push_back(s);
    }
    std::uint64_t bytes = staged.local.samples.size() * kBinaryRecordBytes;

    if (p_first_[k]) {
      auto segment = std::make_shared<FeatureMatrix<E>>(static_cast<Index>(rows), P_.k());
      copy_rows(P_, row0, *segment, 0, rows);
      p_resident_[id.band] = segment;
      bytes += rows * bytes_per_row;
    }
    if (q_first_[k]) {
      auto segment = std::make_shared<FeatureMatrix<E>>(static_cast<Index>(cols), Q_.k());
      copy_rows(Q_, col0, *segment, 0, cols);
      q_resident_[id.group] = segment;
      bytes += cols * bytes_per_row;
    }
    staged.p = p_resident_.at(id.band);
    staged.q = q_resident_.at(id.group);
    staged.in_seconds = device_.delay.transfer_seconds(bytes);
    return staged;
  }

  // Writes back segments whose last use in this queue is block k.
  double store(const StagedBlock<E>& staged, std::size_t k) {
    const BlockGrid& grid = blocked_.grid;
    const std::uint64_t bytes_per_row = static_cast<std::uint64_t>(P_.k()) * sizeof(E);
    std::uint64_t bytes = 0;
    if (p_last_[k]) {
      const std::uint64_t row0 = grid.band_begin(staged.id.band);
      const std::uint64_t rows = grid.band_end(staged.id.band) - row0;
      copy_rows(*staged.p, 0, P_, row0, rows);
      bytes += rows * bytes_per_row;
    }
    if (q_last_[k]) {
      const std::uint64_t col0 = grid.group_begin(staged.id.group);
      const std::uint64_t cols = grid.group_end(staged.id.group) - col0;
      copy_rows(*staged.q, 0, Q_, col0, cols);
      bytes += cols * bytes_per_row;
    }
    if (bytes == 0) return 0.0;
    return std::isfinite(device_.delay.bytes_per_second) && device_.delay.bytes_per_second > 0.0
               ? static_cast<double>(bytes) / device_.delay.bytes_per_second
               : 0.0;
  }

  void pause(double seconds) const {
    if (clock_ == PipelineClock::wall && seconds > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
    }
  }

  const BlockedDataset& blocked_;
  FeatureMatrix<E>& P_;
  FeatureMatrix<E>& Q_;
  const DeviceWorker& device_;
  PipelineClock clock_;
  Clock::time_point epoch_start_;
  std::mutex events_mu_;
  std::vector<bool> p_first_, p_last_, q_first_, q_last_;
  std::map<std::uint64_t, SegmentPtr<E>> p_resident_, q_resident_;
};

void validate_local_scheme(const SchemeParams& scheme, const BlockGrid& grid) {
  std::uint64_t min_rows = std::numeric_limits<std::uint64_t>::max();
  std::uint64_t min_cols = std::numeric_limits<std::uint64_t>::max();
  for (std::uint64_t b = 0; b < grid.shape().rows; ++b) min_rows = std::min(min_rows, grid.band_end(b) - grid.band_begin(b));
  for (std::uint64_t g = 0; g < grid.shape().cols; ++g) min_cols = std::min(min_cols, grid.group_end(g) - grid.group_begin(g));
  validate_scheme(scheme, min_rows, min_cols, /*force=*/true);
}

}  // namespace

template <FeatureElement E>
PipelineResult run_pipeline(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, GridShape shape,
                            const PipelineConfig& config, const TrainOptions& options) {
  options.hyper.validate();
  if (options.epochs < 0) throw UsageError("epoch count must be non-negative");
  if (data.samples.empty()) throw UsageError("training needs at least one sample");
  if (P.k() != Q.k()) throw UsageError("P and Q rank differ");
  if (static_cast<std::uint64_t>(P.rows()) != data.m || static_cast<std::uint64_t>(Q.rows()) != data.n) {
    throw UsageError("feature matrix rows do not match dataset dimensions");
  }
  if (config.devices == 0) throw UsageError("device count must be at least 1");
  data.validate();

  const BlockedDataset blocked = build_block_grid(data, shape);
  validate_local_scheme(config.scheme, blocked.grid);
  if (config.scheme.scheme == Scheme::batch_hogwild && !options.force) {
    const Feasibility f = feasibility_check(config.scheme.workers, data.m, data.n, shape.rows, shape.cols);
    if (!f.pass) throw UsageError("pipeline feasibility check failed: " + f.reason + " (use --force to override)");
  }
  // Surfaces a bad lookahead before any work starts.
  (void)max_lookahead(shape, config.devices);
  if (config.lookahead == 0 || config.lookahead > max_lookahead(shape, config.devices)) {
    throw UsageError("lookahead " + std::to_string(config.lookahead) + " exceeds ceil(max(i,j)/devices) = " +
                     std::to_string(max_lookahead(shape, config.devices)));
  }

  std::vector<DeviceWorker> devices;
  std::vector<std::unique_ptr<PassRunner<E>>> runners;
  for (std::uint64_t d = 0; d < config.devices; ++d) {
    devices.push_back({d, config.capacity_samples, config.delay});
    runners.push_back(std::make_unique<PassRunner<E>>(config.scheme, P.k()));
  }
  WorkerTeam controller(config.devices);

  PipelineResult result;
  result.report.meta = describe(config.scheme, FeatureMatrix<E>::precision, options.seed, data.size());
  result.report.meta.grid_rows = shape.rows;
  result.report.meta.grid_cols = shape.cols;
  result.report.meta.devices = config.devices;
  const LearningRateSchedule schedule(options.hyper);

  for (std::int64_t t = 0; t < options.epochs; ++t) {
    const double rate = lr_at_epoch(schedule, t);
    const RoundSchedule rounds =
        select_schedule(blocked.grid, config.devices, config.lookahead,
                        derive_seed(options.seed, static_cast<std::uint64_t>(t), 0xB10C5ULL));
    const auto epoch_start = Clock::now();
    double virtual_clock = 0.0;
    std::uint64_t updates = 0;
    bool diverged = false;

    for (std::uint64_t r = 0; r < rounds.rounds.size() && !diverged; ++r) {
      std::vector<DeviceRoundOutcome> outcomes(config.devices);
      controller.run([&](std::size_t d) {
        DeviceRound<E> device(blocked, P, Q, devices[d], config.clock, epoch_start);
        outcomes[d] = device.run(rounds.rounds[r][d], *runners[d], static_cast<float>(rate), options.hyper,
                                 options.seed, t, r);
      });

      double round_end = virtual_clock;
      for (std::uint64_t d = 0; d < config.devices; ++d) {
        DeviceRoundOutcome& o = outcomes[d];
        updates += o.updates;
        diverged = diverged || o.diverged;
        result.report.wait_seconds += o.wait_seconds;
        result.report.conflicts += o.conflicts;
        if (config.clock == PipelineClock::wall) {
          result.trace.events.insert(result.trace.events.end(), o.wall_events.begin(), o.wall_events.end());
          continue;
        }
        const auto times = simulate_device_timeline(o.durations, virtual_clock);
        const auto& queue = rounds.rounds[r][d];
        for (std::size_t k = 0; k < times.size(); ++k) {
          const StageTimes& s = times[k];
          result.trace.events.push_back({t, r, d, queue[k], Stage::stage_in, s.in_start, s.in_end});
          result.trace.events.push_back({t, r, d, queue[k], Stage::compute, s.compute_start, s.compute_end});
          result.trace.events.push_back({t, r, d, queue[k], Stage::stage_out, s.out_start, s.out_end});
          round_end = std::max({round_end, s.compute_end, s.out_end});
        }
      }
      virtual_clock = round_end;
    }

    const double wall = seconds_between(epoch_start, Clock::now());
    const double epoch_seconds = config.clock == PipelineClock::wall ? wall : virtual_clock;
    if (diverged) {
      throw TrainingDiverged("pipeline training diverged in epoch " + std::to_string(t), result.report);
    }
    result.trace.epoch_seconds.push_back(epoch_seconds);
    EpochRecord record{t, rate, epoch_seconds, std::nullopt, updates};
    if (!options.test.empty()) record.test_rmse = rmse(options.test, P, Q, data.scaling);
    record_epoch(result.report, record);
    if (options.target_rmse && record.test_rmse && *record.test_rmse <= *options.target_rmse) break;
  }
  return result;
}

template PipelineResult run_pipeline<float>(const RatingDataset&, FeatureMatrix<float>&, FeatureMatrix<float>&,
                                            GridShape, const PipelineConfig&, const TrainOptions&);
template PipelineResult run_pipeline<Half>(const RatingDataset&, FeatureMatrix<Half>&, FeatureMatrix<Half>&,
                                           GridShape, const PipelineConfig&, const TrainOptions&);

}  // namespace mfsgd
