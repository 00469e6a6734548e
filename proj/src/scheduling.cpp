#include "mfsgd/scheduling.hpp"

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <map>
#include <mutex>

namespace mfsgd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void shuffle_blocks(std::vector<Sample>& samples, const BlockGrid& grid, std::uint64_t pass_seed) {
  for (std::uint64_t b = 0; b < grid.shape().blocks(); ++b) {
    const BlockId id = grid.block(b);
    Rng rng(derive_seed(pass_seed, b, 7));
    fisher_yates(std::span<Sample>(samples).subspan(grid.block_begin(id), grid.block_size(id)), rng);
  }
}

class OccupancyProbe {
 public:
  explicit OccupancyProbe(std::size_t slots) : count_(std::make_unique<std::atomic<std::uint32_t>[]>(slots)) {
    for (std::size_t i = 0; i < slots; ++i) count_[i].store(0);
  }
  /// Returns true if someone else was already inside.
  bool enter(std::size_t slot) { return count_[slot].fetch_add(1, std::memory_order_acq_rel) != 0; }
  void leave(std::size_t slot) { count_[slot].fetch_sub(1, std::memory_order_acq_rel); }

 private:
  std::unique_ptr<std::atomic<std::uint32_t>[]> count_;
};

}  // namespace

// ---------------------------------------------------------------------------

WorkerPlan plan_batch_hogwild(std::uint64_t n_samples, std::uint64_t workers, std::uint64_t batch_len) {
  if (n_samples == 0 || workers == 0 || batch_len == 0) throw UsageError("plan_batch_hogwild needs N, s, f >= 1");
  WorkerPlan plan{workers, batch_len, std::vector<std::vector<SampleRange>>(workers)};
  const std::uint64_t chunks = (n_samples + batch_len - 1) / batch_len;
  for (std::uint64_t c = 0; c < chunks; ++c) {
    plan.ranges[c % workers].push_back({c * batch_len, std::min((c + 1) * batch_len, n_samples)});
  }
  return plan;
}

WavefrontPlan make_column_permutations(std::uint64_t workers, std::uint64_t columns, std::uint64_t seed) {
  if (workers == 0 || columns == 0) throw UsageError("wavefront needs at least one worker and one column group");
  if (workers > columns) {
    throw UsageError("wavefront needs s <= c, got s=" + std::to_string(workers) + " c=" + std::to_string(columns));
  }
  WavefrontPlan plan{workers, columns, std::vector<std::vector<std::uint32_t>>(workers)};
  for (std::uint64_t w = 0; w < workers; ++w) {
    auto& order = plan.order[w];
    order.resize(columns);
    for (std::uint64_t g = 0; g < columns; ++g) order[g] = static_cast<std::uint32_t>(g);
    Rng rng(derive_seed(seed, w, 11));
    fisher_yates(std::span<std::uint32_t>(order), rng);
  }
  return plan;
}

ColumnLockArray::ColumnLockArray(std::size_t columns)
    : columns_(columns), holder_(std::make_unique<std::atomic<int>[]>(columns)) {
  for (std::size_t c = 0; c < columns; ++c) holder_[c].store(kFree);
}

void ColumnLockArray::acquire(std::size_t column, int worker) {
  std::atomic<int>& slot = holder_[column];
  for (;;) {
    int expected = kFree;
    if (slot.compare_exchange_weak(expected, worker, std::memory_order_acquire, std::memory_order_relaxed)) return;
    if (expected != kFree) slot.wait(expected, std::memory_order_relaxed);
  }
}

bool ColumnLockArray::try_acquire(std::size_t column, int worker) {
  int expected = kFree;
  return holder_[column].compare_exchange_strong(expected, worker, std::memory_order_acquire,
                                                 std::memory_order_relaxed);
}

void ColumnLockArray::release(std::size_t column, int worker) {
  std::atomic<int>& slot = holder_[column];
  if (slot.load(std::memory_order_relaxed) != worker) {
    throw std::logic_error("worker " + std::to_string(worker) + " released column " + std::to_string(column) +
                           " it does not hold");
  }
  slot.store(kFree, std::memory_order_release);
  slot.notify_all();
}

std::optional<int> ColumnLockArray::holder(std::size_t column) const {
  const int h = holder_[column].load(std::memory_order_acquire);
  if (h == kFree) return std::nullopt;
  return h;
}

std::uint64_t detect_conflicts(const ConflictTrace& trace, ConflictAxis axis) {
  std::map<std::uint32_t, std::vector<const TraceEvent*>> by_worker;
  for (const TraceEvent& e : trace.events) {
    if (e.end < e.start) throw UsageError("trace event ends before it starts");
    by_worker[e.worker].push_back(&e);
  }
  for (auto& [worker, events] : by_worker) {
    for (std::size_t i = 1; i < events.size(); ++i) {
      if (events[i]->start < events[i - 1]->end) {
        throw UsageError("trace events of worker " + std::to_string(worker) + " are not monotone");
      }
    }
  }

  const auto count_on = [&](auto key) {
    std::map<std::uint64_t, std::vector<const TraceEvent*>> buckets;
    for (const TraceEvent& e : trace.events) buckets[key(e)].push_back(&e);
    std::uint64_t pairs = 0;
    for (auto& [_, events] : buckets) {
      std::sort(events.begin(), events.end(), [](auto* a, auto* b) { return a->start < b->start; });
      std::vector<const TraceEvent*> active;
      for (const TraceEvent* e : events) {
        std::erase_if(active, [&](const TraceEvent* a) { return a->end <= e->start; });
        for (const TraceEvent* a : active) {
          if (a->worker != e->worker && e->start < e->end && a->start < a->end) ++pairs;
        }
        active.push_back(e);
      }
    }
    return pairs;
  };

  std::uint64_t total = count_on([](const TraceEvent& e) { return e.group; });
  if (axis == ConflictAxis::row_or_column) total += count_on([](const TraceEvent& e) { return e.band; });
  return total;
}

std::string to_string(Scheme scheme) {
  switch (scheme) {
    case Scheme::serial: return "serial";
    case Scheme::batch_hogwild: return "hogwild";
    case Scheme::wavefront: return "wavefront";
    case Scheme::global_table: return "global-table";
  }
  return "unknown";
}

Scheme parse_scheme(const std::string& name) {
  if (name == "serial") return Scheme::serial;
  if (name == "hogwild" || name == "batch-hogwild") return Scheme::batch_hogwild;
  if (name == "wavefront") return Scheme::wavefront;
  if (name == "global-table") return Scheme::global_table;
  throw UsageError("unknown scheme '" + name + "' (serial | hogwild | wavefront | global-table)");
}

void validate_scheme(const SchemeParams& params, std::uint64_t m, std::uint64_t n, bool force) {
  if (params.workers == 0) throw UsageError("worker count must be at least 1");
  switch (params.scheme) {
    case Scheme::serial:
      break;
    case Scheme::batch_hogwild: {
      if (params.batch_len == 0) throw UsageError("batch length f must be at least 1");
      if (!force) {
        const Feasibility f = feasibility_check(params.workers, m, n, 1, 1);
        if (!f.pass) throw UsageError("Hogwild feasibility check failed: " + f.reason + " (use --force to override)");
      }
      break;
    }
    case Scheme::wavefront:
      if (params.columns == 0) throw UsageError("column group count c must be at least 1");
      if (params.workers > params.columns) {
        throw UsageError("wavefront needs s <= c, got s=" + std::to_string(params.workers) +
                         " c=" + std::to_string(params.columns));
      }
      if (params.workers > m || params.columns > n) throw UsageError("wavefront grid exceeds matrix dimensions");
      break;
    case Scheme::global_table:
      if (params.grid.rows < params.workers || params.grid.cols < params.workers) {
        throw UsageError("global table needs a grid of at least s x s blocks");
      }
      if (params.grid.rows > m || params.grid.cols > n) throw UsageError("grid exceeds matrix dimensions");
      break;
  }
}

ReportMetadata describe(const SchemeParams& params, Precision precision, std::uint64_t seed, std::uint64_t samples) {
  ReportMetadata meta;
  meta.scheme = to_string(params.scheme);
  meta.precision = std::string(to_string(precision));
  meta.seed = seed;
  meta.samples = samples;
  meta.workers = params.scheme == Scheme::serial ? 1 : params.workers;
  switch (params.scheme) {
    case Scheme::serial:
      break;
    case Scheme::batch_hogwild:
      meta.batch_len = params.batch_len;
      break;
    case Scheme::wavefront:
      meta.columns = params.columns;
      meta.grid_rows = params.workers;
      meta.grid_cols = params.columns;
      break;
    case Scheme::global_table:
      meta.grid_rows = params.grid.rows;
      meta.grid_cols = params.grid.cols;
      break;
  }
  return meta;
}

// ---------------------------------------------------------------------------

template <FeatureElement E>
PassRunner<E>::PassRunner(const SchemeParams& params, Index k) : params_(params) {
  const std::uint64_t lanes = params.scheme == Scheme::serial ? 1 : params.workers;
  kernels_.reserve(lanes);
  for (std::uint64_t w = 0; w < lanes; ++w) kernels_.emplace_back(k);
  if (params.scheme != Scheme::serial) team_ = std::make_unique<WorkerTeam>(lanes);
}

template <FeatureElement E>
PassResult PassRunner<E>::run(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                              const Hyperparams& hyper, std::uint64_t pass_seed, ConflictTrace* trace) {
  if (data.samples.empty()) return {};
  switch (params_.scheme) {
    case Scheme::serial: return serial(data, P, Q, rate, hyper, pass_seed);
    case Scheme::batch_hogwild: return hogwild(data, P, Q, rate, hyper, pass_seed);
    case Scheme::wavefront: return wavefront(data, P, Q, rate, hyper, pass_seed, trace);
    case Scheme::global_table: return global_table(data, P, Q, rate, hyper, pass_seed, trace);
  }
  return {};
}

template <FeatureElement E>
PassResult PassRunner<E>::serial(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                                 const Hyperparams& hyper, std::uint64_t pass_seed) {
  order_ = data.samples;
  Rng rng(pass_seed);
  fisher_yates(std::span<Sample>(order_), rng);
  PassResult result;
  for (const Sample& s : order_) {
    if (!kernels_[0].apply(P, Q, s, rate, hyper)) {
      result.diverged = true;
      break;
    }
    ++result.updates;
  }
  return result;
}

template <FeatureElement E>
PassResult PassRunner<E>::hogwild(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                                  const Hyperparams& hyper, std::uint64_t pass_seed) {
  order_ = data.samples;
  Rng rng(pass_seed);
  fisher_yates(std::span<Sample>(order_), rng);
  const WorkerPlan plan = plan_batch_hogwild(order_.size(), params_.workers, params_.batch_len);

  std::atomic<std::uint64_t> updates{0};
  std::atomic<bool> diverged{false};
  team_->run([&](std::size_t w) {
    SgdKernel& kernel = kernels_[w];
    std::uint64_t local = 0;
    for (const SampleRange& chunk : plan.ranges[w]) {
      if (diverged.load(std::memory_order_relaxed)) break;
      for (std::uint64_t i = chunk.begin; i < chunk.end; ++i) {
        if (!kernel.apply(P, Q, order_[i], rate, hyper)) {
          diverged.store(true, std::memory_order_relaxed);
          break;
        }
        ++local;
      }
    }
    updates.fetch_add(local, std::memory_order_relaxed);
  });
  return {updates.load(), diverged.load(), 0.0};
}

template <FeatureElement E>
PassResult PassRunner<E>::wavefront(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, float rate,
                                    const Hyperparams& hyper, std::uint64_t pass_seed, ConflictTrace* trace) {
  const std::uint64_t s = params_.workers;
  const std::uint64_t c = params_.columns;
  BlockedDataset blocked = build_block_grid(data, {s, c});
  shuffle_blocks(blocked.data.samples, blocked.grid, pass_seed);
  const WavefrontPlan plan = make_column_permutations(s, c, derive_seed(pass_seed, 0, 8));

  ColumnLockArray locks(c);
  OccupancyProbe probe(c);
  std::atomic<std::uint64_t> updates{0};
  std::atomic<std::uint64_t> overlaps{0};
  std::atomic<bool> diverged{false};
  std::vector<std::vector<TraceEvent>> events(s);
  std::vector<double> wait(s, 0.0);

  team_->run([&](std::size_t w) {
    SgdKernel& kernel = kernels_[w];
    const auto worker = static_cast<int>(w);
    for (const std::uint32_t g : plan.order[w]) {
      if (diverged.load(std::memory_order_relaxed)) break;
      const auto t0 = Clock::now();
      locks.acquire(g, worker);
      wait[w] += seconds_since(t0);
      if (probe.enter(g)) overlaps.fetch_add(1);
      const std::uint64_t start = ticks_.fetch_add(1);

      const BlockId block{w, g};
      std::uint64_t local = 0;
      for (std::uint64_t i = blocked.grid.block_begin(block); i < blocked.grid.block_end(block); ++i) {
        if (!kernel.apply(P, Q, blocked.data.samples[i], rate, hyper)) {
          diverged.store(true);
          break;
        }
        ++local;
      }
      updates.fetch_add(local, std::memory_order_relaxed);

      const std::uint64_t end = ticks_.fetch_add(1);
      probe.leave(g);
      locks.release(g, worker);
      events[w].push_back({static_cast<std::uint32_t>(w), w, g, start, end});
    }
  });

  PassResult result{updates.load(), diverged.load(), 0.0};
  for (double x : wait) result.wait_seconds += x;
  if (trace) {
    for (auto& e : events) trace->events.insert(trace->events.end(), e.begin(), e.end());
    trace->conflict_count += overlaps.load();
    trace->total_wait_seconds += result.wait_seconds;
  }
  return result;
}

template <FeatureElement E>
PassResult PassRunner<E>::global_table(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q,
                                       float rate, const Hyperparams& hyper, std::uint64_t pass_seed,
                                       ConflictTrace* trace) {
  BlockedDataset blocked = build_block_grid(data, params_.grid);
  const BlockGrid& grid = blocked.grid;
  shuffle_blocks(blocked.data.samples, grid, pass_seed);
  const std::uint64_t blocks = grid.shape().blocks();

  // The single shared scheduling table.
  std::mutex table_mu;
  std::condition_variable table_cv;
  std::vector<char> row_busy(grid.shape().rows, 0);
  std::vector<char> col_busy(grid.shape().cols, 0);
  std::vector<char> done_this_pass(blocks, 0);
  std::vector<std::uint64_t> visits(blocks, 0);
  std::uint64_t unassigned = blocks;

  const auto find_block = [&]() -> std::optional<std::uint64_t> {
    std::optional<std::uint64_t> best;
    for (std::uint64_t b = 0; b < blocks; ++b) {
      const BlockId id = grid.block(b);
      if (done_this_pass[b] || row_busy[id.band] || col_busy[id.group]) continue;
      if (!best || visits[b] < visits[*best]) best = b;
    }
    return best;
  };

  OccupancyProbe row_probe(grid.shape().rows);
  OccupancyProbe col_probe(grid.shape().cols);
  std::atomic<std::uint64_t> updates{0};
  std::atomic<std::uint64_t> overlaps{0};
  std::atomic<bool> diverged{false};
  std::vector<std::vector<TraceEvent>> events(params_.workers);
  std::vector<double> wait(params_.workers, 0.0);

  team_->run([&](std::size_t w) {
    SgdKernel& kernel = kernels_[w];
    for (;;) {
      const auto t0 = Clock::now();
      std::unique_lock lock(table_mu);
      std::optional<std::uint64_t> pick;
      table_cv.wait(lock, [&] {
        pick = find_block();
        return pick.has_value() || unassigned == 0 || diverged.load();
      });
      wait[w] += seconds_since(t0);
      if (!pick || diverged.load()) break;
      const BlockId id = grid.block(*pick);
      row_busy[id.band] = col_busy[id.group] = 1;
      done_this_pass[*pick] = 1;
      --unassigned;
      lock.unlock();

      const bool row_clash = row_probe.enter(id.band);
      const bool col_clash = col_probe.enter(id.group);
      if (row_clash || col_clash) overlaps.fetch_add(1);
      const std::uint64_t start = ticks_.fetch_add(1);
      std::uint64_t local = 0;
      for (std::uint64_t i = grid.block_begin(id); i < grid.block_end(id); ++i) {
        if (!kernel.apply(P, Q, blocked.data.samples[i], rate, hyper)) {
          diverged.store(true);
          break;
        }
        ++local;
      }
      updates.fetch_add(local, std::memory_order_relaxed);
      const std::uint64_t end = ticks_.fetch_add(1);
      row_probe.leave(id.band);
      col_probe.leave(id.group);
      events[w].push_back({static_cast<std::uint32_t>(w), id.band, id.group, start, end});

      lock.lock();
      row_busy[id.band] = col_busy[id.group] = 0;
      ++visits[*pick];
      lock.unlock();
      table_cv.notify_all();
    }
  });

  PassResult result{updates.load(), diverged.load(), 0.0};
  for (double x : wait) result.wait_seconds += x;
  if (trace) {
    for (auto& e : events) trace->events.insert(trace->events.end(), e.begin(), e.end());
    trace->conflict_count += overlaps.load();
    trace->total_wait_seconds += result.wait_seconds;
  }
  return result;
}

// ---------------------------------------------------------------------------

template <FeatureElement E>
TrainResult train(const RatingDataset& data, FeatureMatrix<E>& P, FeatureMatrix<E>& Q, const SchemeParams& params,
                  const TrainOptions& options) {
  options.hyper.validate();
  if (options.epochs < 0) throw UsageError("epoch count must be non-negative");
  if (data.samples.empty()) throw UsageError("training needs at least one sample");
  if (P.k() != Q.k()) throw UsageError("P and Q rank differ");
  if (static_cast<std::uint64_t>(P.rows()) != data.m || static_cast<std::uint64_t>(Q.rows()) != data.n) {
    throw UsageError("feature matrix rows do not match dataset dimensions");
  }
  data.validate();
  validate_scheme(params, data.m, data.n, options.force);

  TrainResult result;
  result.report.meta = describe(params, FeatureMatrix<E>::precision, options.seed, data.size());
  const LearningRateSchedule schedule(options.hyper);
  PassRunner<E> runner(params, P.k());

  for (std::int64_t t = 0; t < options.epochs; ++t) {
    const double rate = lr_at_epoch(schedule, t);
    const auto t0 = Clock::now();
    const PassResult pass = runner.run(data, P, Q, static_cast<float>(rate), options.hyper,
                                       derive_seed(options.seed, static_cast<std::uint64_t>(t)), &result.trace);
    const double elapsed = seconds_since(t0);
    result.report.wait_seconds += pass.wait_seconds;
    result.report.conflicts = result.trace.conflict_count;
    if (pass.diverged) {
      throw TrainingDiverged("training diverged in epoch " + std::to_string(t) + " (non-finite feature)",
                             result.report);
    }
    EpochRecord record{t, rate, elapsed, std::nullopt, pass.updates};
    if (!options.test.empty()) record.test_rmse = rmse(options.test, P, Q, data.scaling);
    record_epoch(result.report, record);
    if (options.target_rmse && record.test_rmse && *record.test_rmse <= *options.target_rmse) break;
  }
  return result;
}

template class PassRunner<float>;
template class PassRunner<Half>;
template TrainResult train<float>(const RatingDataset&, FeatureMatrix<float>&, FeatureMatrix<float>&,
                                  const SchemeParams&, const TrainOptions&);
template TrainResult train<Half>(const RatingDataset&, FeatureMatrix<Half>&, FeatureMatrix<Half>&,
                                 const SchemeParams&, const TrainOptions&);

}  // namespace mfsgd
