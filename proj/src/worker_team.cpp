#include "mfsgd/worker_team.hpp"

#include "mfsgd/errors.hpp"

namespace mfsgd {

WorkerTeam::WorkerTeam(std::size_t size) {
  if (size == 0) throw UsageError("worker team needs at least one worker");
  threads_.reserve(size);
  for (std::size_t id = 0; id < size; ++id) threads_.emplace_back([this, id] { loop(id); });
}

WorkerTeam::~WorkerTeam() {
  {
    std::lock_guard lock(mu_);
    stop_ = true;
  }
  start_cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void WorkerTeam::run(const std::function<void(std::size_t)>& job) {
  std::unique_lock lock(mu_);
  job_ = &job;
  error_ = nullptr;
  pending_ = threads_.size();
  ++generation_;
  start_cv_.notify_all();
  done_cv_.wait(lock, [this] { return pending_ == 0; });
  job_ = nullptr;
  if (error_) std::rethrow_exception(error_);
}

void WorkerTeam::loop(std::size_t id) {
  std::uint64_t seen = 0;
  for (;;) {
    const std::function<void(std::size_t)>* job = nullptr;
    {
      std::unique_lock lock(mu_);
      start_cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      job = job_;
    }
    std::exception_ptr error;
    try {
      (*job)(id);
    } catch (...) {
      error = std::current_exception();
    }
    std::lock_guard lock(mu_);
    if (error && !error_) error_ = error;
    if (--pending_ == 0) done_cv_.notify_one();
  }
}

}  // namespace mfsgd
