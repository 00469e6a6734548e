#pragma once

#include <condition_variable>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace mfsgd {

/// Fixed set of persistent threads that execute one job per worker id and
/// rejoin at a barrier. Used for epoch-synchronous training: the caller runs
/// an epoch, every worker finishes it, then the caller updates shared state.
class WorkerTeam {
 public:
  explicit WorkerTeam(std::size_t size);
  ~WorkerTeam();
  WorkerTeam(const WorkerTeam&) = delete;
  WorkerTeam& operator=(const WorkerTeam&) = delete;

  std::size_t size() const { return threads_.size(); }

  /// Runs job(id) on every worker and blocks until all return. The first
  /// exception thrown by any worker is rethrown here.
  void run(const std::function<void(std::size_t)>& job);

 private:
  void loop(std::size_t id);

  std::mutex mu_;
  std::condition_variable start_cv_;
  std::condition_variable done_cv_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::uint64_t generation_ = 0;
  std::size_t pending_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
  std::vector<std::thread> threads_;
};

}  // namespace mfsgd
