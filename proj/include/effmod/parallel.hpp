#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace effmod {

namespace detail {

inline std::size_t env_worker_budget() {
  if (const char* env = std::getenv("EFFMOD_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

/// Fixed set of workers that execute index ranges of one job at a time.
class WorkerPool {
 public:
  static WorkerPool& instance() {
    static WorkerPool pool;
    return pool;
  }

  WorkerPool(const WorkerPool&) = delete;
  WorkerPool& operator=(const WorkerPool&) = delete;

  ~WorkerPool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    wake_.notify_all();
    for (auto& t : threads_) t.join();
  }

  /// Runs fn(chunk) for chunk in [0, chunks) using up to `workers` threads
  /// (the caller included). Blocks until every chunk has finished.
  void run(std::size_t chunks, std::size_t workers, const std::function<void(std::size_t)>& fn) {
    if (chunks == 0) return;
    workers = std::min(workers, chunks);
    if (workers <= 1) {
      for (std::size_t i = 0; i < chunks; ++i) fn(i);
      return;
    }
    std::lock_guard job_lock(job_mu_);
    ensure_threads(workers - 1);
    {
      std::lock_guard lock(mu_);
      job_ = &fn;
      next_ = 0;
      total_ = chunks;
      pending_ = chunks;
      active_helpers_ = workers - 1;
      ++generation_;
    }
    wake_.notify_all();
    drain();
    std::unique_lock lock(mu_);
    done_.wait(lock, [&] { return pending_ == 0; });
    job_ = nullptr;
  }

 private:
  WorkerPool() = default;

  void ensure_threads(std::size_t n) {
    while (threads_.size() < n) {
      const std::size_t id = threads_.size();
      threads_.emplace_back([this, id] { loop(id); });
    }
  }

  void drain() {
    for (;;) {
      std::size_t idx;
      const std::function<void(std::size_t)>* job;
      {
        std::lock_guard lock(mu_);
        if (job_ == nullptr || next_ >= total_) return;
        idx = next_++;
        job = job_;
      }
      (*job)(idx);
      bool last;
      {
        std::lock_guard lock(mu_);
        last = --pending_ == 0;
      }
      if (last) done_.notify_all();
    }
  }

  void loop(std::size_t id) {
    std::size_t seen = 0;
    for (;;) {
      {
        std::unique_lock lock(mu_);
        wake_.wait(lock, [&] { return stop_ || (generation_ != seen && id < active_helpers_); });
        if (stop_) return;
        seen = generation_;
      }
      drain();
    }
  }

  std::mutex job_mu_;
  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable done_;
  std::vector<std::thread> threads_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::size_t next_ = 0;
  std::size_t total_ = 0;
  std::size_t pending_ = 0;
  std::size_t active_helpers_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
};

inline std::size_t& worker_budget_ref() {
  static std::size_t budget = env_worker_budget();
  return budget;
}

}  // namespace detail

/// Number of threads kernels may use. Defaults to $EFFMOD_THREADS, else 1.
inline std::size_t worker_budget() { return detail::worker_budget_ref(); }
inline void set_worker_budget(std::size_t n) { detail::worker_budget_ref() = std::max<std::size_t>(1, n); }

/// RAII override of the worker budget.
class ScopedWorkerBudget {
 public:
  explicit ScopedWorkerBudget(std::size_t n) : saved_(worker_budget()) { set_worker_budget(n); }
  ~ScopedWorkerBudget() { set_worker_budget(saved_); }
  ScopedWorkerBudget(const ScopedWorkerBudget&) = delete;
  ScopedWorkerBudget& operator=(const ScopedWorkerBudget&) = delete;

 private:
  std::size_t saved_;
};

/// Calls fn(i) for every i in [0, count). Each index is handled by exactly one
/// worker, so results never depend on the worker count as long as fn(i) only
/// writes outputs owned by index i. `work_per_item` is a rough scalar-op count
/// used to skip threading for tiny loops.
template <class Fn>
void parallel_for(std::size_t count, std::size_t work_per_item, Fn&& fn) {
  constexpr std::size_t kMinWorkPerChunk = 1 << 15;
  const std::size_t budget = worker_budget();
  const std::size_t total_work = count * std::max<std::size_t>(1, work_per_item);
  if (budget <= 1 || count <= 1 || total_work < 2 * kMinWorkPerChunk) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  const std::size_t chunks = std::min(count, budget * 4);
  const std::size_t per = (count + chunks - 1) / chunks;
  const std::function<void(std::size_t)> job = [&](std::size_t chunk) {
    const std::size_t begin = chunk * per;
    const std::size_t end = std::min(count, begin + per);
    for (std::size_t i = begin; i < end; ++i) fn(i);
  };
  detail::WorkerPool::instance().run((count + per - 1) / per, budget, job);
}

}  // namespace effmod
