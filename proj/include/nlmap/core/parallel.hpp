#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace nlmap {

/// Fixed-size worker pool used for data-parallel kernels. Work is always
/// partitioned into a block grid that does not depend on the worker count,
/// so results are bitwise reproducible for any pool size as long as each
/// output element is written by exactly one block.
class ThreadPool {
 public:
  explicit ThreadPool(int workers) {
    if (workers < 1) workers = 1;
    for (int i = 0; i + 1 < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return static_cast<int>(threads_.size()) + 1; }

  /// Runs fn(block, begin, end) over [0, total) split into n_blocks
  /// contiguous ranges. Blocks may run on any worker; the caller thread
  /// participates and the call returns only when every block finished.
  void for_blocks(int64_t total, int n_blocks,
                  const std::function<void(int, int64_t, int64_t)>& fn) {
    if (total <= 0) return;
    if (n_blocks < 1) n_blocks = 1;
    if (n_blocks > total) n_blocks = static_cast<int>(total);
    if (size() == 1 || n_blocks == 1) {
      for (int b = 0; b < n_blocks; ++b) {
        auto [lo, hi] = block_range(total, n_blocks, b);
        fn(b, lo, hi);
      }
      return;
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_total_ = total;
      job_blocks_ = n_blocks;
      next_block_ = 0;
      pending_ = n_blocks;
    }
    cv_.notify_all();
    drain();
    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

  /// Elementwise convenience: fn(begin, end) over row grids sized for the
  /// pool (block count fixed at kGridBlocks for reproducibility).
  void for_rows(int64_t total, const std::function<void(int64_t, int64_t)>& fn) {
    for_blocks(total, kGridBlocks, [&fn](int, int64_t lo, int64_t hi) { fn(lo, hi); });
  }

  /// Fixed block-grid used for reductions with per-block partials.
  static constexpr int kGridBlocks = 16;

 private:
  static std::pair<int64_t, int64_t> block_range(int64_t total, int n_blocks, int b) {
    const int64_t base = total / n_blocks;
    const int64_t rem = total % n_blocks;
    const int64_t lo = b * base + std::min<int64_t>(b, rem);
    const int64_t hi = lo + base + (b < rem ? 1 : 0);
    return {lo, hi};
  }

  void worker_loop() {
    for (;;) {
      const std::function<void(int, int64_t, int64_t)>* fn = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return stop_ || (job_fn_ && next_block_ < job_blocks_); });
        if (stop_) return;
        fn = job_fn_;
      }
      run_blocks(*fn);
    }
  }

  void drain() {
    const std::function<void(int, int64_t, int64_t)>* fn = nullptr;
    {
      std::lock_guard<std::mutex> lk(mu_);
      fn = job_fn_;
    }
    if (fn) run_blocks(*fn);
  }

  void run_blocks(const std::function<void(int, int64_t, int64_t)>& fn) {
    for (;;) {
      int b;
      int64_t total;
      int blocks;
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (next_block_ >= job_blocks_) return;
        b = next_block_++;
        total = job_total_;
        blocks = job_blocks_;
      }
      auto [lo, hi] = block_range(total, blocks, b);
      fn(b, lo, hi);
      {
        std::lock_guard<std::mutex> lk(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  bool stop_ = false;
  const std::function<void(int, int64_t, int64_t)>* job_fn_ = nullptr;
  int64_t job_total_ = 0;
  int job_blocks_ = 0;
  int next_block_ = 0;
  int pending_ = 0;
};

}  // namespace nlmap
