#pragma once

#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace snic {

inline int default_thread_count() {
  unsigned n = std::thread::hardware_concurrency();
  return n == 0 ? 1 : static_cast<int>(n);
}

// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; callers
// that need deterministic output write into per-index slots so the result is
// independent of the thread count.
inline void parallel_for(int64_t n, int num_threads,
                         const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  if (num_threads <= 0) num_threads = default_thread_count();
  if (num_threads == 1 || n == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  int workers = static_cast<int>(num_threads < n ? num_threads : n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::exception_ptr err;
  std::mutex err_mu;
  for (int t = 0; t < workers; ++t) {
    int64_t begin = n * t / workers;
    int64_t end = n * (t + 1) / workers;
    pool.emplace_back([&, begin, end]() {
      try {
        for (int64_t i = begin; i < end; ++i) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace snic
