#pragma once

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace rlda {

// Runs fn(0..n-1) on up to `workers` threads. Every item must be independent
// and draw randomness from its own substream, so the result is identical to
// the serial order regardless of scheduling. The first exception (by item
// index) is rethrown after all threads join.
inline void parallel_for(int64_t n, int workers,
                         const std::function<void(int64_t)>& fn) {
  if (n <= 0) return;
  const int64_t nthreads =
      workers <= 1 ? 1 : std::min<int64_t>(workers, n);
  if (nthreads == 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::atomic<int64_t> first_bad{n};
  std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nthreads));
  for (int64_t w = 0; w < nthreads; ++w) {
    pool.emplace_back([&]() {
      for (;;) {
        const int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          errors[static_cast<size_t>(i)] = std::current_exception();
          int64_t cur = first_bad.load();
          while (i < cur && !first_bad.compare_exchange_weak(cur, i)) {
          }
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  const int64_t bad = first_bad.load();
  if (bad < n) std::rethrow_exception(errors[static_cast<size_t>(bad)]);
}

}  // namespace rlda
