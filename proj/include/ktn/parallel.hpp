#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ktn {

/// Process-wide worker cap; 0 means hardware concurrency.
inline std::size_t& thread_cap() {
  static std::size_t cap = 0;
  return cap;
}

inline std::size_t worker_count(std::size_t tasks) {
  std::size_t n = thread_cap() ? thread_cap() : std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, tasks));
}

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs, which
/// keeps results independent of the worker count. The first exception thrown by
/// any worker is rethrown on the caller.
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace ktn
