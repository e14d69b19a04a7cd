#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace defnet {

/// Worker count from DEFNET_THREADS (0 or unset = hardware concurrency).
inline std::size_t worker_count() {
  std::size_t n = 0;
  if (const char* env = std::getenv("DEFNET_THREADS")) {
    try {
      n = static_cast<std::size_t>(std::stoul(env));
    } catch (...) {
      n = 0;
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

/// Runs body(i) for i in [0, n). Each index is written by exactly one worker,
/// so callers that store results per index stay deterministic. The first
/// exception thrown by any worker is rethrown on the calling thread.
template <class F>
void parallel_for(std::size_t n, F&& body) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
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

}  // namespace defnet
