#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "tforge/error.hpp"

namespace tforge::llm {

struct ThrottleOptions {
  std::size_t max_in_flight = 1;
  // Requests per second; <= 0 means unlimited.
  double rate = 0.0;
  // Checked before each new request is started.
  const std::atomic<bool>* cancel = nullptr;
};

// Runs fn(0..n-1) with at most max_in_flight calls outstanding and start
// times spaced at least 1/rate apart. Results come back in input order, and
// on_commit(i, result) is called in input order as soon as the prefix
// 0..i has finished.
//
// When a call throws, no new calls are started, in-flight calls drain, and
// the error of the lowest failing index is rethrown. Results before it have
// been committed.
template <class R>
std::vector<R> throttled_map(std::size_t n, const std::function<R(std::size_t)>& fn,
                             const ThrottleOptions& options,
                             const std::function<void(std::size_t, const R&)>& on_commit = {}) {
  if (options.max_in_flight < 1) throw UsageError("max_in_flight must be at least 1");
  using Clock = std::chrono::steady_clock;

  std::mutex mu;
  std::vector<std::optional<R>> results(n);
  std::vector<std::exception_ptr> errors(n);
  std::size_t next_index = 0;
  std::size_t next_commit = 0;
  bool stop = false;
  bool cancelled = false;
  Clock::time_point next_slot = Clock::now();
  const auto spacing = options.rate > 0.0
                           ? std::chrono::duration_cast<Clock::duration>(
                                 std::chrono::duration<double>(1.0 / options.rate))
                           : Clock::duration::zero();

  auto commit_ready = [&]() {
    while (next_commit < n && results[next_commit]) {
      if (on_commit) on_commit(next_commit, *results[next_commit]);
      ++next_commit;
    }
  };

  auto worker = [&]() {
    for (;;) {
      std::size_t i;
      Clock::time_point slot;
      {
        std::lock_guard lock(mu);
        if (stop || next_index >= n) return;
        if (options.cancel && options.cancel->load()) {
          stop = cancelled = true;
          return;
        }
        i = next_index++;
        slot = std::max(Clock::now(), next_slot);
        next_slot = slot + spacing;
      }
      std::this_thread::sleep_until(slot);
      try {
        R r = fn(i);
        std::lock_guard lock(mu);
        results[i].emplace(std::move(r));
        // Commits run under the lock, so they are serialized. A failed
        // index never gets a result, which halts commits there.
        commit_ready();
      } catch (...) {
        std::lock_guard lock(mu);
        errors[i] = std::current_exception();
        stop = true;
      }
    }
  };

  std::size_t threads = std::min(options.max_in_flight, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  for (std::size_t i = 0; i < n; ++i)
    if (errors[i]) std::rethrow_exception(errors[i]);
  if (cancelled) throw CancelledError("cancelled after " + std::to_string(next_commit) + " of " +
                                      std::to_string(n) + " requests");
  std::vector<R> out;
  out.reserve(n);
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

}  // namespace tforge::llm
