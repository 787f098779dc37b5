#pragma once

#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mtsplat {

// Raised for bad inputs (files, arguments, invalid parameters). CLI exit code 1.
class UserError : public std::runtime_error {
 public:
  explicit UserError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when an internal invariant is violated. CLI exit code 2.
class InternalError : public std::runtime_error {
 public:
  explicit InternalError(const std::string& msg) : std::runtime_error(msg) {}
};

#define MTS_CHECK(cond, msg)                                             \
  do {                                                                   \
    if (!(cond)) {                                                       \
      std::ostringstream oss_;                                           \
      oss_ << "invariant failed: " << msg << " (" << #cond << ")";       \
      throw ::mtsplat::InternalError(oss_.str());                        \
    }                                                                    \
  } while (0)

#define MTS_REQUIRE(cond, msg)                                           \
  do {                                                                   \
    if (!(cond)) {                                                       \
      std::ostringstream oss_;                                           \
      oss_ << msg;                                                       \
      throw ::mtsplat::UserError(oss_.str());                            \
    }                                                                    \
  } while (0)

inline int default_worker_count() {
  if (const char* env = std::getenv("MTSPLAT_WORKERS")) {
    int n = std::atoi(env);
    if (n > 0) return n;
  }
  unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

// Splits [0, n) into `workers` fixed contiguous chunks and runs
// fn(begin, end, worker_id) on each. The partition depends only on (n, workers),
// so per-worker accumulations can be reduced in worker order deterministically.
inline void parallel_for(std::size_t n, int workers,
                         const std::function<void(std::size_t, std::size_t, int)>& fn) {
  if (n == 0) return;
  if (workers < 1) workers = 1;
  std::size_t chunk = (n + static_cast<std::size_t>(workers) - 1) / workers;
  if (workers == 1 || chunk == n) {
    fn(0, n, 0);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (int w = 0; w < workers; ++w) {
    std::size_t begin = static_cast<std::size_t>(w) * chunk;
    if (begin >= n) break;
    std::size_t end = std::min(n, begin + chunk);
    threads.emplace_back([&fn, begin, end, w] { fn(begin, end, w); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace mtsplat
