#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace m2d {

// Error categories surfaced as distinct CLI exit codes.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {
template <typename E, typename... Parts>
[[noreturn]] void raise(Parts&&... parts) {
  std::ostringstream os;
  (os << ... << parts);
  throw E(os.str());
}
}  // namespace detail

template <typename... Parts>
void check_shape(bool ok, Parts&&... parts) {
  if (!ok) detail::raise<ShapeError>(std::forward<Parts>(parts)...);
}

template <typename... Parts>
void check_arg(bool ok, Parts&&... parts) {
  if (!ok) detail::raise<std::invalid_argument>(std::forward<Parts>(parts)...);
}

template <typename... Parts>
void check_numeric(bool ok, Parts&&... parts) {
  if (!ok) detail::raise<NumericError>(std::forward<Parts>(parts)...);
}

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Deterministic splitmix64 stream. std::normal_distribution and friends are
// implementation-defined, so all sampling goes through this class to keep
// runs byte-reproducible across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
  }

  // Box-Muller; consumes two uniforms per draw.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Independent child stream; tags keep purposes (batching, KL noise,
  // evaluation) from sharing draws.
  Rng split(uint64_t tag) const { return Rng(mix64(state_ ^ mix64(tag))); }

 private:
  uint64_t state_;
};

// Derives a per-episode seed; identical for serial and parallel evaluation.
inline uint64_t episode_seed(uint64_t base, uint64_t task_id, uint64_t episode) {
  return mix64(mix64(base ^ mix64(task_id + 1)) ^ mix64(episode + 1));
}

// Runs fn(i) for i in [0, n) across a bounded number of threads. Each index
// is processed exactly once and writes only its own slot, so results are
// identical to a serial loop.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn,
                         int max_threads = 0) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  int workers = max_threads > 0 ? max_threads : (hw > 0 ? hw : 1);
  if (workers <= 1 || n <= 1) {
    for (int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int64_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  std::exception_ptr err;
  std::mutex err_mu;
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        int64_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

}  // namespace m2d
