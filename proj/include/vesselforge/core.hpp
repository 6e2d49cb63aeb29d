#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <numbers>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vesselforge {

// Error hierarchy. Every failure the library reports derives from Error so the
// CLI can map it to an exit code and a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error("format", what + " (byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class UnsupportedTypeError : public Error {
 public:
  explicit UnsupportedTypeError(int code)
      : Error("unsupported_type", "unsupported NIfTI datatype code " + std::to_string(code)),
        code_(code) {}
  int code() const noexcept { return code_; }

 private:
  int code_;
};

struct SizeMismatchError : Error {
  explicit SizeMismatchError(const std::string& what) : Error("size_mismatch", what) {}
};
struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};
struct CapacityError : Error {
  explicit CapacityError(const std::string& what) : Error("capacity", what) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

// splitmix64 finalizer; used to derive independent seeds from (seed, id).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t id = 0) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (id + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Seeded generator with distribution code of our own so streams are identical
// across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

template <typename It>
void shuffle(It first, It last, Rng& rng) {
  const auto n = static_cast<std::int64_t>(last - first);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = rng.uniform_int(0, i);
    std::swap(first[i], first[j]);
  }
}

// Worker count shared by the parallel loops. 0 means "not configured"; the
// VESSELFORGE_THREADS variable is consulted then.
inline std::atomic<int>& thread_setting() {
  static std::atomic<int> n{0};
  return n;
}

inline void set_num_threads(int n) { thread_setting() = std::max(1, n); }

inline int num_threads() {
  int n = thread_setting();
  if (n > 0) return n;
  if (const char* env = std::getenv("VESSELFORGE_THREADS")) {
    const int v = std::atoi(env);
    if (v > 0) return v;
  }
  return 1;
}

// Runs fn(i) for i in [0, n). Each index is processed exactly once; callers
// write results into per-index slots so output never depends on scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(num_threads(), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace vesselforge
