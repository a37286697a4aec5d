#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace msa2net {

// ---------------------------------------------------------------------------
// Errors. Each maps to one CLI exit class: usage/configuration -> 1,
// data/format -> 2, numerical failure -> 3.
// ---------------------------------------------------------------------------

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

class UsageError : public std::runtime_error {
 public:
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

class DataError : public std::runtime_error {
 public:
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public std::runtime_error {
 public:
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// ---------------------------------------------------------------------------
// Shape of a rank-4 feature map [N, C, H, W].
// ---------------------------------------------------------------------------

struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;

  int dim(int axis) const {
    switch (axis) {
      case 0: return n;
      case 1: return c;
      case 2: return h;
      default: return w;
    }
  }
  void set_dim(int axis, int v) {
    switch (axis) {
      case 0: n = v; break;
      case 1: c = v; break;
      case 2: h = v; break;
      default: w = v; break;
    }
  }

  std::string str() const {
    return "[" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + "]";
  }
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64 is fully specified by the standard;
// distributions are not, so uniform/normal are derived from raw draws here.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // inclusive range
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1u;
    return lo + static_cast<std::int64_t>(eng_() % range);
  }

  // Box-Muller with cached spare
  double normal(double mu = 0.0, double sigma = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mu + sigma * spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mu + sigma * r * std::cos(theta);
  }

  // splitmix64 mixing for derived child seeds
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1u);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Operation counting used by the FLOP estimator cross-check. When a counter
// is installed, conv/matmul kernels add multiply counts and every other
// arithmetic kernel adds its output element count. Pure data movement
// (reshape, slice scatter) counts nothing.
// ---------------------------------------------------------------------------

struct OpCounter {
  unsigned long long macs = 0;
  unsigned long long elems = 0;
};

// Closed-form forward cost of a module: conv/matmul multiplies plus
// once-per-element counts of the other arithmetic kernels. FLOPs are
// reported as 2*MAC + elementwise.
struct OpCost {
  unsigned long long macs = 0;
  unsigned long long elems = 0;

  OpCost& operator+=(const OpCost& o) {
    macs += o.macs;
    elems += o.elems;
    return *this;
  }
  unsigned long long flops() const { return 2 * macs + elems; }
};

inline OpCounter*& op_counter_slot() {
  static OpCounter* slot = nullptr;
  return slot;
}

inline void count_macs(unsigned long long m) {
  if (OpCounter* c = op_counter_slot()) c->macs += m;
}

inline void count_elems(unsigned long long e) {
  if (OpCounter* c = op_counter_slot()) c->elems += e;
}

class CountScope {
 public:
  CountScope() : prev_(op_counter_slot()) { op_counter_slot() = &counter_; }
  ~CountScope() { op_counter_slot() = prev_; }
  CountScope(const CountScope&) = delete;
  CountScope& operator=(const CountScope&) = delete;
  const OpCounter& counts() const { return counter_; }

 private:
  OpCounter counter_;
  OpCounter* prev_;
};

// ---------------------------------------------------------------------------
// Internal parallelism. MSA2NET_THREADS caps the worker count; every parallel
// loop partitions disjoint output slices with a fixed per-chunk iteration
// order, so results are bitwise identical for any thread count.
// ---------------------------------------------------------------------------

inline int& thread_count_slot() {
  static int count = [] {
    if (const char* env = std::getenv("MSA2NET_THREADS")) {
      const int v = std::atoi(env);
      if (v >= 1) return std::min(v, 64);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hw, 1u, 8u));
  }();
  return count;
}

inline int thread_count() { return thread_count_slot(); }
inline void set_thread_count(int n) { thread_count_slot() = std::max(1, n); }

namespace detail {

inline thread_local bool tls_in_pool_worker = false;

// Persistent worker pool; chunk 0 always runs on the calling thread.
class TaskPool {
 public:
  static TaskPool& instance() {
    static TaskPool* pool = new TaskPool();  // leaked: no shutdown races
    return *pool;
  }

  void run(int nchunks, const std::function<void(int)>& fn) {
    ensure_workers(nchunks - 1);
    {
      std::unique_lock<std::mutex> lk(mu_);
      job_ = &fn;
      job_chunks_ = nchunks;
      job_next_ = 1;
      job_pending_ = nchunks - 1;
    }
    cv_work_.notify_all();
    fn(0);
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [&] { return job_pending_ == 0; });
    job_ = nullptr;
  }

 private:
  TaskPool() = default;

  void ensure_workers(int needed) {
    std::unique_lock<std::mutex> lk(mu_);
    while (static_cast<int>(workers_.size()) < needed)
      workers_.emplace_back([this] { worker_loop(); });
  }

  void worker_loop() {
    tls_in_pool_worker = true;
    while (true) {
      int chunk = -1;
      const std::function<void(int)>* job = nullptr;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_work_.wait(lk, [&] { return job_ && job_next_ < job_chunks_; });
        job = job_;
        chunk = job_next_++;
      }
      (*job)(chunk);
      {
        std::unique_lock<std::mutex> lk(mu_);
        if (--job_pending_ == 0) cv_done_.notify_all();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_work_, cv_done_;
  const std::function<void(int)>* job_ = nullptr;
  int job_chunks_ = 0;
  int job_next_ = 0;
  int job_pending_ = 0;
};

}  // namespace detail

// scalar-op threshold below which parallel dispatch is not worth its latency
inline constexpr std::int64_t kParallelGrain = 16384;

// Splits [0, total) into contiguous chunks, one per worker. `cost_per_item`
// is a rough scalar-op count used to skip dispatch for small workloads.
inline void parallel_for(std::int64_t total,
                         const std::function<void(std::int64_t, std::int64_t)>& fn,
                         std::int64_t cost_per_item = 1) {
  if (total <= 0) return;
  int nt = static_cast<int>(std::min<std::int64_t>(thread_count(), total));
  if (op_counter_slot() != nullptr) nt = 1;  // counting stays on one thread
  if (detail::tls_in_pool_worker) nt = 1;    // no nested dispatch
  if (nt > 1 && total * cost_per_item < kParallelGrain) nt = 1;
  if (nt <= 1) {
    fn(0, total);
    return;
  }
  const std::int64_t chunk = (total + nt - 1) / nt;
  detail::TaskPool::instance().run(nt, [&](int c) {
    const std::int64_t lo = c * chunk;
    const std::int64_t hi = std::min<std::int64_t>(total, lo + chunk);
    if (lo < hi) fn(lo, hi);
  });
}

}  // namespace msa2net
