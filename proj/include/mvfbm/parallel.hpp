#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <span>
#include <thread>
#include <vector>

namespace mvfbm {

namespace detail {
inline std::atomic<int>& worker_slot() {
  static std::atomic<int> w{0};
  return w;
}
}  // namespace detail

// 0 means "not set": fall back to MVFBM_WORKERS, then 1.
inline void set_workers(int n) { detail::worker_slot() = std::max(0, n); }

inline int workers() {
  const int w = detail::worker_slot();
  if (w > 0) return w;
  if (const char* env = std::getenv("MVFBM_WORKERS")) {
    const int e = std::atoi(env);
    if (e > 0) return e;
  }
  return 1;
}

// Runs fn(begin, end) over contiguous chunks.  Each index is handled by
// exactly one call, so results never depend on the worker count as long as
// fn writes only to per-index slots.
template <class F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers()), std::max<std::size_t>(n, 1));
  if (w <= 1) {
    fn(std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> pool;
  // The lowest failing chunk wins so error reports are schedule-independent.
  std::vector<std::exception_ptr> errs(w);
  const std::size_t chunk = (n + w - 1) / w;
  for (std::size_t t = 0; t < w; ++t) {
    const std::size_t b = t * chunk, e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&, t, b, e] {
      try {
        fn(b, e);
      } catch (...) {
        errs[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errs)
    if (e) std::rethrow_exception(e);
}

// Fixed-shape pairwise tree over the index order.
inline double pairwise_sum(std::span<const double> x) {
  if (x.size() <= 8) {
    double s = 0.0;
    for (double v : x) s += v;
    return s;
  }
  const std::size_t h = x.size() / 2;
  return pairwise_sum(x.first(h)) + pairwise_sum(x.subspan(h));
}

inline double pairwise_mean(std::span<const double> x) { return x.empty() ? 0.0 : pairwise_sum(x) / x.size(); }

}  // namespace mvfbm
