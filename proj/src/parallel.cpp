#include "dynpatch/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

namespace dynpatch {

namespace {
std::atomic<int> g_max_threads{1};
}

void set_max_threads(int n) { g_max_threads.store(std::max(1, n)); }

int max_threads() noexcept { return g_max_threads.load(); }

void parallel_for(std::ptrdiff_t n, const std::function<void(std::ptrdiff_t)> &fn) {
  const std::ptrdiff_t workers = std::min<std::ptrdiff_t>(max_threads(), n);
  if (workers <= 1) {
    for (std::ptrdiff_t i = 0; i < n; ++i)
      fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  {
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    const std::ptrdiff_t chunk = (n + workers - 1) / workers;
    for (std::ptrdiff_t w = 0; w < workers; ++w) {
      const std::ptrdiff_t lo = w * chunk;
      const std::ptrdiff_t hi = std::min(n, lo + chunk);
      pool.emplace_back([&fn, &err = errors[static_cast<std::size_t>(w)], lo, hi] {
        try {
          for (std::ptrdiff_t i = lo; i < hi; ++i)
            fn(i);
        } catch (...) {
          err = std::current_exception();
        }
      });
    }
  }
  for (const auto &err : errors)
    if (err)
      std::rethrow_exception(err);
}

} // namespace dynpatch
