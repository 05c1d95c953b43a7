#pragma once

#include <cstddef>
#include <functional>

namespace dynpatch {

/// Upper bound on worker threads used by parallel_for (default 1).
void set_max_threads(int n);
int max_threads() noexcept;

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; fn must
/// only write to state owned by index i so results do not depend on the
/// schedule.
void parallel_for(std::ptrdiff_t n, const std::function<void(std::ptrdiff_t)> &fn);

} // namespace dynpatch
