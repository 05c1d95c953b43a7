#include "dynpatch/rng.hpp"

#include <cmath>
#include <numbers>

namespace dynpatch {

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) noexcept {
  std::uint64_t h = mix64(seed ^ 0x6A09E667F3BCC909ULL);
  for (std::uint64_t tag : tags)
    h = mix64(h + 0x9E3779B97F4A7C15ULL + mix64(tag));
  return h;
}

std::uint64_t CounterRng::below(std::uint64_t bound) noexcept {
  if (bound <= 1)
    return 0;
  // Largest multiple of bound that fits; reject draws above it.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % bound + 1) % bound;
  std::uint64_t r = next_u64();
  while (r > limit)
    r = next_u64();
  return r % bound;
}

double CounterRng::normal() noexcept {
  double u1 = uniform();
  const double u2 = uniform();
  if (u1 <= 0.0)
    u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

} // namespace dynpatch
