#include "dynpatch/phantom.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "dynpatch/error.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

namespace {

void check_spec(const PhantomSpec &s) {
  auto range_ok = [](double lo, double hi) { return lo > 0.0 && hi >= lo; };
  if (s.edge < 1 || s.frames < 1 || s.edge_multiple < 1 || s.edge % s.edge_multiple != 0)
    throw Error(ErrorKind::BadSpec, "phantom edge must be a positive multiple of " + std::to_string(s.edge_multiple));
  for (double a : s.semi_axes)
    if (!(a > 0.0 && a <= 1.0))
      throw Error(ErrorKind::BadSpec, "semi-axis fractions must lie in (0, 1]");
  if (s.n_blobs < 0 || !range_ok(s.blob_amp_min, s.blob_amp_max) || !range_ok(s.blob_sigma_min, s.blob_sigma_max) ||
      !range_ok(s.blob_freq_min, s.blob_freq_max))
    throw Error(ErrorKind::BadSpec, "blob ranges must be positive with min <= max");
  if (s.noise_sigma < 0.0 || s.baseline_amp < 0.0 || !(s.tr_seconds > 0.0))
    throw Error(ErrorKind::BadSpec, "noise, baseline amplitude and TR must be non-negative");
}

double half(const PhantomSpec &s) { return 0.5 * static_cast<double>(s.edge); }

// Continuous coordinates relative to the volume centre, in units of the semi-axes.
double ellipsoid_radius2(const PhantomSpec &s, double x, double y, double z) {
  const double c = half(s) - 0.5;
  const double rx = (x - c) / (s.semi_axes[0] * half(s));
  const double ry = (y - c) / (s.semi_axes[1] * half(s));
  const double rz = (z - c) / (s.semi_axes[2] * half(s));
  return rx * rx + ry * ry + rz * rz;
}

struct Wave {
  std::array<double, 3> k{};
  double amp = 0.0, phase = 0.0;
};

} // namespace

bool inside_phantom_ellipsoid(const PhantomSpec &s, Index x, Index y, Index z) {
  return ellipsoid_radius2(s, static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)) <= 1.0;
}

std::vector<PhantomBlob> phantom_blobs(const PhantomSpec &s) {
  check_spec(s);
  CounterRng rng(derive_seed(s.seed, {0x626c6f62ULL}));
  std::vector<PhantomBlob> blobs;
  const double c = half(s) - 0.5;
  for (int b = 0; b < s.n_blobs; ++b) {
    PhantomBlob blob;
    // Rejection-sample a centre inside the inner 70% of the ellipsoid.
    for (;;) {
      std::array<double, 3> u{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
      if (u[0] * u[0] + u[1] * u[1] + u[2] * u[2] > 0.49)
        continue;
      for (int a = 0; a < 3; ++a)
        blob.center[a] = c + u[a] * s.semi_axes[a] * half(s);
      break;
    }
    blob.amplitude = rng.uniform(s.blob_amp_min, s.blob_amp_max);
    blob.sigma = rng.uniform(s.blob_sigma_min, s.blob_sigma_max) * static_cast<double>(s.edge);
    blob.frequency = rng.uniform(s.blob_freq_min, s.blob_freq_max);
    blob.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    blobs.push_back(blob);
  }
  return blobs;
}

Volume4D make_phantom(const PhantomSpec &s) {
  const auto blobs = phantom_blobs(s);
  CounterRng rng(derive_seed(s.seed, {0x62617365ULL}));
  std::array<Wave, 3> waves;
  for (auto &w : waves) {
    // Random direction with the requested number of cycles across the edge.
    const double theta = rng.uniform(0.0, std::numbers::pi), phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double kmag = 2.0 * std::numbers::pi * s.baseline_cycles / static_cast<double>(s.edge);
    w.k = {kmag * std::sin(theta) * std::cos(phi), kmag * std::sin(theta) * std::sin(phi), kmag * std::cos(theta)};
    w.amp = s.baseline_amp / 3.0 * rng.uniform(0.5, 1.5);
    w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }

  Volume4D vol({s.edge, s.edge, s.edge, s.frames}, 0.0);
  vol.tr_seconds = s.tr_seconds;
  CounterRng noise(derive_seed(s.seed, {0x6e6f6973ULL}));
  const auto T = static_cast<double>(s.frames);
  for (Index t = 0; t < s.frames; ++t)
    for (Index z = 0; z < s.edge; ++z)
      for (Index y = 0; y < s.edge; ++y)
        for (Index x = 0; x < s.edge; ++x) {
          if (!inside_phantom_ellipsoid(s, x, y, z))
            continue;
          const double px = static_cast<double>(x), py = static_cast<double>(y), pz = static_cast<double>(z);
          double v = s.baseline;
          for (const auto &w : waves)
            v += w.amp * std::cos(w.k[0] * px + w.k[1] * py + w.k[2] * pz + w.phase);
          for (const auto &b : blobs) {
            const double d2 = (px - b.center[0]) * (px - b.center[0]) + (py - b.center[1]) * (py - b.center[1]) +
                              (pz - b.center[2]) * (pz - b.center[2]);
            const double envelope = std::exp(-0.5 * d2 / (b.sigma * b.sigma));
            v += b.amplitude * envelope *
                 std::sin(2.0 * std::numbers::pi * b.frequency * static_cast<double>(t) / T + b.phase);
          }
          if (s.noise_sigma > 0.0)
            v += s.noise_sigma * noise.normal();
          vol(x, y, z, t) = v;
        }
  return vol;
}

} // namespace dynpatch
