#pragma once

#include <array>
#include <cstdint>

#include "dynpatch/volume.hpp"

namespace dynpatch {

/// Synthetic 4D volume: zero outside a centred ellipsoid; inside, a smooth
/// baseline plus Gaussian blobs whose amplitude oscillates in time, plus
/// i.i.d. Gaussian noise.
struct PhantomSpec {
  Index edge = 64;
  Index frames = 8;
  /// Edge must be a multiple of this (coarse token edge).
  Index edge_multiple = 8;
  /// Semi-axes as fractions of the half edge.
  std::array<double, 3> semi_axes{0.85, 0.75, 0.8};
  double baseline = 2.0;
  double baseline_amp = 0.3;
  /// Spatial cycles of the baseline undulation across the edge.
  double baseline_cycles = 1.0;
  int n_blobs = 6;
  double blob_amp_min = 1.5, blob_amp_max = 3.0;
  /// Blob sigma as a fraction of the edge.
  double blob_sigma_min = 0.03, blob_sigma_max = 0.06;
  /// Temporal frequency in cycles over the whole series.
  double blob_freq_min = 1.0, blob_freq_max = 3.0;
  double noise_sigma = 0.05;
  double tr_seconds = 0.72;
  std::uint64_t seed = 0;
};

struct PhantomBlob {
  std::array<double, 3> center{};
  double amplitude = 0.0, sigma = 0.0, frequency = 0.0, phase = 0.0;
};

/// Blob parameters drawn for a spec; make_phantom uses exactly these.
std::vector<PhantomBlob> phantom_blobs(const PhantomSpec &spec);

/// True when the voxel centre lies inside the phantom's ellipsoid.
bool inside_phantom_ellipsoid(const PhantomSpec &spec, Index x, Index y, Index z);

Volume4D make_phantom(const PhantomSpec &spec);

} // namespace dynpatch
