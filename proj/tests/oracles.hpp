#pragma once
// Independent reference implementations used only by tests. They favour
// direct loops over the library's pooled / batched formulations.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>
#include <vector>

#include "dynpatch/phantom.hpp"
#include "dynpatch/rng.hpp"
#include "dynpatch/volume.hpp"

namespace oracle {

using dynpatch::Index;
using dynpatch::Volume4D;

inline Volume4D random_volume(dynpatch::Dims4 dims, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Volume4D v(dims, 0.0);
  dynpatch::CounterRng rng(seed);
  for (Index i = 0; i < v.size(); ++i)
    v.data[i] = static_cast<double>(static_cast<float>(rng.uniform(lo, hi)));
  return v;
}

/// Two-pass population variance per patch per frame, averaged over frames.
inline double naive_patch_variance(const Volume4D &v, Index x0, Index y0, Index z0, Index edge) {
  double acc = 0.0;
  for (Index t = 0; t < v.frames(); ++t) {
    double mean = 0.0;
    for (Index z = z0; z < z0 + edge; ++z)
      for (Index y = y0; y < y0 + edge; ++y)
        for (Index x = x0; x < x0 + edge; ++x)
          mean += v(x, y, z, t);
    mean /= static_cast<double>(edge * edge * edge);
    double var = 0.0;
    for (Index z = z0; z < z0 + edge; ++z)
      for (Index y = y0; y < y0 + edge; ++y)
        for (Index x = x0; x < x0 + edge; ++x)
          var += (v(x, y, z, t) - mean) * (v(x, y, z, t) - mean);
    acc += var / static_cast<double>(edge * edge * edge);
  }
  return acc / static_cast<double>(v.frames());
}

inline double naive_temporal_mean(const Volume4D &v, Index x, Index y, Index z) {
  double s = 0.0;
  for (Index t = 0; t < v.frames(); ++t)
    s += v(x, y, z, t);
  return s / static_cast<double>(v.frames());
}

/// Brute-force 27-term stencil at one voxel; out-of-volume neighbours take
/// the value of the nearest border voxel.
inline double naive_laplacian(const Volume4D &mean, Index x, Index y, Index z) {
  double acc = 0.0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const Index xx = std::min(std::max<Index>(x + dx, 0), mean.nx() - 1);
        const Index yy = std::min(std::max<Index>(y + dy, 0), mean.ny() - 1);
        const Index zz = std::min(std::max<Index>(z + dz, 0), mean.nz() - 1);
        const double val = mean(xx, yy, zz);
        acc += (dx == 0 && dy == 0 && dz == 0 ? -26.0 : 1.0) * val;
      }
  return acc;
}

using TokenKey = std::tuple<Index, Index, Index, int>; // x, y, z, scale

/// Recursive partitioner that recomputes every quantity from voxels:
/// background from the max-normalized temporal mean of `intensity`,
/// complexity as the two-pass variance of `signal`.
struct BruteForcePartitioner {
  const Volume4D &signal;
  const Volume4D &intensity;
  Index base_edge;
  int scales;
  double tau;
  double bg_thresh;
  bool retest_children = true;
  double peak = 0.0;
  std::set<TokenKey> tokens;

  bool foreground(Index x0, Index y0, Index z0, Index edge) const {
    if (!(peak > 0.0))
      return false;
    double s = 0.0;
    for (Index z = z0; z < z0 + edge; ++z)
      for (Index y = y0; y < y0 + edge; ++y)
        for (Index x = x0; x < x0 + edge; ++x)
          s += naive_temporal_mean(intensity, x, y, z) / peak;
    return s / static_cast<double>(edge * edge * edge) >= bg_thresh;
  }

  void recurse(Index x0, Index y0, Index z0, int s) {
    const Index edge = base_edge << s;
    if (s == 0 || naive_patch_variance(signal, x0, y0, z0, edge) < tau) {
      tokens.insert({x0, y0, z0, s});
      return;
    }
    const Index h = edge / 2;
    for (Index dz = 0; dz < 2; ++dz)
      for (Index dy = 0; dy < 2; ++dy)
        for (Index dx = 0; dx < 2; ++dx) {
          const Index cx = x0 + dx * h, cy = y0 + dy * h, cz = z0 + dz * h;
          if (!retest_children || foreground(cx, cy, cz, h))
            recurse(cx, cy, cz, s - 1);
        }
  }

  std::set<TokenKey> run() {
    peak = -INFINITY;
    for (Index z = 0; z < intensity.nz(); ++z)
      for (Index y = 0; y < intensity.ny(); ++y)
        for (Index x = 0; x < intensity.nx(); ++x)
          peak = std::max(peak, naive_temporal_mean(intensity, x, y, z));
    const Index coarse = base_edge << (scales - 1);
    for (Index z = 0; z < signal.nz(); z += coarse)
      for (Index y = 0; y < signal.ny(); y += coarse)
        for (Index x = 0; x < signal.nx(); x += coarse)
          if (foreground(x, y, z, coarse))
            recurse(x, y, z, scales - 1);
    return tokens;
  }
};

/// Writes a NIfTI-1 file from a raw volume by prepending a hand-packed
/// header; independent of the library's parser.
inline void write_nifti_fixture(const Volume4D &v, const std::filesystem::path &path, bool big_endian,
                                std::int16_t datatype = 16) {
  std::vector<std::uint8_t> hdr(352, 0);
  auto put = [&](std::size_t off, auto value) {
    using U = std::conditional_t<sizeof(value) == 2, std::uint16_t,
                                 std::conditional_t<sizeof(value) == 4, std::uint32_t, std::uint64_t>>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const std::size_t shift = big_endian ? (sizeof(U) - 1 - i) * 8 : i * 8;
      hdr[off + i] = static_cast<std::uint8_t>(bits >> shift);
    }
  };
  put(0, std::int32_t{348});
  const bool four_d = v.frames() > 1;
  const std::int16_t dims[8] = {static_cast<std::int16_t>(four_d ? 4 : 3), static_cast<std::int16_t>(v.nx()),
                                static_cast<std::int16_t>(v.ny()),         static_cast<std::int16_t>(v.nz()),
                                static_cast<std::int16_t>(v.frames()),     1, 1, 1};
  for (int i = 0; i < 8; ++i)
    put(40 + 2 * static_cast<std::size_t>(i), dims[i]);
  put(70, datatype);
  put(72, static_cast<std::int16_t>(datatype == 4 ? 16 : datatype == 16 ? 32 : 64));
  const float pix[8] = {1.0f, static_cast<float>(v.spacing_mm[0]), static_cast<float>(v.spacing_mm[1]),
                        static_cast<float>(v.spacing_mm[2]), static_cast<float>(v.tr_seconds), 0, 0, 0};
  for (int i = 0; i < 8; ++i)
    put(76 + 4 * static_cast<std::size_t>(i), pix[i]);
  put(108, 352.0f);
  put(112, 1.0f);
  put(116, 0.0f);
  hdr[344] = 'n';
  hdr[345] = '+';
  hdr[346] = '1';
  std::vector<std::uint8_t> bytes = hdr;
  auto append = [&](auto value) {
    using U = std::conditional_t<sizeof(value) == 2, std::uint16_t,
                                 std::conditional_t<sizeof(value) == 4, std::uint32_t, std::uint64_t>>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const std::size_t shift = big_endian ? (sizeof(U) - 1 - i) * 8 : i * 8;
      bytes.push_back(static_cast<std::uint8_t>(bits >> shift));
    }
  };
  for (Index i = 0; i < v.size(); ++i) {
    if (datatype == 4)
      append(static_cast<std::int16_t>(v.data[i]));
    else if (datatype == 16)
      append(static_cast<float>(v.data[i]));
    else
      append(v.data[i]);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Byte-swaps the multi-byte fields of a NIfTI header buffer that the parser reads.
inline std::vector<std::uint8_t> byteswap_header(std::vector<std::uint8_t> b) {
  auto swap = [&](std::size_t off, std::size_t width) { std::reverse(b.begin() + off, b.begin() + off + width); };
  swap(0, 4);
  for (std::size_t i = 0; i < 8; ++i)
    swap(40 + 2 * i, 2);
  swap(70, 2);
  swap(72, 2);
  for (std::size_t i = 0; i < 8; ++i)
    swap(76 + 4 * i, 4);
  swap(108, 4);
  swap(112, 4);
  swap(116, 4);
  return b;
}

inline std::filesystem::path temp_dir(const std::string &name) {
  auto dir = std::filesystem::temp_directory_path() / ("dynpatch_test_" + name);
  std::filesystem::create_directories(dir);
  return dir;
}

} // namespace oracle
