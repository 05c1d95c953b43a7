#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>

#include <Eigen/Core>

namespace dynpatch {

using Index = Eigen::Index;
using Dims3 = std::array<Index, 3>;
using Dims4 = std::array<Index, 4>;

/// Dense H x W x D x T scalar field. Storage is x-fastest over space with
/// time outermost, so frame t occupies [t*H*W*D, (t+1)*H*W*D).
struct Volume4D {
  Dims4 dims{0, 0, 0, 0};
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};
  double tr_seconds = 1.0;
  Eigen::ArrayXd data;

  Volume4D() = default;
  Volume4D(Dims4 d, double fill = 0.0);

  Index nx() const noexcept { return dims[0]; }
  Index ny() const noexcept { return dims[1]; }
  Index nz() const noexcept { return dims[2]; }
  Index frames() const noexcept { return dims[3]; }
  Index voxels_per_frame() const noexcept { return dims[0] * dims[1] * dims[2]; }
  Index size() const noexcept { return voxels_per_frame() * dims[3]; }
  Dims3 spatial() const noexcept { return {dims[0], dims[1], dims[2]}; }

  Index index(Index x, Index y, Index z, Index t = 0) const noexcept {
    return x + dims[0] * (y + dims[1] * (z + dims[2] * t));
  }
  double &operator()(Index x, Index y, Index z, Index t = 0) { return data[index(x, y, z, t)]; }
  double operator()(Index x, Index y, Index z, Index t = 0) const { return data[index(x, y, z, t)]; }

  /// One frame as a contiguous view.
  auto frame(Index t) const { return data.segment(t * voxels_per_frame(), voxels_per_frame()); }
  auto frame(Index t) { return data.segment(t * voxels_per_frame(), voxels_per_frame()); }

  /// Throws SizeMismatch / NonFiniteData / BadDims when invariants are broken.
  void validate() const;

  bool operator==(const Volume4D &other) const;
};

enum class VolumeFormat { nifti, raw };

/// Infers the format from the extension (.nii/.hdr -> nifti, otherwise raw).
VolumeFormat guess_format(const std::filesystem::path &path);

Volume4D load_volume(const std::filesystem::path &path, VolumeFormat format);
inline Volume4D load_volume(const std::filesystem::path &path) { return load_volume(path, guess_format(path)); }

/// Writes `path` (little-endian float32 payload) and `path` + ".json".
void write_raw_volume(const Volume4D &vol, const std::filesystem::path &path);

/// Sidecar path for a raw payload.
std::filesystem::path raw_sidecar_path(const std::filesystem::path &payload);

/// Subtracts the global mean and divides by the global population std
/// over every entry of the volume.
Volume4D zscore_global(const Volume4D &vol);

/// Center crop / symmetric zero pad of the spatial axes; an odd excess goes
/// to the high side.
Volume4D crop_or_pad(const Volume4D &vol, const Dims3 &target);

/// Pads each spatial axis up to the next multiple of `edge`.
Volume4D pad_to_multiple(const Volume4D &vol, Index edge);

/// Align-corners trilinear resampling of every frame.
Volume4D resample_spatial_trilinear(const Volume4D &vol, const Dims3 &target);

/// Per-voxel linear interpolation onto t = k * target_tr, k = 0.., t <= (T-1) * tr.
Volume4D resample_time_linear(const Volume4D &vol, double target_tr);

/// Per-voxel mean over time (T = 1 output).
Volume4D temporal_mean(const Volume4D &vol);

/// Align-corners trilinear sampling of a single-frame field at arbitrary
/// target dims. Shared by resampling and the reconstruction-error metric.
Eigen::ArrayXd trilinear_align_corners(std::span<const double> src, const Dims3 &src_dims, const Dims3 &dst_dims);

} // namespace dynpatch
