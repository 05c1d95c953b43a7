#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>

#include "dynpatch/volume.hpp"

namespace dynpatch {

enum class ComplexityMetric { variance, entropy, laplacian, recon_mse };

std::string_view to_string(ComplexityMetric m) noexcept;
/// Accepts "variance", "entropy", "laplacian", "mse" and "recon_mse".
std::optional<ComplexityMetric> parse_metric(std::string_view name) noexcept;
inline constexpr std::string_view kMetricNames = "variance, entropy, laplacian, mse";

/// Per-patch scores on the coarse grid, x-fastest like Volume4D.
struct ComplexityMap {
  Dims3 grid{0, 0, 0};
  Index coarse_edge = 0;
  ComplexityMetric metric = ComplexityMetric::variance;
  Eigen::ArrayXd scores;

  Index cells() const noexcept { return grid[0] * grid[1] * grid[2]; }
  Index cell(Index gx, Index gy, Index gz) const noexcept { return gx + grid[0] * (gy + grid[1] * gz); }
  double operator()(Index gx, Index gy, Index gz) const { return scores[cell(gx, gy, gz)]; }
};

inline constexpr double kEntropyEpsilon = 1e-12;
inline constexpr int kDefaultEntropyBins = 512;

/// Mean over time of the per-frame population variance inside each patch.
ComplexityMap variance_map(const Volume4D &vol, Index coarse_edge);

/// Shannon entropy (bits) of the temporal-mean intensity per patch, with the
/// histogram range taken from the global min/max of the temporal mean.
ComplexityMap entropy_map(const Volume4D &vol, Index coarse_edge, int bins = kDefaultEntropyBins);

/// Mean absolute 26-neighbour Laplacian response (centre weight -26) of the
/// temporal mean; border voxels replicate their nearest in-volume neighbour.
ComplexityMap laplacian_map(const Volume4D &vol, Index coarse_edge);

/// Mean squared error between the temporal mean and its average-pool /
/// trilinear-upsample reconstruction at `scale_factor`.
ComplexityMap recon_error_map(const Volume4D &vol, Index coarse_edge, Index scale_factor = 2);

ComplexityMap complexity_map(const Volume4D &vol, ComplexityMetric metric, Index coarse_edge);

/// Non-overlapping average pooling of one frame by `factor` on each axis.
Eigen::ArrayXd average_pool(std::span<const double> frame, const Dims3 &dims, Index factor);

/// Half-pixel-centre trilinear upsampling by an integer factor, edge clamped.
/// This is the exact inverse-geometry counterpart of average_pool.
Eigen::ArrayXd upsample_trilinear(std::span<const double> coarse, const Dims3 &coarse_dims, Index factor);

/// 26-neighbour Laplacian response of a single frame, zero padded.
Eigen::ArrayXd laplacian26(std::span<const double> frame, const Dims3 &dims);

void write_complexity_json(const ComplexityMap &map, const std::filesystem::path &path);
ComplexityMap read_complexity_json(const std::filesystem::path &path);

} // namespace dynpatch
