#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dynpatch/complexity.hpp"
#include "dynpatch/volume.hpp"

namespace dynpatch {

/// Boolean flag per grid cell (x-fastest). true = foreground.
struct CellMask {
  Dims3 grid{0, 0, 0};
  Index edge = 0;
  std::vector<std::uint8_t> flags;

  Index cells() const noexcept { return grid[0] * grid[1] * grid[2]; }
  Index cell(Index gx, Index gy, Index gz) const noexcept { return gx + grid[0] * (gy + grid[1] * gz); }
  bool operator()(Index gx, Index gy, Index gz) const { return flags[cell(gx, gy, gz)] != 0; }
  Index count() const;
};

inline constexpr double kDefaultBackgroundThreshold = 1e-3;
inline constexpr double kDefaultTau = 0.25;
inline constexpr Index kDefaultBaseEdge = 4;
inline constexpr int kDefaultScales = 2;

/// Foreground test per cell of edge `edge`: a cell is background when the mean
/// of the temporal-mean intensity, divided by its global maximum, is below
/// bg_thresh. A volume whose temporal mean has no positive maximum is all
/// background.
CellMask prune_background(const Volume4D &vol, Index edge, double bg_thresh);

struct TokenRec {
  std::array<Index, 3> origin{0, 0, 0};
  int scale = 0;
  Index linear_index = 0;

  bool operator==(const TokenRec &) const = default;
};

struct TokenLayout {
  std::vector<TokenRec> tokens;
  Index base_edge = kDefaultBaseEdge;
  int num_scales = kDefaultScales;
  Dims4 volume_dims{0, 0, 0, 0};
  double tau = kDefaultTau;
  double bg_thresh = kDefaultBackgroundThreshold;

  Index size() const noexcept { return static_cast<Index>(tokens.size()); }
  Index edge(int scale) const noexcept { return base_edge << scale; }
  /// V_s: spatial voxel count of a scale-s token.
  Index voxel_volume(int scale) const noexcept { return edge(scale) * edge(scale) * edge(scale); }
  Index count(int scale) const;
};

/// Per-level gating inputs. Level s holds cells of edge base_edge * 2^s.
/// scores[s] is consulted for s >= 1 (level 0 never gates); foreground[s]
/// for every level (level K-1 is the pruning step, lower levels re-test
/// children of subdivided cells).
struct GatePyramid {
  Index base_edge = kDefaultBaseEdge;
  int num_scales = kDefaultScales;
  double bg_thresh = kDefaultBackgroundThreshold;
  Dims4 volume_dims{0, 0, 0, 0};
  std::vector<ComplexityMap> scores;
  std::vector<CellMask> foreground;
};

struct PyramidOptions {
  Index base_edge = kDefaultBaseEdge;
  int num_scales = kDefaultScales;
  double bg_thresh = kDefaultBackgroundThreshold;
  ComplexityMetric metric = ComplexityMetric::variance;
  /// Re-test sub-patches of subdivided cells against the background threshold.
  bool retest_children = true;
};

/// Builds the gating pyramid: complexity from `signal` (typically the
/// Z-scored volume), background from `intensity` (the volume before
/// normalization). Both must share spatial dims divisible by the coarse edge.
GatePyramid build_gate_pyramid(const Volume4D &signal, const Volume4D &intensity, const PyramidOptions &opts);

/// Coarse-to-fine partition: foreground coarse cells with score < tau become
/// one token, the others are split into 2^3 children recursively down to
/// scale 0. Output is sorted by (scale desc, z, y, x).
TokenLayout partition(const GatePyramid &pyramid, double tau);

struct TokenCountReport {
  std::vector<Index> per_scale;
  Index total = 0;
  /// Base-edge cells inside the foreground coarse cells.
  Index uniform_fine_total = 0;
  /// Base-edge cells over the whole volume.
  Index full_fine_total = 0;
  /// total / full_fine_total.
  double reduction_ratio = 0.0;
};

TokenCountReport token_count_report(const TokenLayout &layout);

/// Voxels of one token over all frames, ordered (t, z, y, x) with x fastest.
Eigen::ArrayXd extract_token_voxels(const Volume4D &vol, const TokenRec &tok, Index base_edge);

struct MaskPlan {
  std::vector<std::uint8_t> masked;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  Index size() const noexcept { return static_cast<Index>(masked.size()); }
  Index masked_count() const;
  std::vector<Index> masked_indices() const;
  std::vector<Index> visible_indices() const;
  bool operator==(const MaskPlan &) const = default;
};

/// Masks floor(ratio * N) tokens chosen by a seeded Fisher-Yates shuffle.
MaskPlan sample_mask(const TokenLayout &layout, double ratio, std::uint64_t seed);
MaskPlan sample_mask(Index num_tokens, double ratio, std::uint64_t seed);

struct TokenizeOptions {
  PyramidOptions pyramid;
  double tau = kDefaultTau;
  /// Compute complexity on the globally Z-scored volume.
  bool zscore = true;
};

struct TokenizedVolume {
  Volume4D signal;  // padded (and Z-scored when requested); reconstruction targets
  TokenLayout layout;
  CellMask coarse_foreground;
};

/// Pad to the coarse edge, build the gate pyramid and partition.
TokenizedVolume tokenize_volume(const Volume4D &raw, const TokenizeOptions &opts);

void write_layout_json(const TokenLayout &layout, const std::filesystem::path &path);
TokenLayout read_layout_json(const std::filesystem::path &path);
void write_mask_json(const MaskPlan &plan, const std::filesystem::path &path);

} // namespace dynpatch
