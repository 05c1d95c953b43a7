#pragma once

#include <string>

#include "dynpatch/volume.hpp"

namespace dynpatch {

struct ModelConfig {
  Index embed_dim = 16;
  int enc_depth = 2;
  int enc_heads = 2;
  Index dec_dim = 12;
  int dec_depth = 1;
  int dec_heads = 2;
  int num_scales = 2;
  Index base_edge = 2;
  Index frames = 2;
  double mask_ratio = 0.75;
  bool patch_norm_targets = false;
  double mlp_ratio = 4.0;

  /// Throws BadConfig when head counts do not divide the widths etc.
  void validate() const;

  Index hidden(Index dim) const;
  Index edge(int scale) const noexcept { return base_edge << scale; }
  Index voxel_volume(int scale) const noexcept { return edge(scale) * edge(scale) * edge(scale); }
  /// Length of the flattened voxel vector of a scale-s token (T * V_s).
  Index token_length(int scale) const noexcept { return frames * voxel_volume(scale); }

  bool operator==(const ModelConfig &) const = default;
};

std::string to_json_text(const ModelConfig &cfg);
ModelConfig model_config_from_json(const std::string &text);

} // namespace dynpatch
