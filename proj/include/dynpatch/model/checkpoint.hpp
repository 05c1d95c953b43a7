#pragma once

#include <filesystem>

#include "dynpatch/model/params.hpp"

namespace dynpatch {

inline constexpr std::uint8_t kCheckpointVersion = 1;

// Layout: version byte, uint32 LE manifest length, manifest JSON
// {"config": {...}, "tensors": [{"name", "shape": [rows, cols], "offset"}]},
// then the float32 LE payload. Offsets are bytes from the payload start.
void save_checkpoint(const std::filesystem::path &path, const ModelParams<float> &params);
ModelParams<float> load_checkpoint(const std::filesystem::path &path);

} // namespace dynpatch
