#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace dynpatch {

inline constexpr std::size_t kNiftiHeaderSize = 348;

enum class NiftiDatatype : std::int16_t { int16 = 4, float32 = 16, float64 = 64 };

/// The subset of the NIfTI-1 header this project reads. All fields are in
/// host order after parsing.
struct NiftiHeaderSubset {
  std::int32_t sizeof_hdr = 348;
  std::array<std::int16_t, 8> dim{};
  NiftiDatatype datatype = NiftiDatatype::float32;
  std::int16_t bitpix = 32;
  std::array<float, 8> pixdim{};
  float vox_offset = 352.0f;
  float scl_slope = 0.0f;
  float scl_inter = 0.0f;
  std::array<char, 4> magic{'n', '+', '1', '\0'};
  bool big_endian = false;

  bool single_file() const noexcept { return magic[1] == '+'; }

  /// Field-wise equality; the source byte order is not a header field.
  bool operator==(const NiftiHeaderSubset &o) const {
    return sizeof_hdr == o.sizeof_hdr && dim == o.dim && datatype == o.datatype && bitpix == o.bitpix &&
           pixdim == o.pixdim && vox_offset == o.vox_offset && scl_slope == o.scl_slope &&
           scl_inter == o.scl_inter && magic == o.magic;
  }
};

/// Decodes the first 348 bytes. Byte order is detected from sizeof_hdr.
NiftiHeaderSubset parse_nifti_header(std::span<const std::uint8_t> bytes);

std::size_t datatype_size(NiftiDatatype dt) noexcept;

} // namespace dynpatch
