#include "dynpatch/nifti.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "dynpatch/error.hpp"

namespace dynpatch {

namespace {

template <typename T> T read_field(std::span<const std::uint8_t> bytes, std::size_t offset, bool big_endian) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint32_t>;
  U raw = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const std::size_t shift = big_endian ? (sizeof(T) - 1 - i) * 8 : i * 8;
    raw |= static_cast<U>(static_cast<U>(bytes[offset + i]) << shift);
  }
  return std::bit_cast<T>(raw);
}

// NIfTI-1 field offsets.
constexpr std::size_t kDimOffset = 40;
constexpr std::size_t kDatatypeOffset = 70;
constexpr std::size_t kBitpixOffset = 72;
constexpr std::size_t kPixdimOffset = 76;
constexpr std::size_t kVoxOffsetOffset = 108;
constexpr std::size_t kSclSlopeOffset = 112;
constexpr std::size_t kSclInterOffset = 116;
constexpr std::size_t kMagicOffset = 344;

} // namespace

std::size_t datatype_size(NiftiDatatype dt) noexcept {
  switch (dt) {
  case NiftiDatatype::int16: return 2;
  case NiftiDatatype::float32: return 4;
  case NiftiDatatype::float64: return 8;
  }
  return 0;
}

NiftiHeaderSubset parse_nifti_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kNiftiHeaderSize)
    throw Error(ErrorKind::ShortBuffer, "NIfTI header needs 348 bytes, got " + std::to_string(bytes.size()));

  NiftiHeaderSubset hdr;
  if (read_field<std::int32_t>(bytes, 0, false) == 348)
    hdr.big_endian = false;
  else if (read_field<std::int32_t>(bytes, 0, true) == 348)
    hdr.big_endian = true;
  else
    throw Error(ErrorKind::BadMagic, "sizeof_hdr is not 348 in either byte order");
  const bool be = hdr.big_endian;
  hdr.sizeof_hdr = 348;

  std::memcpy(hdr.magic.data(), bytes.data() + kMagicOffset, 4);
  const bool single = std::memcmp(hdr.magic.data(), "n+1\0", 4) == 0;
  const bool pair = std::memcmp(hdr.magic.data(), "ni1\0", 4) == 0;
  if (!single && !pair)
    throw Error(ErrorKind::BadMagic, "magic must be \"n+1\" or \"ni1\"");

  const auto code = read_field<std::int16_t>(bytes, kDatatypeOffset, be);
  if (code != 4 && code != 16 && code != 64)
    throw Error(ErrorKind::UnsupportedDatatype, "datatype code " + std::to_string(code));
  hdr.datatype = static_cast<NiftiDatatype>(code);
  hdr.bitpix = read_field<std::int16_t>(bytes, kBitpixOffset, be);

  for (std::size_t i = 0; i < 8; ++i) {
    hdr.dim[i] = read_field<std::int16_t>(bytes, kDimOffset + 2 * i, be);
    hdr.pixdim[i] = read_field<float>(bytes, kPixdimOffset + 4 * i, be);
  }
  if (hdr.dim[0] != 3 && hdr.dim[0] != 4)
    throw Error(ErrorKind::BadDims, "dim[0] must be 3 or 4, got " + std::to_string(hdr.dim[0]));
  for (int i = 1; i <= hdr.dim[0]; ++i)
    if (hdr.dim[i] < 1)
      throw Error(ErrorKind::BadDims, "dim[" + std::to_string(i) + "] = " + std::to_string(hdr.dim[i]));

  hdr.vox_offset = read_field<float>(bytes, kVoxOffsetOffset, be);
  hdr.scl_slope = read_field<float>(bytes, kSclSlopeOffset, be);
  hdr.scl_inter = read_field<float>(bytes, kSclInterOffset, be);
  return hdr;
}

} // namespace dynpatch
