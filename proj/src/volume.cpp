#include "dynpatch/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynpatch/error.hpp"
#include "dynpatch/nifti.hpp"

namespace dynpatch {

namespace fs = std::filesystem;
using json = nlohmann::json;

Volume4D::Volume4D(Dims4 d, double fill) : dims(d) {
  for (Index n : d)
    if (n < 1)
      throw Error(ErrorKind::BadDims, "volume dims must be positive");
  data = Eigen::ArrayXd::Constant(size(), fill);
}

void Volume4D::validate() const {
  for (Index n : dims)
    if (n < 1)
      throw Error(ErrorKind::BadDims, "volume dims must be positive");
  if (data.size() != size())
    throw Error(ErrorKind::SizeMismatch,
                "payload has " + std::to_string(data.size()) + " scalars, dims need " + std::to_string(size()));
  if (!data.allFinite())
    throw Error(ErrorKind::NonFiniteData, "volume contains NaN or Inf");
}

bool Volume4D::operator==(const Volume4D &o) const {
  if (dims != o.dims || spacing_mm != o.spacing_mm || tr_seconds != o.tr_seconds || data.size() != o.data.size())
    return false;
  return data.size() == 0 ||
         std::memcmp(data.data(), o.data.data(), static_cast<std::size_t>(data.size()) * sizeof(double)) == 0;
}

VolumeFormat guess_format(const fs::path &path) {
  const auto ext = path.extension().string();
  return (ext == ".nii" || ext == ".hdr") ? VolumeFormat::nifti : VolumeFormat::raw;
}

fs::path raw_sidecar_path(const fs::path &payload) { return fs::path(payload.string() + ".json"); }

namespace {

std::vector<std::uint8_t> read_file(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename U> U load_uint(const std::uint8_t *p, bool big_endian) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const std::size_t shift = big_endian ? (sizeof(U) - 1 - i) * 8 : i * 8;
    v |= static_cast<U>(static_cast<U>(p[i]) << shift);
  }
  return v;
}

double decode_scalar(const std::uint8_t *p, NiftiDatatype dt, bool big_endian) {
  switch (dt) {
  case NiftiDatatype::int16: return static_cast<double>(std::bit_cast<std::int16_t>(load_uint<std::uint16_t>(p, big_endian)));
  case NiftiDatatype::float32: return static_cast<double>(std::bit_cast<float>(load_uint<std::uint32_t>(p, big_endian)));
  case NiftiDatatype::float64: return std::bit_cast<double>(load_uint<std::uint64_t>(p, big_endian));
  }
  return 0.0;
}

Volume4D load_nifti(const fs::path &path) {
  const auto bytes = read_file(path);
  const auto hdr = parse_nifti_header(bytes);

  Volume4D vol;
  vol.dims = {hdr.dim[1], hdr.dim[2], hdr.dim[3], hdr.dim[0] == 4 ? hdr.dim[4] : Index{1}};
  for (int i = 0; i < 3; ++i)
    vol.spacing_mm[i] = hdr.pixdim[i + 1] > 0.0f ? static_cast<double>(hdr.pixdim[i + 1]) : 1.0;
  vol.tr_seconds = (hdr.dim[0] == 4 && hdr.pixdim[4] > 0.0f) ? static_cast<double>(hdr.pixdim[4]) : 1.0;

  std::vector<std::uint8_t> companion;
  std::span<const std::uint8_t> payload;
  if (hdr.single_file()) {
    if (hdr.vox_offset < 352.0f)
      throw Error(ErrorKind::BadMagic, "single-file NIfTI requires vox_offset >= 352");
    const auto offset = static_cast<std::size_t>(hdr.vox_offset);
    if (offset > bytes.size())
      throw Error(ErrorKind::SizeMismatch, "vox_offset beyond end of file");
    payload = std::span<const std::uint8_t>(bytes).subspan(offset);
  } else {
    auto img = path;
    img.replace_extension(".img");
    companion = read_file(img);
    const auto offset = static_cast<std::size_t>(std::max(0.0f, hdr.vox_offset));
    if (offset > companion.size())
      throw Error(ErrorKind::SizeMismatch, "vox_offset beyond end of companion file");
    payload = std::span<const std::uint8_t>(companion).subspan(offset);
  }

  const std::size_t width = datatype_size(hdr.datatype);
  const auto count = static_cast<std::size_t>(vol.size());
  if (payload.size() != count * width)
    throw Error(ErrorKind::SizeMismatch, "payload has " + std::to_string(payload.size()) + " bytes, dims need " +
                                             std::to_string(count * width));

  double slope = 1.0, inter = 0.0;
  if (hdr.datatype == NiftiDatatype::int16) {
    if (hdr.scl_slope != 0.0f && std::isfinite(hdr.scl_slope))
      slope = hdr.scl_slope;
    if (std::isfinite(hdr.scl_inter))
      inter = hdr.scl_inter;
  }
  vol.data.resize(static_cast<Index>(count));
  for (std::size_t i = 0; i < count; ++i)
    vol.data[static_cast<Index>(i)] = decode_scalar(payload.data() + i * width, hdr.datatype, hdr.big_endian) * slope + inter;
  vol.validate();
  return vol;
}

Volume4D load_raw(const fs::path &path) {
  json meta;
  {
    std::ifstream in(raw_sidecar_path(path));
    if (!in)
      throw Error(ErrorKind::IoError, "missing sidecar " + raw_sidecar_path(path).string());
    try {
      in >> meta;
    } catch (const json::exception &e) {
      throw Error(ErrorKind::IoError, std::string("malformed sidecar: ") + e.what());
    }
  }
  Volume4D vol;
  try {
    const auto dims = meta.at("dims").get<std::vector<Index>>();
    if (dims.size() != 4)
      throw Error(ErrorKind::BadDims, "sidecar dims must have 4 entries");
    std::copy(dims.begin(), dims.end(), vol.dims.begin());
    const auto spacing = meta.at("spacing_mm").get<std::vector<double>>();
    if (spacing.size() != 3)
      throw Error(ErrorKind::BadDims, "sidecar spacing_mm must have 3 entries");
    std::copy(spacing.begin(), spacing.end(), vol.spacing_mm.begin());
    vol.tr_seconds = meta.at("tr_s").get<double>();
  } catch (const json::exception &e) {
    throw Error(ErrorKind::IoError, std::string("malformed sidecar: ") + e.what());
  }
  for (Index n : vol.dims)
    if (n < 1)
      throw Error(ErrorKind::BadDims, "sidecar dims must be positive");

  const auto bytes = read_file(path);
  if (bytes.size() % 4 != 0 || static_cast<Index>(bytes.size() / 4) != vol.size())
    throw Error(ErrorKind::SizeMismatch, "payload holds " + std::to_string(bytes.size() / 4) +
                                             " float32 scalars, dims need " + std::to_string(vol.size()));
  vol.data.resize(vol.size());
  for (Index i = 0; i < vol.size(); ++i)
    vol.data[i] = std::bit_cast<float>(load_uint<std::uint32_t>(bytes.data() + 4 * i, false));
  vol.validate();
  return vol;
}

} // namespace

Volume4D load_volume(const fs::path &path, VolumeFormat format) {
  return format == VolumeFormat::nifti ? load_nifti(path) : load_raw(path);
}

void write_raw_volume(const Volume4D &vol, const fs::path &path) {
  vol.validate();
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(vol.size()) * 4);
  for (Index i = 0; i < vol.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(vol.data[i]));
    for (int b = 0; b < 4; ++b)
      bytes[static_cast<std::size_t>(4 * i + b)] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw Error(ErrorKind::IoError, "short write to " + path.string());

  const json meta = {{"dims", vol.dims}, {"spacing_mm", vol.spacing_mm}, {"tr_s", vol.tr_seconds}};
  std::ofstream side(raw_sidecar_path(path), std::ios::trunc);
  if (!side)
    throw Error(ErrorKind::IoError, "cannot write " + raw_sidecar_path(path).string());
  side << meta.dump() << '\n';
  if (!side)
    throw Error(ErrorKind::IoError, "short write to " + raw_sidecar_path(path).string());
}

Volume4D zscore_global(const Volume4D &vol) {
  if (vol.size() <= 1)
    throw Error(ErrorKind::DegenerateVolume, "Z-scoring needs more than one scalar");
  const double mean = vol.data.mean();
  const double var = (vol.data - mean).square().mean();
  if (!(var > 0.0))
    throw Error(ErrorKind::DegenerateVolume, "volume is constant");
  Volume4D out = vol;
  out.data = (vol.data - mean) / std::sqrt(var);
  return out;
}

Volume4D crop_or_pad(const Volume4D &vol, const Dims3 &target) {
  for (Index n : target)
    if (n < 1)
      throw Error(ErrorKind::BadDims, "target dims must be positive");
  // Source index = destination index + shift, per axis. Cropping removes
  // floor(excess/2) from the low side; padding adds floor(deficit/2) there.
  std::array<Index, 3> shift{};
  for (int a = 0; a < 3; ++a) {
    const Index n = vol.dims[a];
    shift[a] = n >= target[a] ? (n - target[a]) / 2 : -((target[a] - n) / 2);
  }
  Volume4D out({target[0], target[1], target[2], vol.frames()}, 0.0);
  out.spacing_mm = vol.spacing_mm;
  out.tr_seconds = vol.tr_seconds;
  for (Index t = 0; t < vol.frames(); ++t)
    for (Index z = 0; z < target[2]; ++z) {
      const Index sz = z + shift[2];
      if (sz < 0 || sz >= vol.nz())
        continue;
      for (Index y = 0; y < target[1]; ++y) {
        const Index sy = y + shift[1];
        if (sy < 0 || sy >= vol.ny())
          continue;
        for (Index x = 0; x < target[0]; ++x) {
          const Index sx = x + shift[0];
          if (sx >= 0 && sx < vol.nx())
            out(x, y, z, t) = vol(sx, sy, sz, t);
        }
      }
    }
  return out;
}

Volume4D pad_to_multiple(const Volume4D &vol, Index edge) {
  Dims3 target = vol.spatial();
  for (auto &n : target)
    n = (n + edge - 1) / edge * edge;
  return target == vol.spatial() ? vol : crop_or_pad(vol, target);
}

namespace {

struct AxisWeights {
  std::vector<Index> lo, hi;
  std::vector<double> frac;
};

AxisWeights align_corners_axis(Index n_src, Index n_dst) {
  AxisWeights w;
  w.lo.resize(static_cast<std::size_t>(n_dst));
  w.hi.resize(static_cast<std::size_t>(n_dst));
  w.frac.resize(static_cast<std::size_t>(n_dst));
  for (Index i = 0; i < n_dst; ++i) {
    const auto k = static_cast<std::size_t>(i);
    if (n_src == 1 || n_dst == 1) {
      w.lo[k] = w.hi[k] = 0;
      w.frac[k] = 0.0;
      continue;
    }
    const double pos = static_cast<double>(i) * static_cast<double>(n_src - 1) / static_cast<double>(n_dst - 1);
    Index i0 = std::min(static_cast<Index>(std::floor(pos)), n_src - 2);
    w.lo[k] = i0;
    w.hi[k] = i0 + 1;
    w.frac[k] = pos - static_cast<double>(i0);
  }
  return w;
}

} // namespace

Eigen::ArrayXd trilinear_align_corners(std::span<const double> src, const Dims3 &s, const Dims3 &d) {
  const auto wx = align_corners_axis(s[0], d[0]);
  const auto wy = align_corners_axis(s[1], d[1]);
  const auto wz = align_corners_axis(s[2], d[2]);
  auto at = [&](Index x, Index y, Index z) { return src[static_cast<std::size_t>(x + s[0] * (y + s[1] * z))]; };
  Eigen::ArrayXd out(d[0] * d[1] * d[2]);
  for (Index z = 0; z < d[2]; ++z) {
    const auto kz = static_cast<std::size_t>(z);
    const double fz = wz.frac[kz];
    for (Index y = 0; y < d[1]; ++y) {
      const auto ky = static_cast<std::size_t>(y);
      const double fy = wy.frac[ky];
      for (Index x = 0; x < d[0]; ++x) {
        const auto kx = static_cast<std::size_t>(x);
        const double fx = wx.frac[kx];
        const Index x0 = wx.lo[kx], x1 = wx.hi[kx], y0 = wy.lo[ky], y1 = wy.hi[ky], z0 = wz.lo[kz], z1 = wz.hi[kz];
        const double c00 = (1 - fx) * at(x0, y0, z0) + fx * at(x1, y0, z0);
        const double c10 = (1 - fx) * at(x0, y1, z0) + fx * at(x1, y1, z0);
        const double c01 = (1 - fx) * at(x0, y0, z1) + fx * at(x1, y0, z1);
        const double c11 = (1 - fx) * at(x0, y1, z1) + fx * at(x1, y1, z1);
        const double c0 = (1 - fy) * c00 + fy * c10;
        const double c1 = (1 - fy) * c01 + fy * c11;
        out[x + d[0] * (y + d[1] * z)] = (1 - fz) * c0 + fz * c1;
      }
    }
  }
  return out;
}

Volume4D resample_spatial_trilinear(const Volume4D &vol, const Dims3 &target) {
  for (Index n : target)
    if (n < 1)
      throw Error(ErrorKind::BadDims, "target dims must be positive");
  if (target == vol.spatial())
    return vol;
  Volume4D out({target[0], target[1], target[2], vol.frames()}, 0.0);
  out.tr_seconds = vol.tr_seconds;
  for (int a = 0; a < 3; ++a)
    out.spacing_mm[a] = vol.spacing_mm[a] * static_cast<double>(vol.dims[a]) / static_cast<double>(target[a]);
  for (Index t = 0; t < vol.frames(); ++t) {
    const auto frame = vol.frame(t);
    out.frame(t) = trilinear_align_corners(std::span<const double>(frame.data(), static_cast<std::size_t>(frame.size())),
                                           vol.spatial(), target);
  }
  return out;
}

Volume4D resample_time_linear(const Volume4D &vol, double target_tr) {
  if (vol.frames() < 2)
    throw Error(ErrorKind::TooFewFrames, "temporal resampling needs T >= 2");
  if (!(target_tr > 0.0))
    throw Error(ErrorKind::BadDims, "target TR must be positive");
  if (target_tr == vol.tr_seconds)
    return vol;
  const double span = static_cast<double>(vol.frames() - 1) * vol.tr_seconds;
  const Index frames = static_cast<Index>(std::floor(span / target_tr + 1e-9)) + 1;
  Volume4D out({vol.nx(), vol.ny(), vol.nz(), frames}, 0.0);
  out.spacing_mm = vol.spacing_mm;
  out.tr_seconds = target_tr;
  for (Index k = 0; k < frames; ++k) {
    const double pos = static_cast<double>(k) * target_tr / vol.tr_seconds;
    const Index i0 = std::clamp<Index>(static_cast<Index>(std::floor(pos)), 0, vol.frames() - 2);
    const double f = std::clamp(pos - static_cast<double>(i0), 0.0, 1.0);
    out.frame(k) = (1.0 - f) * vol.frame(i0) + f * vol.frame(i0 + 1);
  }
  return out;
}

Volume4D temporal_mean(const Volume4D &vol) {
  Volume4D out({vol.nx(), vol.ny(), vol.nz(), 1}, 0.0);
  out.spacing_mm = vol.spacing_mm;
  out.tr_seconds = vol.tr_seconds;
  for (Index t = 0; t < vol.frames(); ++t)
    out.data += vol.frame(t);
  out.data /= static_cast<double>(vol.frames());
  return out;
}

} // namespace dynpatch
