#include "dynpatch/complexity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dynpatch/error.hpp"
#include "dynpatch/parallel.hpp"

namespace dynpatch {

using json = nlohmann::json;

std::string_view to_string(ComplexityMetric m) noexcept {
  switch (m) {
  case ComplexityMetric::variance: return "variance";
  case ComplexityMetric::entropy: return "entropy";
  case ComplexityMetric::laplacian: return "laplacian";
  case ComplexityMetric::recon_mse: return "recon_mse";
  }
  return "unknown";
}

std::optional<ComplexityMetric> parse_metric(std::string_view name) noexcept {
  if (name == "variance")
    return ComplexityMetric::variance;
  if (name == "entropy")
    return ComplexityMetric::entropy;
  if (name == "laplacian")
    return ComplexityMetric::laplacian;
  if (name == "mse" || name == "recon_mse")
    return ComplexityMetric::recon_mse;
  return std::nullopt;
}

namespace {

void require_divisible(const Dims3 &dims, Index edge, const char *what) {
  if (edge < 1)
    throw Error(ErrorKind::NotDivisible, std::string(what) + " must be positive");
  for (Index n : dims)
    if (n % edge != 0)
      throw Error(ErrorKind::NotDivisible, "spatial dim " + std::to_string(n) + " is not divisible by " + what + " " +
                                               std::to_string(edge));
}

ComplexityMap empty_map(const Dims3 &dims, Index edge, ComplexityMetric metric) {
  ComplexityMap map;
  map.grid = {dims[0] / edge, dims[1] / edge, dims[2] / edge};
  map.coarse_edge = edge;
  map.metric = metric;
  map.scores = Eigen::ArrayXd::Zero(map.cells());
  return map;
}

std::span<const double> as_span(const Eigen::ArrayXd &a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

} // namespace

Eigen::ArrayXd average_pool(std::span<const double> frame, const Dims3 &dims, Index factor) {
  require_divisible(dims, factor, "pool factor");
  const Dims3 g{dims[0] / factor, dims[1] / factor, dims[2] / factor};
  const double inv = 1.0 / static_cast<double>(factor * factor * factor);
  Eigen::ArrayXd out(g[0] * g[1] * g[2]);
  for (Index gz = 0; gz < g[2]; ++gz)
    for (Index gy = 0; gy < g[1]; ++gy)
      for (Index gx = 0; gx < g[0]; ++gx) {
        double sum = 0.0;
        for (Index z = gz * factor; z < (gz + 1) * factor; ++z)
          for (Index y = gy * factor; y < (gy + 1) * factor; ++y) {
            const std::size_t row = static_cast<std::size_t>(dims[0] * (y + dims[1] * z));
            for (Index x = gx * factor; x < (gx + 1) * factor; ++x)
              sum += frame[row + static_cast<std::size_t>(x)];
          }
        out[gx + g[0] * (gy + g[1] * gz)] = sum * inv;
      }
  return out;
}

Eigen::ArrayXd upsample_trilinear(std::span<const double> coarse, const Dims3 &c, Index factor) {
  const Dims3 d{c[0] * factor, c[1] * factor, c[2] * factor};
  struct Tap {
    Index lo, hi;
    double frac;
  };
  auto axis = [factor](Index m, Index n) {
    std::vector<Tap> taps(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      const double pos = std::clamp((static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5, 0.0,
                                    static_cast<double>(m - 1));
      const Index lo = static_cast<Index>(std::floor(pos));
      const Index hi = std::min(lo + 1, m - 1);
      taps[static_cast<std::size_t>(i)] = {lo, hi, pos - static_cast<double>(lo)};
    }
    return taps;
  };
  const auto tx = axis(c[0], d[0]), ty = axis(c[1], d[1]), tz = axis(c[2], d[2]);
  auto at = [&](Index x, Index y, Index z) { return coarse[static_cast<std::size_t>(x + c[0] * (y + c[1] * z))]; };
  Eigen::ArrayXd out(d[0] * d[1] * d[2]);
  for (Index z = 0; z < d[2]; ++z) {
    const Tap &a = tz[static_cast<std::size_t>(z)];
    for (Index y = 0; y < d[1]; ++y) {
      const Tap &b = ty[static_cast<std::size_t>(y)];
      for (Index x = 0; x < d[0]; ++x) {
        const Tap &e = tx[static_cast<std::size_t>(x)];
        const double c00 = (1 - e.frac) * at(e.lo, b.lo, a.lo) + e.frac * at(e.hi, b.lo, a.lo);
        const double c10 = (1 - e.frac) * at(e.lo, b.hi, a.lo) + e.frac * at(e.hi, b.hi, a.lo);
        const double c01 = (1 - e.frac) * at(e.lo, b.lo, a.hi) + e.frac * at(e.hi, b.lo, a.hi);
        const double c11 = (1 - e.frac) * at(e.lo, b.hi, a.hi) + e.frac * at(e.hi, b.hi, a.hi);
        out[x + d[0] * (y + d[1] * z)] = (1 - a.frac) * ((1 - b.frac) * c00 + b.frac * c10) +
                                         a.frac * ((1 - b.frac) * c01 + b.frac * c11);
      }
    }
  }
  return out;
}

Eigen::ArrayXd laplacian26(std::span<const double> frame, const Dims3 &dims) {
  // Border voxels reuse the nearest in-volume neighbour (edge replication).
  const auto clamp = [](Index v, Index n) { return std::clamp<Index>(v, 0, n - 1); };
  Eigen::ArrayXd out(dims[0] * dims[1] * dims[2]);
  for (Index z = 0; z < dims[2]; ++z)
    for (Index y = 0; y < dims[1]; ++y)
      for (Index x = 0; x < dims[0]; ++x) {
        double acc = 0.0;
        for (Index dz = -1; dz <= 1; ++dz) {
          const Index zz = clamp(z + dz, dims[2]);
          for (Index dy = -1; dy <= 1; ++dy) {
            const Index yy = clamp(y + dy, dims[1]);
            for (Index dx = -1; dx <= 1; ++dx) {
              const Index xx = clamp(x + dx, dims[0]);
              const double w = (dx == 0 && dy == 0 && dz == 0) ? -26.0 : 1.0;
              acc += w * frame[static_cast<std::size_t>(xx + dims[0] * (yy + dims[1] * zz))];
            }
          }
        }
        out[x + dims[0] * (y + dims[1] * z)] = acc;
      }
  return out;
}

ComplexityMap variance_map(const Volume4D &vol, Index coarse_edge) {
  const Dims3 dims = vol.spatial();
  require_divisible(dims, coarse_edge, "coarse edge");
  auto map = empty_map(dims, coarse_edge, ComplexityMetric::variance);

  // E_P[I_t] and E_P[I_t^2] per frame; frames are independent work items and
  // are summed afterwards in ascending t.
  const Index T = vol.frames();
  std::vector<Eigen::ArrayXd> per_frame(static_cast<std::size_t>(T));
  parallel_for(T, [&](std::ptrdiff_t t) {
    const Eigen::ArrayXd frame = vol.frame(t);
    const Eigen::ArrayXd sq = frame.square();
    const Eigen::ArrayXd mean = average_pool(as_span(frame), dims, coarse_edge);
    const Eigen::ArrayXd mean_sq = average_pool(as_span(sq), dims, coarse_edge);
    per_frame[static_cast<std::size_t>(t)] = mean_sq - mean.square();
  });
  for (const auto &v : per_frame)
    map.scores += v;
  map.scores = (map.scores / static_cast<double>(T)).max(0.0);
  return map;
}

ComplexityMap entropy_map(const Volume4D &vol, Index coarse_edge, int bins) {
  const Dims3 dims = vol.spatial();
  require_divisible(dims, coarse_edge, "coarse edge");
  if (bins < 2)
    throw Error(ErrorKind::BadSpec, "entropy needs at least 2 bins");
  auto map = empty_map(dims, coarse_edge, ComplexityMetric::entropy);
  const Eigen::ArrayXd mean = temporal_mean(vol).data;
  const double lo = mean.minCoeff(), hi = mean.maxCoeff();
  if (!(hi > lo))
    return map;

  const double scale = static_cast<double>(bins) / (hi - lo);
  const Index n = coarse_edge * coarse_edge * coarse_edge;
  parallel_for(map.cells(), [&](std::ptrdiff_t c) {
    const Index gx = c % map.grid[0], gy = (c / map.grid[0]) % map.grid[1], gz = c / (map.grid[0] * map.grid[1]);
    std::vector<Index> counts(static_cast<std::size_t>(bins), 0);
    for (Index z = gz * coarse_edge; z < (gz + 1) * coarse_edge; ++z)
      for (Index y = gy * coarse_edge; y < (gy + 1) * coarse_edge; ++y)
        for (Index x = gx * coarse_edge; x < (gx + 1) * coarse_edge; ++x) {
          const double v = mean[x + dims[0] * (y + dims[1] * z)];
          const auto k = std::clamp<Index>(static_cast<Index>(std::floor((v - lo) * scale)), 0, bins - 1);
          ++counts[static_cast<std::size_t>(k)];
        }
    double h = 0.0;
    for (Index count : counts) {
      if (count == 0)
        continue;
      const double p = static_cast<double>(count) / static_cast<double>(n);
      h -= p * std::log2(p + kEntropyEpsilon);
    }
    map.scores[c] = std::max(0.0, h);
  });
  return map;
}

ComplexityMap laplacian_map(const Volume4D &vol, Index coarse_edge) {
  const Dims3 dims = vol.spatial();
  require_divisible(dims, coarse_edge, "coarse edge");
  auto map = empty_map(dims, coarse_edge, ComplexityMetric::laplacian);
  const Eigen::ArrayXd mean = temporal_mean(vol).data;
  const Eigen::ArrayXd response = laplacian26(as_span(mean), dims).abs();
  map.scores = average_pool(as_span(response), dims, coarse_edge);
  return map;
}

ComplexityMap recon_error_map(const Volume4D &vol, Index coarse_edge, Index scale_factor) {
  const Dims3 dims = vol.spatial();
  require_divisible(dims, coarse_edge, "coarse edge");
  require_divisible(dims, scale_factor, "scale factor");
  auto map = empty_map(dims, coarse_edge, ComplexityMetric::recon_mse);
  const Eigen::ArrayXd mean = temporal_mean(vol).data;
  const Eigen::ArrayXd down = average_pool(as_span(mean), dims, scale_factor);
  const Dims3 coarse{dims[0] / scale_factor, dims[1] / scale_factor, dims[2] / scale_factor};
  const Eigen::ArrayXd up = upsample_trilinear(as_span(down), coarse, scale_factor);
  const Eigen::ArrayXd err = (mean - up).square();
  map.scores = average_pool(as_span(err), dims, coarse_edge);
  return map;
}

ComplexityMap complexity_map(const Volume4D &vol, ComplexityMetric metric, Index coarse_edge) {
  switch (metric) {
  case ComplexityMetric::variance: return variance_map(vol, coarse_edge);
  case ComplexityMetric::entropy: return entropy_map(vol, coarse_edge);
  case ComplexityMetric::laplacian: return laplacian_map(vol, coarse_edge);
  case ComplexityMetric::recon_mse: return recon_error_map(vol, coarse_edge);
  }
  throw Error(ErrorKind::BadSpec, "unknown metric");
}

void write_complexity_json(const ComplexityMap &map, const std::filesystem::path &path) {
  const json doc = {{"grid", map.grid},
                    {"coarse_edge", map.coarse_edge},
                    {"metric", std::string(to_string(map.metric))},
                    {"scores", std::vector<double>(map.scores.begin(), map.scores.end())}};
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << doc.dump() << '\n';
}

ComplexityMap read_complexity_json(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorKind::IoError, "cannot open " + path.string());
  try {
    json doc;
    in >> doc;
    ComplexityMap map;
    const auto grid = doc.at("grid").get<std::vector<Index>>();
    if (grid.size() != 3)
      throw Error(ErrorKind::BadDims, "grid must have 3 entries");
    std::copy(grid.begin(), grid.end(), map.grid.begin());
    map.coarse_edge = doc.at("coarse_edge").get<Index>();
    const auto metric = parse_metric(doc.at("metric").get<std::string>());
    if (!metric)
      throw Error(ErrorKind::BadSpec, "unknown metric in " + path.string());
    map.metric = *metric;
    const auto scores = doc.at("scores").get<std::vector<double>>();
    if (static_cast<Index>(scores.size()) != map.cells())
      throw Error(ErrorKind::SizeMismatch, "score count does not match grid");
    map.scores = Eigen::Map<const Eigen::ArrayXd>(scores.data(), static_cast<Index>(scores.size()));
    return map;
  } catch (const json::exception &e) {
    throw Error(ErrorKind::IoError, std::string("malformed complexity map: ") + e.what());
  }
}

} // namespace dynpatch
