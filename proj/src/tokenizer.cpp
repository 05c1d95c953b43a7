#include "dynpatch/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <string>
#include <tuple>

#include <json.hpp>

#include "dynpatch/error.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

using json = nlohmann::json;

Index CellMask::count() const { return static_cast<Index>(std::count(flags.begin(), flags.end(), std::uint8_t{1})); }

Index TokenLayout::count(int scale) const {
  return static_cast<Index>(std::count_if(tokens.begin(), tokens.end(), [scale](const TokenRec &t) { return t.scale == scale; }));
}

Index MaskPlan::masked_count() const { return static_cast<Index>(std::count(masked.begin(), masked.end(), std::uint8_t{1})); }

std::vector<Index> MaskPlan::masked_indices() const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i)
    if (masked[static_cast<std::size_t>(i)])
      out.push_back(i);
  return out;
}

std::vector<Index> MaskPlan::visible_indices() const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i)
    if (!masked[static_cast<std::size_t>(i)])
      out.push_back(i);
  return out;
}

CellMask prune_background(const Volume4D &vol, Index edge, double bg_thresh) {
  const Dims3 dims = vol.spatial();
  for (Index n : dims)
    if (edge < 1 || n % edge != 0)
      throw Error(ErrorKind::NotDivisible, "spatial dims must be divisible by the cell edge " + std::to_string(edge));
  CellMask mask;
  mask.grid = {dims[0] / edge, dims[1] / edge, dims[2] / edge};
  mask.edge = edge;
  mask.flags.assign(static_cast<std::size_t>(mask.cells()), 0);

  const Eigen::ArrayXd mean = temporal_mean(vol).data;
  const double peak = mean.maxCoeff();
  if (!(peak > 0.0))
    return mask;
  const Eigen::ArrayXd normalized = mean / peak;
  const Eigen::ArrayXd pooled =
      average_pool(std::span<const double>(normalized.data(), static_cast<std::size_t>(normalized.size())), dims, edge);
  for (Index c = 0; c < mask.cells(); ++c)
    mask.flags[static_cast<std::size_t>(c)] = pooled[c] >= bg_thresh ? 1 : 0;
  return mask;
}

GatePyramid build_gate_pyramid(const Volume4D &signal, const Volume4D &intensity, const PyramidOptions &opts) {
  if (opts.num_scales < 1 || opts.base_edge < 1)
    throw Error(ErrorKind::BadSpec, "need at least one scale and a positive base edge");
  if (signal.spatial() != intensity.spatial())
    throw Error(ErrorKind::GridMismatch, "signal and intensity volumes differ in spatial dims");
  const Index coarse = opts.base_edge << (opts.num_scales - 1);
  for (Index n : signal.spatial())
    if (n % coarse != 0)
      throw Error(ErrorKind::NotDivisible, "spatial dims must be divisible by the coarse edge " + std::to_string(coarse));

  GatePyramid pyr;
  pyr.base_edge = opts.base_edge;
  pyr.num_scales = opts.num_scales;
  pyr.bg_thresh = opts.bg_thresh;
  pyr.volume_dims = signal.dims;
  pyr.scores.resize(static_cast<std::size_t>(opts.num_scales));
  pyr.foreground.resize(static_cast<std::size_t>(opts.num_scales));
  for (int s = 0; s < opts.num_scales; ++s) {
    const Index edge = opts.base_edge << s;
    auto &fg = pyr.foreground[static_cast<std::size_t>(s)];
    if (opts.retest_children || s == opts.num_scales - 1) {
      fg = prune_background(intensity, edge, opts.bg_thresh);
    } else {
      fg.grid = {signal.nx() / edge, signal.ny() / edge, signal.nz() / edge};
      fg.edge = edge;
      fg.flags.assign(static_cast<std::size_t>(fg.cells()), 1);
    }
    if (s >= 1)
      pyr.scores[static_cast<std::size_t>(s)] = complexity_map(signal, opts.metric, edge);
  }
  return pyr;
}

namespace {

void check_pyramid(const GatePyramid &pyr) {
  const int K = pyr.num_scales;
  if (K < 1 || pyr.base_edge < 1)
    throw Error(ErrorKind::GridMismatch, "pyramid needs K >= 1 and a positive base edge");
  if (static_cast<int>(pyr.foreground.size()) != K || static_cast<int>(pyr.scores.size()) != K)
    throw Error(ErrorKind::GridMismatch, "pyramid must hold one level per scale");
  for (int s = 0; s < K; ++s) {
    const Index edge = pyr.base_edge << s;
    const Dims3 expect{pyr.volume_dims[0] / edge, pyr.volume_dims[1] / edge, pyr.volume_dims[2] / edge};
    for (int a = 0; a < 3; ++a)
      if (pyr.volume_dims[a] % edge != 0)
        throw Error(ErrorKind::GridMismatch, "volume dims not divisible by level edge");
    const auto &fg = pyr.foreground[static_cast<std::size_t>(s)];
    if (fg.grid != expect || static_cast<Index>(fg.flags.size()) != fg.cells())
      throw Error(ErrorKind::GridMismatch, "foreground grid mismatch at scale " + std::to_string(s));
    if (s >= 1) {
      const auto &sc = pyr.scores[static_cast<std::size_t>(s)];
      if (sc.grid != expect || sc.coarse_edge != edge || sc.scores.size() != sc.cells())
        throw Error(ErrorKind::GridMismatch, "complexity grid mismatch at scale " + std::to_string(s));
    }
  }
}

struct Partitioner {
  const GatePyramid &pyr;
  double tau;
  std::vector<TokenRec> &out;

  void visit(int s, Index gx, Index gy, Index gz) {
    const Index edge = pyr.base_edge << s;
    if (s == 0 || pyr.scores[static_cast<std::size_t>(s)](gx, gy, gz) < tau) {
      out.push_back(TokenRec{{gx * edge, gy * edge, gz * edge}, s, 0});
      return;
    }
    const auto &child_fg = pyr.foreground[static_cast<std::size_t>(s - 1)];
    for (Index dz = 0; dz < 2; ++dz)
      for (Index dy = 0; dy < 2; ++dy)
        for (Index dx = 0; dx < 2; ++dx) {
          const Index cx = 2 * gx + dx, cy = 2 * gy + dy, cz = 2 * gz + dz;
          if (child_fg(cx, cy, cz))
            visit(s - 1, cx, cy, cz);
        }
  }
};

} // namespace

TokenLayout partition(const GatePyramid &pyr, double tau) {
  check_pyramid(pyr);
  TokenLayout layout;
  layout.base_edge = pyr.base_edge;
  layout.num_scales = pyr.num_scales;
  layout.volume_dims = pyr.volume_dims;
  layout.tau = tau;
  layout.bg_thresh = pyr.bg_thresh;

  const int top = pyr.num_scales - 1;
  const auto &fg = pyr.foreground[static_cast<std::size_t>(top)];
  Partitioner walker{pyr, tau, layout.tokens};
  for (Index gz = 0; gz < fg.grid[2]; ++gz)
    for (Index gy = 0; gy < fg.grid[1]; ++gy)
      for (Index gx = 0; gx < fg.grid[0]; ++gx)
        if (fg(gx, gy, gz))
          walker.visit(top, gx, gy, gz);

  std::sort(layout.tokens.begin(), layout.tokens.end(), [](const TokenRec &a, const TokenRec &b) {
    if (a.scale != b.scale)
      return a.scale > b.scale;
    return std::tie(a.origin[2], a.origin[1], a.origin[0]) < std::tie(b.origin[2], b.origin[1], b.origin[0]);
  });
  for (std::size_t i = 0; i < layout.tokens.size(); ++i)
    layout.tokens[i].linear_index = static_cast<Index>(i);
  return layout;
}

TokenCountReport token_count_report(const TokenLayout &layout) {
  TokenCountReport r;
  r.per_scale.assign(static_cast<std::size_t>(std::max(layout.num_scales, 1)), 0);
  std::set<std::array<Index, 3>> coarse_cells;
  const Index coarse = layout.edge(layout.num_scales - 1);
  for (const auto &t : layout.tokens) {
    ++r.per_scale[static_cast<std::size_t>(t.scale)];
    coarse_cells.insert({t.origin[0] / coarse, t.origin[1] / coarse, t.origin[2] / coarse});
  }
  r.total = static_cast<Index>(layout.tokens.size());
  const Index fine_per_coarse = (coarse / layout.base_edge) * (coarse / layout.base_edge) * (coarse / layout.base_edge);
  r.uniform_fine_total = static_cast<Index>(coarse_cells.size()) * fine_per_coarse;
  const auto &d = layout.volume_dims;
  r.full_fine_total = (d[0] / layout.base_edge) * (d[1] / layout.base_edge) * (d[2] / layout.base_edge);
  r.reduction_ratio = r.full_fine_total > 0 ? static_cast<double>(r.total) / static_cast<double>(r.full_fine_total) : 0.0;
  return r;
}

Eigen::ArrayXd extract_token_voxels(const Volume4D &vol, const TokenRec &tok, Index base_edge) {
  const Index edge = base_edge << tok.scale;
  for (int a = 0; a < 3; ++a)
    if (tok.origin[a] < 0 || tok.origin[a] + edge > vol.dims[a])
      throw Error(ErrorKind::OutOfBounds, "token extent leaves the volume");
  const Index per_frame = edge * edge * edge;
  Eigen::ArrayXd out(per_frame * vol.frames());
  Index k = 0;
  for (Index t = 0; t < vol.frames(); ++t)
    for (Index z = tok.origin[2]; z < tok.origin[2] + edge; ++z)
      for (Index y = tok.origin[1]; y < tok.origin[1] + edge; ++y) {
        out.segment(k, edge) = vol.data.segment(vol.index(tok.origin[0], y, z, t), edge);
        k += edge;
      }
  return out;
}

MaskPlan sample_mask(Index num_tokens, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw Error(ErrorKind::BadSpec, "mask ratio must lie in [0, 1]");
  MaskPlan plan;
  plan.ratio = ratio;
  plan.seed = seed;
  plan.masked.assign(static_cast<std::size_t>(num_tokens), 0);
  // The small slack keeps floor() exact for ratios like 0.29 that are not
  // representable in binary.
  const Index count =
      std::min(num_tokens, static_cast<Index>(std::floor(ratio * static_cast<double>(num_tokens) + 1e-9)));

  std::vector<Index> order(static_cast<std::size_t>(num_tokens));
  std::iota(order.begin(), order.end(), Index{0});
  CounterRng rng(derive_seed(seed, {0x6d61736bULL}));
  for (Index i = num_tokens - 1; i > 0; --i) {
    const auto j = static_cast<Index>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
  }
  for (Index i = 0; i < count; ++i)
    plan.masked[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  return plan;
}

MaskPlan sample_mask(const TokenLayout &layout, double ratio, std::uint64_t seed) {
  return sample_mask(layout.size(), ratio, seed);
}

TokenizedVolume tokenize_volume(const Volume4D &raw, const TokenizeOptions &opts) {
  const Index coarse = opts.pyramid.base_edge << (opts.pyramid.num_scales - 1);
  const Volume4D padded = pad_to_multiple(raw, coarse);
  TokenizedVolume out;
  out.signal = opts.zscore ? zscore_global(padded) : padded;
  const auto pyr = build_gate_pyramid(out.signal, padded, opts.pyramid);
  out.layout = partition(pyr, opts.tau);
  out.coarse_foreground = pyr.foreground.back();
  return out;
}

void write_layout_json(const TokenLayout &layout, const std::filesystem::path &path) {
  json tokens = json::array();
  for (const auto &t : layout.tokens)
    tokens.push_back({{"o", t.origin}, {"s", t.scale}});
  json doc = {{"dims", layout.volume_dims}, {"base_edge", layout.base_edge}, {"K", layout.num_scales},
              {"tau", layout.tau},          {"bg_thresh", layout.bg_thresh}, {"tokens", std::move(tokens)}};
  if (!std::isfinite(layout.tau))
    doc["tau"] = layout.tau > 0 ? "inf" : "-inf";
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << doc.dump() << '\n';
}

TokenLayout read_layout_json(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorKind::IoError, "cannot open " + path.string());
  try {
    json doc;
    in >> doc;
    TokenLayout layout;
    const auto dims = doc.at("dims").get<std::vector<Index>>();
    if (dims.size() != 4)
      throw Error(ErrorKind::BadDims, "dims must have 4 entries");
    std::copy(dims.begin(), dims.end(), layout.volume_dims.begin());
    layout.base_edge = doc.at("base_edge").get<Index>();
    layout.num_scales = doc.at("K").get<int>();
    const auto &tau = doc.at("tau");
    if (tau.is_string())
      layout.tau = tau.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity()
                                                   : -std::numeric_limits<double>::infinity();
    else
      layout.tau = tau.get<double>();
    layout.bg_thresh = doc.at("bg_thresh").get<double>();
    for (const auto &t : doc.at("tokens")) {
      TokenRec rec;
      const auto o = t.at("o").get<std::vector<Index>>();
      if (o.size() != 3)
        throw Error(ErrorKind::BadDims, "token origin must have 3 entries");
      std::copy(o.begin(), o.end(), rec.origin.begin());
      rec.scale = t.at("s").get<int>();
      rec.linear_index = static_cast<Index>(layout.tokens.size());
      layout.tokens.push_back(rec);
    }
    return layout;
  } catch (const json::exception &e) {
    throw Error(ErrorKind::IoError, std::string("malformed token layout: ") + e.what());
  }
}

void write_mask_json(const MaskPlan &plan, const std::filesystem::path &path) {
  const json doc = {{"seed", plan.seed}, {"ratio", plan.ratio}, {"masked", plan.masked_indices()}};
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << doc.dump() << '\n';
}

} // namespace dynpatch
