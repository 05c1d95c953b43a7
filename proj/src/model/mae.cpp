#include "dynpatch/model/mae.hpp"

#include <cmath>

#include "dynpatch/error.hpp"

namespace dynpatch {

Eigen::VectorXd positional_embedding(const TokenRec &tok, Index base_edge, Index dim) {
  if (dim < 6)
    throw Error(ErrorKind::BadDim, "positional embedding needs at least 6 channels");
  const Index group = 2 * (dim / 6);
  const double centre_offset = static_cast<double>((base_edge << tok.scale) - 1) / 2.0;
  Eigen::VectorXd p = Eigen::VectorXd::Zero(dim);
  for (int axis = 0; axis < 3; ++axis) {
    const double pos = static_cast<double>(tok.origin[static_cast<std::size_t>(axis)]) + centre_offset;
    for (Index k = 0; k < group / 2; ++k) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(group));
      p[axis * group + 2 * k] = std::sin(pos * freq);
      p[axis * group + 2 * k + 1] = std::cos(pos * freq);
    }
  }
  return p;
}

TokenSet make_token_set(const Volume4D &signal, const TokenLayout &layout) {
  TokenSet set;
  set.layout = layout;
  set.frames = signal.frames();
  set.voxels.reserve(layout.tokens.size());
  for (const auto &tok : layout.tokens)
    set.voxels.emplace_back(extract_token_voxels(signal, tok, layout.base_edge).matrix());
  return set;
}

Eigen::VectorXd patch_normalize(const Eigen::VectorXd &target) {
  const double mean = target.mean();
  const double var = (target.array() - mean).square().mean();
  return (target.array() - mean) / std::sqrt(std::max(var, 1e-6));
}

namespace {

// Patches are flattened (t, z, y, x) with x fastest.
Index patch_offset(Index e, Index x, Index y, Index z, Index t) { return x + e * (y + e * (z + e * t)); }

// Sub-patch at grid position (px, py, pz) for a Morton code whose lowest
// three bits select the finest child (c = dx + 2 dy + 4 dz).
std::array<Index, 3> morton_decode(Index code, int levels) {
  std::array<Index, 3> p{0, 0, 0};
  for (int l = 0; l < levels; ++l)
    for (int a = 0; a < 3; ++a)
      p[static_cast<std::size_t>(a)] |= ((code >> (3 * l + a)) & 1) << l;
  return p;
}

template <typename S> void write_pooled(const Eigen::VectorXd &v, Index T, Index e, Index b, S *out) {
  const Index f = e / b;
  const double inv = 1.0 / static_cast<double>(f * f * f);
  for (Index t = 0; t < T; ++t)
    for (Index z = 0; z < b; ++z)
      for (Index y = 0; y < b; ++y)
        for (Index x = 0; x < b; ++x) {
          double acc = 0.0;
          for (Index dz = 0; dz < f; ++dz)
            for (Index dy = 0; dy < f; ++dy)
              for (Index dx = 0; dx < f; ++dx)
                acc += v[patch_offset(e, x * f + dx, y * f + dy, z * f + dz, t)];
          out[patch_offset(b, x, y, z, t)] = static_cast<S>(acc * inv);
        }
}

template <typename S>
void write_subpatch(const Eigen::VectorXd &v, Index T, Index e, Index b, const std::array<Index, 3> &cell, S *out) {
  for (Index t = 0; t < T; ++t)
    for (Index z = 0; z < b; ++z)
      for (Index y = 0; y < b; ++y)
        for (Index x = 0; x < b; ++x)
          out[patch_offset(b, x, y, z, t)] =
              static_cast<S>(v[patch_offset(e, cell[0] * b + x, cell[1] * b + y, cell[2] * b + z, t)]);
}

template <typename S> Vec<S> position_as(const TokenRec &tok, Index base_edge, Index dim) {
  return positional_embedding(tok, base_edge, dim).cast<S>();
}

// Embeds n tokens of one scale; columns follow `ids`.
template <typename S>
Mat<S> embed_scale(const ModelParams<S> &params, int scale, const std::vector<const TokenRec *> &toks,
                   const std::vector<const Eigen::VectorXd *> &voxels, typename ForwardTrace<S>::ScaleEmbed *cache) {
  const auto &cfg = params.config;
  const auto &L = *params.layout;
  const Index T = cfg.frames, b = cfg.base_edge, e = cfg.edge(scale);
  const Index n = static_cast<Index>(toks.size());
  const Index len = cfg.token_length(0);

  for (const auto *v : voxels)
    if (v->size() != cfg.token_length(scale))
      throw Error(ErrorKind::LengthMismatch, "token voxel vector has the wrong length");

  Mat<S> down(len, n);
  for (Index j = 0; j < n; ++j) {
    if (scale == 0)
      down.col(j) = voxels[static_cast<std::size_t>(j)]->template cast<S>();
    else
      write_pooled<S>(*voxels[static_cast<std::size_t>(j)], T, e, b, down.col(j).data());
  }
  Mat<S> z = layers::linear<S>(params.mat(L.phi.weight), params.vec(L.phi.bias), down);

  if (scale > 0) {
    const Index subs = Index{1} << (3 * scale);
    Mat<S> grid(len, n * subs);
    for (Index j = 0; j < n; ++j)
      for (Index m = 0; m < subs; ++m)
        write_subpatch<S>(*voxels[static_cast<std::size_t>(j)], T, e, b, morton_decode(m, scale),
                          grid.col(j * subs + m).data());
    Mat<S> cur = layers::linear<S>(params.mat(L.phi.weight), params.vec(L.phi.bias), grid);
    const Index C = cfg.embed_dim;
    std::vector<Mat<S>> levels;
    for (int l = 0; l < scale; ++l) {
      Mat<S> in = Eigen::Map<const Mat<S>>(cur.data(), 8 * C, cur.cols() / 8);
      cur = layers::linear<S>(params.mat(L.grid_agg.weight), params.vec(L.grid_agg.bias), in);
      levels.push_back(std::move(in));
    }
    layers::MlpCache<S> mc;
    z += layers::mlp<S>(params, L.zero_fc1, L.zero_fc2, cur, cache ? &mc : nullptr);
    if (cache) {
      cache->grid = std::move(grid);
      cache->levels = std::move(levels);
      cache->agg = std::move(cur);
      cache->zero_mlp = std::move(mc);
    }
  }
  for (Index j = 0; j < n; ++j)
    z.col(j) += position_as<S>(*toks[static_cast<std::size_t>(j)], cfg.base_edge, cfg.embed_dim);
  if (cache)
    cache->down = std::move(down);
  return z;
}

template <typename S> void check_compatible(const ModelConfig &cfg, const TokenLayout &layout, Index frames) {
  if (layout.base_edge != cfg.base_edge || frames != cfg.frames)
    throw Error(ErrorKind::ShapeMismatch, "token set does not match the model's base edge or frame count");
  for (const auto &tok : layout.tokens)
    if (tok.scale < 0 || tok.scale >= cfg.num_scales)
      throw Error(ErrorKind::ShapeMismatch, "token scale exceeds the model's scale count");
}

} // namespace

template <typename S> Vec<S> embed_token(const ModelParams<S> &params, const TokenRec &tok, const Eigen::VectorXd &voxels) {
  if (tok.scale < 0 || tok.scale >= params.config.num_scales)
    throw Error(ErrorKind::ShapeMismatch, "token scale exceeds the model's scale count");
  return embed_scale<S>(params, tok.scale, {&tok}, {&voxels}, nullptr).col(0);
}

template <typename S> Mat<S> encoder_forward(const ModelParams<S> &params, const Mat<S> &x) {
  if (x.cols() == 0)
    throw Error(ErrorKind::EmptyInput, "encoder needs at least one visible token");
  Mat<S> h = x;
  for (const auto &b : params.layout->enc)
    h = layers::block<S>(params, b, params.config.enc_heads, h, nullptr);
  return h;
}

template <typename S>
Mat<S> decoder_inputs(const ModelParams<S> &params, const Mat<S> &latents, const TokenLayout &layout,
                      const MaskPlan &plan) {
  const auto &L = *params.layout;
  const Index D = params.config.dec_dim;
  if (plan.size() != layout.size())
    throw Error(ErrorKind::CountMismatch, "mask plan and layout disagree on token count");
  if (latents.rows() != D || latents.cols() != layout.size() - plan.masked_count())
    throw Error(ErrorKind::CountMismatch, "latent count differs from the visible token count");
  Mat<S> u(D, layout.size());
  const auto mask_token = params.vec(L.mask_token);
  const auto table = params.mat(L.scale_table);
  Index k = 0;
  for (Index i = 0; i < layout.size(); ++i) {
    const auto &tok = layout.tokens[static_cast<std::size_t>(i)];
    if (tok.scale < 0 || tok.scale >= params.config.num_scales)
      throw Error(ErrorKind::ShapeMismatch, "token scale exceeds the model's scale count");
    if (plan.masked[static_cast<std::size_t>(i)])
      u.col(i) = mask_token;
    else
      u.col(i) = latents.col(k++);
    u.col(i) += position_as<S>(tok, layout.base_edge, D);
    u.col(i) += table.row(tok.scale).transpose();
  }
  return u;
}

template <typename S> Mat<S> decoder_forward(const ModelParams<S> &params, const Mat<S> &inputs) {
  Mat<S> h = inputs;
  for (const auto &b : params.layout->dec)
    h = layers::block<S>(params, b, params.config.dec_heads, h, nullptr);
  return h;
}

template <typename S>
std::vector<Vec<S>> reconstruct(const ModelParams<S> &params, const Mat<S> &decoded, const TokenLayout &layout) {
  const auto &L = *params.layout;
  if (decoded.cols() != layout.size() || decoded.rows() != params.config.dec_dim)
    throw Error(ErrorKind::ShapeMismatch, "decoded sequence does not match the layout");
  std::vector<Vec<S>> out;
  out.reserve(layout.tokens.size());
  for (Index i = 0; i < layout.size(); ++i) {
    const int s = layout.tokens[static_cast<std::size_t>(i)].scale;
    const auto &h = L.heads[static_cast<std::size_t>(s)];
    out.emplace_back(layers::linear<S>(params.mat(h.weight), params.vec(h.bias), decoded.col(i)).col(0));
  }
  return out;
}

template <typename S>
LossReport scale_aware_loss(const std::vector<Vec<S>> &predictions, const std::vector<Eigen::VectorXd> &targets,
                            const TokenLayout &layout, const MaskPlan &plan, bool patch_norm) {
  const std::size_t n = layout.tokens.size();
  if (predictions.size() != n || targets.size() != n || static_cast<std::size_t>(plan.size()) != n)
    throw Error(ErrorKind::ShapeMismatch, "predictions, targets, layout and plan must align");
  const Index T = n == 0 ? 0 : targets[0].size() / layout.voxel_volume(layout.tokens[0].scale);
  LossReport r;
  const auto K = static_cast<std::size_t>(layout.num_scales);
  r.per_scale.assign(K, 0.0);
  r.masked_counts.assign(K, 0);
  r.voxel_volumes.resize(K);
  for (std::size_t s = 0; s < K; ++s)
    r.voxel_volumes[s] = layout.voxel_volume(static_cast<int>(s));
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(layout.tokens[i].scale);
    if (s >= K)
      throw Error(ErrorKind::ShapeMismatch, "token scale exceeds the layout's scale count");
    const Index len = T * r.voxel_volumes[s];
    if (predictions[i].size() != len || targets[i].size() != len)
      throw Error(ErrorKind::ShapeMismatch, "prediction or target has the wrong length");
    if (!plan.masked[i])
      continue;
    const Eigen::VectorXd y = patch_norm ? patch_normalize(targets[i]) : targets[i];
    r.per_scale[s] += (predictions[i].template cast<double>() - y).squaredNorm();
    ++r.masked_counts[s];
  }
  for (std::size_t s = 0; s < K; ++s) {
    if (r.masked_counts[s] > 0)
      r.per_scale[s] /= static_cast<double>(r.masked_counts[s] * r.voxel_volumes[s]);
    r.total += r.per_scale[s];
  }
  return r;
}

template <typename S>
LossReport forward_loss(const ModelParams<S> &params, const TokenSet &tokens, const MaskPlan &plan,
                        ForwardTrace<S> *trace) {
  const auto &cfg = params.config;
  const auto &L = *params.layout;
  const auto &layout = tokens.layout;
  check_compatible<S>(cfg, layout, tokens.frames);
  if (plan.size() != layout.size() || static_cast<Index>(tokens.voxels.size()) != layout.size())
    throw Error(ErrorKind::CountMismatch, "mask plan, voxels and layout disagree on token count");

  ForwardTrace<S> local;
  ForwardTrace<S> &tr = trace ? *trace : local;
  tr = ForwardTrace<S>{};
  const auto K = static_cast<std::size_t>(cfg.num_scales);

  // Embed visible tokens scale by scale, then place them in ascending id order.
  tr.visible = plan.visible_indices();
  const Index nv = static_cast<Index>(tr.visible.size());
  if (nv == 0)
    throw Error(ErrorKind::EmptyInput, "every token is masked");
  std::vector<Index> column(layout.tokens.size(), -1);
  for (Index k = 0; k < nv; ++k)
    column[static_cast<std::size_t>(tr.visible[static_cast<std::size_t>(k)])] = k;

  Mat<S> x(cfg.embed_dim, nv);
  tr.embeds.resize(K);
  for (std::size_t s = 0; s < K; ++s) {
    auto &emb = tr.embeds[s];
    std::vector<const TokenRec *> toks;
    std::vector<const Eigen::VectorXd *> vox;
    for (Index id : tr.visible) {
      const auto &tok = layout.tokens[static_cast<std::size_t>(id)];
      if (static_cast<std::size_t>(tok.scale) != s)
        continue;
      emb.tokens.push_back(id);
      toks.push_back(&tok);
      vox.push_back(&tokens.voxels[static_cast<std::size_t>(id)]);
    }
    if (toks.empty())
      continue;
    const Mat<S> z = embed_scale<S>(params, static_cast<int>(s), toks, vox, &emb);
    for (std::size_t j = 0; j < emb.tokens.size(); ++j)
      x.col(column[static_cast<std::size_t>(emb.tokens[j])]) = z.col(static_cast<Index>(j));
  }

  tr.enc.resize(L.enc.size());
  Mat<S> h = std::move(x);
  for (std::size_t i = 0; i < L.enc.size(); ++i)
    h = layers::block<S>(params, L.enc[i], cfg.enc_heads, h, &tr.enc[i]);
  tr.latents = std::move(h);

  const Mat<S> projected = layers::linear<S>(params.mat(L.enc_to_dec.weight), params.vec(L.enc_to_dec.bias), tr.latents);
  Mat<S> d = decoder_inputs<S>(params, projected, layout, plan);
  tr.dec.resize(L.dec.size());
  for (std::size_t i = 0; i < L.dec.size(); ++i)
    d = layers::block<S>(params, L.dec[i], cfg.dec_heads, d, &tr.dec[i]);
  tr.decoded = std::move(d);

  LossReport r;
  r.per_scale.assign(K, 0.0);
  r.masked_counts.assign(K, 0);
  r.voxel_volumes.resize(K);
  tr.masked_by_scale.assign(K, {});
  tr.residuals.assign(K, Mat<S>());
  tr.loss_weight.assign(K, S(0));
  for (Index i = 0; i < layout.size(); ++i)
    if (plan.masked[static_cast<std::size_t>(i)])
      tr.masked_by_scale[static_cast<std::size_t>(layout.tokens[static_cast<std::size_t>(i)].scale)].push_back(i);

  for (std::size_t s = 0; s < K; ++s) {
    const auto &ids = tr.masked_by_scale[s];
    const Index m = static_cast<Index>(ids.size());
    r.voxel_volumes[s] = cfg.voxel_volume(static_cast<int>(s));
    r.masked_counts[s] = m;
    if (m == 0)
      continue;
    Mat<S> hs(cfg.dec_dim, m);
    Mat<S> ys(cfg.token_length(static_cast<int>(s)), m);
    for (Index j = 0; j < m; ++j) {
      const Index id = ids[static_cast<std::size_t>(j)];
      hs.col(j) = tr.decoded.col(id);
      const auto &y = tokens.voxels[static_cast<std::size_t>(id)];
      ys.col(j) = (cfg.patch_norm_targets ? patch_normalize(y) : y).template cast<S>();
    }
    const auto &head = L.heads[s];
    tr.residuals[s] = layers::linear<S>(params.mat(head.weight), params.vec(head.bias), hs) - ys;
    tr.loss_weight[s] = S(1) / S(static_cast<double>(m * r.voxel_volumes[s]));
    r.per_scale[s] = tr.residuals[s].template cast<double>().squaredNorm() /
                     static_cast<double>(m * r.voxel_volumes[s]);
    r.total += r.per_scale[s];
  }
  return r;
}

template <typename S>
void backward(const ModelParams<S> &params, const TokenSet &tokens, const ForwardTrace<S> &tr, ModelParams<S> &grads) {
  const auto &cfg = params.config;
  const auto &L = *params.layout;
  const auto &layout = tokens.layout;
  const auto K = static_cast<std::size_t>(cfg.num_scales);

  // Heads.
  Mat<S> dd = Mat<S>::Zero(cfg.dec_dim, layout.size());
  for (std::size_t s = 0; s < K; ++s) {
    const auto &ids = tr.masked_by_scale[s];
    if (ids.empty())
      continue;
    Mat<S> hs(cfg.dec_dim, static_cast<Index>(ids.size()));
    for (std::size_t j = 0; j < ids.size(); ++j)
      hs.col(static_cast<Index>(j)) = tr.decoded.col(ids[j]);
    const Mat<S> dr = (S(2) * tr.loss_weight[s]) * tr.residuals[s];
    const auto &head = L.heads[s];
    const Mat<S> dh = layers::linear_backward<S>(params.mat(head.weight), hs, dr, grads.mat(head.weight), grads.vec(head.bias));
    for (std::size_t j = 0; j < ids.size(); ++j)
      dd.col(ids[j]) += dh.col(static_cast<Index>(j));
  }

  // Decoder.
  for (std::size_t i = L.dec.size(); i-- > 0;)
    dd = layers::block_backward<S>(params, L.dec[i], cfg.dec_heads, tr.dec[i], dd, grads);

  // Decoder inputs: mask token, scale table, projected latents.
  const Index nv = static_cast<Index>(tr.visible.size());
  Mat<S> dproj(cfg.dec_dim, nv);
  {
    auto dmask = grads.vec(L.mask_token);
    auto dtable = grads.mat(L.scale_table);
    Index k = 0;
    for (Index i = 0; i < layout.size(); ++i) {
      const int s = layout.tokens[static_cast<std::size_t>(i)].scale;
      dtable.row(s) += dd.col(i).transpose();
      if (k < nv && tr.visible[static_cast<std::size_t>(k)] == i)
        dproj.col(k++) = dd.col(i);
      else
        dmask += dd.col(i);
    }
  }
  Mat<S> dx = layers::linear_backward<S>(params.mat(L.enc_to_dec.weight), tr.latents, dproj,
                                         grads.mat(L.enc_to_dec.weight), grads.vec(L.enc_to_dec.bias));

  // Encoder.
  for (std::size_t i = L.enc.size(); i-- > 0;)
    dx = layers::block_backward<S>(params, L.enc[i], cfg.enc_heads, tr.enc[i], dx, grads);

  // Embeddings.
  std::vector<Index> column(layout.tokens.size(), -1);
  for (Index k = 0; k < nv; ++k)
    column[static_cast<std::size_t>(tr.visible[static_cast<std::size_t>(k)])] = k;
  const Index C = cfg.embed_dim;
  for (std::size_t s = 0; s < K; ++s) {
    const auto &emb = tr.embeds[s];
    if (emb.tokens.empty())
      continue;
    Mat<S> dz(C, static_cast<Index>(emb.tokens.size()));
    for (std::size_t j = 0; j < emb.tokens.size(); ++j)
      dz.col(static_cast<Index>(j)) = dx.col(column[static_cast<std::size_t>(emb.tokens[j])]);
    layers::linear_backward<S>(params.mat(L.phi.weight), emb.down, dz, grads.mat(L.phi.weight), grads.vec(L.phi.bias));
    if (s == 0)
      continue;
    Mat<S> dcur = layers::mlp_backward<S>(params, L.zero_fc1, L.zero_fc2, emb.zero_mlp, dz, grads);
    for (std::size_t l = emb.levels.size(); l-- > 0;) {
      const Mat<S> din = layers::linear_backward<S>(params.mat(L.grid_agg.weight), emb.levels[l], dcur,
                                                    grads.mat(L.grid_agg.weight), grads.vec(L.grid_agg.bias));
      dcur = Eigen::Map<const Mat<S>>(din.data(), C, din.cols() * 8);
    }
    layers::linear_backward<S>(params.mat(L.phi.weight), emb.grid, dcur, grads.mat(L.phi.weight), grads.vec(L.phi.bias));
  }
}

#define DYNPATCH_MAE_INSTANTIATE(S)                                                                                    \
  template Vec<S> embed_token<S>(const ModelParams<S> &, const TokenRec &, const Eigen::VectorXd &);                  \
  template Mat<S> encoder_forward<S>(const ModelParams<S> &, const Mat<S> &);                                          \
  template Mat<S> decoder_inputs<S>(const ModelParams<S> &, const Mat<S> &, const TokenLayout &, const MaskPlan &);    \
  template Mat<S> decoder_forward<S>(const ModelParams<S> &, const Mat<S> &);                                          \
  template std::vector<Vec<S>> reconstruct<S>(const ModelParams<S> &, const Mat<S> &, const TokenLayout &);           \
  template LossReport scale_aware_loss<S>(const std::vector<Vec<S>> &, const std::vector<Eigen::VectorXd> &,          \
                                          const TokenLayout &, const MaskPlan &, bool);                               \
  template LossReport forward_loss<S>(const ModelParams<S> &, const TokenSet &, const MaskPlan &, ForwardTrace<S> *); \
  template void backward<S>(const ModelParams<S> &, const TokenSet &, const ForwardTrace<S> &, ModelParams<S> &);
DYNPATCH_MAE_INSTANTIATE(float)
DYNPATCH_MAE_INSTANTIATE(double)
#undef DYNPATCH_MAE_INSTANTIATE

} // namespace dynpatch
