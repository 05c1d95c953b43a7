#pragma once

#include <vector>

#include "dynpatch/model/layers.hpp"
#include "dynpatch/model/params.hpp"
#include "dynpatch/tokenizer.hpp"

namespace dynpatch {

/// Fixed 3D sinusoid evaluated at the token centre (voxel units). Channels
/// are split into three equal axis groups (x, y, z) of 2*floor(dim/6)
/// interleaved sin/cos pairs with frequencies 10000^(-2k/group); any
/// remaining dim % 6 channels are zero.
Eigen::VectorXd positional_embedding(const TokenRec &tok, Index base_edge, Index dim);

/// A tokenized volume with the flattened voxels of every token cached.
struct TokenSet {
  TokenLayout layout;
  Index frames = 0;
  std::vector<Eigen::VectorXd> voxels; // per token, length T * V_s, (t, z, y, x)
};

TokenSet make_token_set(const Volume4D &signal, const TokenLayout &layout);

struct LossReport {
  double total = 0.0;
  std::vector<double> per_scale;
  std::vector<Index> masked_counts;
  std::vector<Index> voxel_volumes;
};

/// Activations recorded by forward_loss for the analytic backward pass.
template <typename S> struct ForwardTrace {
  struct ScaleEmbed {
    std::vector<Index> tokens;  // visible token ids at this scale (column order)
    Mat<S> down;                // T*b^3 x n: pooled patches
    Mat<S> grid;                // T*b^3 x n*8^s: sub-patches in Morton order
    std::vector<Mat<S>> levels; // aggregation inputs, level l: 8C x n*8^(s-1-l)
    Mat<S> agg;                 // C x n: grid aggregate
    layers::MlpCache<S> zero_mlp;
  };
  std::vector<ScaleEmbed> embeds; // index s
  std::vector<Index> visible;     // token ids in encoder column order
  std::vector<layers::BlockCache<S>> enc, dec;
  Mat<S> latents; // C x Nv encoder output
  Mat<S> decoded; // dec_dim x N decoder output
  std::vector<std::vector<Index>> masked_by_scale;
  std::vector<Mat<S>> residuals; // per scale: prediction - target, T*V_s x |M_s|
  std::vector<S> loss_weight;    // per scale 1 / (|M_s| V_s), 0 when empty
};

// ---- individual stages (all deterministic, no hidden state) ----

/// z = phi(P_down) + ZeroMLP(Agg(phi(P_grid))) + p_pos for s >= 1,
/// z = phi(P) + p_pos for s = 0.
template <typename S> Vec<S> embed_token(const ModelParams<S> &params, const TokenRec &tok, const Eigen::VectorXd &voxels);

/// Pre-norm transformer stack with global attention over the visible tokens.
template <typename S> Mat<S> encoder_forward(const ModelParams<S> &params, const Mat<S> &visible_embeddings);

/// Scatters projected latents (dec_dim x Nv, visible order) into the full
/// sequence; masked slots take the mask token; each slot then adds its
/// decoder positional embedding and scale embedding.
template <typename S>
Mat<S> decoder_inputs(const ModelParams<S> &params, const Mat<S> &latents, const TokenLayout &layout,
                      const MaskPlan &plan);

template <typename S> Mat<S> decoder_forward(const ModelParams<S> &params, const Mat<S> &inputs);

/// psi_s applied to every decoded token; token i at scale s yields T*V_s values.
template <typename S>
std::vector<Vec<S>> reconstruct(const ModelParams<S> &params, const Mat<S> &decoded, const TokenLayout &layout);

/// Scale-normalized masked reconstruction loss.
template <typename S>
LossReport scale_aware_loss(const std::vector<Vec<S>> &predictions, const std::vector<Eigen::VectorXd> &targets,
                            const TokenLayout &layout, const MaskPlan &plan, bool patch_norm);

/// Standardizes a target to zero mean and unit variance (variance floor 1e-6).
Eigen::VectorXd patch_normalize(const Eigen::VectorXd &target);

/// Full pass; fills `trace` when given so backward() can run.
template <typename S>
LossReport forward_loss(const ModelParams<S> &params, const TokenSet &tokens, const MaskPlan &plan,
                        ForwardTrace<S> *trace = nullptr);

/// Accumulates dL/dtheta into grads (same layout as params).
template <typename S>
void backward(const ModelParams<S> &params, const TokenSet &tokens, const ForwardTrace<S> &trace, ModelParams<S> &grads);

#define DYNPATCH_MAE_EXTERN(S)                                                                                         \
  extern template Vec<S> embed_token<S>(const ModelParams<S> &, const TokenRec &, const Eigen::VectorXd &);           \
  extern template Mat<S> encoder_forward<S>(const ModelParams<S> &, const Mat<S> &);                                   \
  extern template Mat<S> decoder_inputs<S>(const ModelParams<S> &, const Mat<S> &, const TokenLayout &,               \
                                           const MaskPlan &);                                                         \
  extern template Mat<S> decoder_forward<S>(const ModelParams<S> &, const Mat<S> &);                                   \
  extern template std::vector<Vec<S>> reconstruct<S>(const ModelParams<S> &, const Mat<S> &, const TokenLayout &);    \
  extern template LossReport scale_aware_loss<S>(const std::vector<Vec<S>> &, const std::vector<Eigen::VectorXd> &,   \
                                                 const TokenLayout &, const MaskPlan &, bool);                        \
  extern template LossReport forward_loss<S>(const ModelParams<S> &, const TokenSet &, const MaskPlan &,              \
                                             ForwardTrace<S> *);                                                      \
  extern template void backward<S>(const ModelParams<S> &, const TokenSet &, const ForwardTrace<S> &,                 \
                                   ModelParams<S> &);
DYNPATCH_MAE_EXTERN(float)
DYNPATCH_MAE_EXTERN(double)
#undef DYNPATCH_MAE_EXTERN

} // namespace dynpatch
