#pragma once
// Dense building blocks with explicit reverse-mode passes. Activations are
// stored one token per column.

#include <cmath>
#include <numbers>

#include "dynpatch/model/params.hpp"

namespace dynpatch::layers {

template <typename S> inline constexpr S kLayerNormEps = S(1e-5);

// ---- affine ----------------------------------------------------------------

template <typename S, typename W, typename B, typename X>
Mat<S> linear(const W &weight, const B &bias, const X &x) {
  Mat<S> y = weight * x;
  y.colwise() += bias;
  return y;
}

/// Accumulates weight / bias gradients and returns dL/dx.
template <typename S, typename W, typename X, typename DW, typename DB>
Mat<S> linear_backward(const W &weight, const X &x, const Mat<S> &dy, DW &&dweight, DB &&dbias) {
  dweight.noalias() += dy * x.transpose();
  dbias += dy.rowwise().sum();
  return weight.transpose() * dy;
}

// ---- GELU (erf form) -------------------------------------------------------

template <typename S> S gelu(S x) {
  return S(0.5) * x * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
}

template <typename S> S gelu_grad(S x) {
  const S cdf = S(0.5) * (S(1) + std::erf(x / std::numbers::sqrt2_v<S>));
  const S pdf = std::exp(S(-0.5) * x * x) / std::sqrt(S(2) * std::numbers::pi_v<S>);
  return cdf + x * pdf;
}

// ---- LayerNorm -------------------------------------------------------------

template <typename S> struct NormCache {
  Mat<S> xhat;
  Vec<S> rstd;
};

template <typename S, typename G, typename B>
Mat<S> layer_norm(const Mat<S> &x, const G &gamma, const B &beta, NormCache<S> *cache) {
  const Index n = x.rows();
  Mat<S> xhat(x.rows(), x.cols());
  Vec<S> rstd(x.cols());
  for (Index j = 0; j < x.cols(); ++j) {
    const S mean = x.col(j).mean();
    const S var = (x.col(j).array() - mean).square().sum() / S(n);
    rstd[j] = S(1) / std::sqrt(var + kLayerNormEps<S>);
    xhat.col(j) = (x.col(j).array() - mean) * rstd[j];
  }
  Mat<S> y = (xhat.array().colwise() * gamma.array()).matrix();
  y.colwise() += beta;
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

template <typename S, typename G, typename DG, typename DB>
Mat<S> layer_norm_backward(const NormCache<S> &c, const G &gamma, const Mat<S> &dy, DG &&dgamma, DB &&dbeta) {
  dgamma += (dy.array() * c.xhat.array()).rowwise().sum().matrix();
  dbeta += dy.rowwise().sum();
  const Mat<S> dxhat = (dy.array().colwise() * gamma.array()).matrix();
  const S n = S(dy.rows());
  Mat<S> dx(dy.rows(), dy.cols());
  for (Index j = 0; j < dy.cols(); ++j) {
    const S sum = dxhat.col(j).sum();
    const S dot = dxhat.col(j).dot(c.xhat.col(j));
    dx.col(j) = (c.rstd[j] / n) * (n * dxhat.col(j).array() - sum - c.xhat.col(j).array() * dot).matrix();
  }
  return dx;
}

// ---- MLP -------------------------------------------------------------------

template <typename S> struct MlpCache {
  Mat<S> input, pre, act;
};

template <typename S, typename P>
Mat<S> mlp(const P &params, const LinearSlots &fc1, const LinearSlots &fc2, const Mat<S> &x, MlpCache<S> *cache) {
  Mat<S> pre = linear<S>(params.mat(fc1.weight), params.vec(fc1.bias), x);
  Mat<S> act = pre.unaryExpr([](S v) { return gelu(v); });
  Mat<S> out = linear<S>(params.mat(fc2.weight), params.vec(fc2.bias), act);
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

template <typename S, typename P, typename G>
Mat<S> mlp_backward(const P &params, const LinearSlots &fc1, const LinearSlots &fc2, const MlpCache<S> &c,
                    const Mat<S> &dy, G &grads) {
  const Mat<S> dact = linear_backward<S>(params.mat(fc2.weight), c.act, dy, grads.mat(fc2.weight), grads.vec(fc2.bias));
  const Mat<S> dpre = (dact.array() * c.pre.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  return linear_backward<S>(params.mat(fc1.weight), c.input, dpre, grads.mat(fc1.weight), grads.vec(fc1.bias));
}

// ---- multi-head self-attention ---------------------------------------------

template <typename S> struct AttentionCache {
  Mat<S> input, qkv, concat;
  std::vector<Mat<S>> probs; // per head, N x N, row i = query i
};

template <typename S, typename P>
Mat<S> attention(const P &params, const BlockSlots &b, int heads, const Mat<S> &x, AttentionCache<S> *cache) {
  const Index C = x.rows(), N = x.cols(), d = C / heads;
  const S scale = S(1) / std::sqrt(S(d));
  Mat<S> qkv = linear<S>(params.mat(b.qkv.weight), params.vec(b.qkv.bias), x);
  Mat<S> concat(C, N);
  std::vector<Mat<S>> probs(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    const auto q = qkv.middleRows(h * d, d);
    const auto k = qkv.middleRows(C + h * d, d);
    const auto v = qkv.middleRows(2 * C + h * d, d);
    Mat<S> p = scale * (q.transpose() * k);
    for (Index i = 0; i < N; ++i) {
      const S m = p.row(i).maxCoeff();
      p.row(i) = (p.row(i).array() - m).exp();
      p.row(i) /= p.row(i).sum();
    }
    concat.middleRows(h * d, d).noalias() = v * p.transpose();
    probs[static_cast<std::size_t>(h)] = std::move(p);
  }
  Mat<S> out = linear<S>(params.mat(b.proj.weight), params.vec(b.proj.bias), concat);
  if (cache) {
    cache->input = x;
    cache->qkv = std::move(qkv);
    cache->concat = std::move(concat);
    cache->probs = std::move(probs);
  }
  return out;
}

template <typename S, typename P, typename G>
Mat<S> attention_backward(const P &params, const BlockSlots &b, int heads, const AttentionCache<S> &c,
                          const Mat<S> &dy, G &grads) {
  const Index C = c.input.rows(), d = C / heads;
  const S scale = S(1) / std::sqrt(S(d));
  const Mat<S> dconcat =
      linear_backward<S>(params.mat(b.proj.weight), c.concat, dy, grads.mat(b.proj.weight), grads.vec(b.proj.bias));
  Mat<S> dqkv(c.qkv.rows(), c.qkv.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat<S> &p = c.probs[static_cast<std::size_t>(h)];
    const auto q = c.qkv.middleRows(h * d, d);
    const auto k = c.qkv.middleRows(C + h * d, d);
    const auto v = c.qkv.middleRows(2 * C + h * d, d);
    const auto dout = dconcat.middleRows(h * d, d);
    dqkv.middleRows(2 * C + h * d, d).noalias() = dout * p;
    const Mat<S> dp = dout.transpose() * v;
    // Softmax Jacobian, row-wise.
    const Vec<S> rowdot = (dp.array() * p.array()).rowwise().sum();
    const Mat<S> ds = (p.array() * (dp.array().colwise() - rowdot.array())).matrix();
    dqkv.middleRows(h * d, d).noalias() = scale * (k * ds.transpose());
    dqkv.middleRows(C + h * d, d).noalias() = scale * (q * ds);
  }
  return linear_backward<S>(params.mat(b.qkv.weight), c.input, dqkv, grads.mat(b.qkv.weight), grads.vec(b.qkv.bias));
}

// ---- pre-norm transformer block --------------------------------------------

template <typename S> struct BlockCache {
  NormCache<S> ln1, ln2;
  AttentionCache<S> attn;
  MlpCache<S> mlp;
};

/// x + Attn(LN1(x)), then + MLP(LN2(.)).
template <typename S, typename P>
Mat<S> block(const P &params, const BlockSlots &b, int heads, const Mat<S> &x, BlockCache<S> *cache) {
  const Mat<S> n1 = layer_norm<S>(x, params.vec(b.ln1.gamma), params.vec(b.ln1.beta), cache ? &cache->ln1 : nullptr);
  const Mat<S> mid = x + attention<S>(params, b, heads, n1, cache ? &cache->attn : nullptr);
  const Mat<S> n2 = layer_norm<S>(mid, params.vec(b.ln2.gamma), params.vec(b.ln2.beta), cache ? &cache->ln2 : nullptr);
  return mid + mlp<S>(params, b.fc1, b.fc2, n2, cache ? &cache->mlp : nullptr);
}

template <typename S, typename P, typename G>
Mat<S> block_backward(const P &params, const BlockSlots &b, int heads, const BlockCache<S> &c, const Mat<S> &dy,
                      G &grads) {
  const Mat<S> dn2 = mlp_backward<S>(params, b.fc1, b.fc2, c.mlp, dy, grads);
  const Mat<S> dmid =
      dy + layer_norm_backward<S>(c.ln2, params.vec(b.ln2.gamma), dn2, grads.vec(b.ln2.gamma), grads.vec(b.ln2.beta));
  const Mat<S> dn1 = attention_backward<S>(params, b, heads, c.attn, dmid, grads);
  return dmid +
         layer_norm_backward<S>(c.ln1, params.vec(b.ln1.gamma), dn1, grads.vec(b.ln1.gamma), grads.vec(b.ln1.beta));
}

} // namespace dynpatch::layers
