#include "dynpatch/model/params.hpp"

#include <cmath>

#include "dynpatch/error.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

int ParamLayout::add(std::string name, Index rows, Index cols) {
  slots_.push_back(ParamSlot{std::move(name), rows, cols, total_});
  total_ += rows * cols;
  return static_cast<int>(slots_.size()) - 1;
}

std::optional<int> ParamLayout::find(const std::string &name) const {
  for (std::size_t i = 0; i < slots_.size(); ++i)
    if (slots_[i].name == name)
      return static_cast<int>(i);
  return std::nullopt;
}

std::string ParamLayout::describe(Index flat) const {
  for (const auto &s : slots_)
    if (flat >= s.offset && flat < s.offset + s.size()) {
      const Index local = flat - s.offset;
      return s.name + "[" + std::to_string(local % s.rows) + "," + std::to_string(local / s.rows) + "]";
    }
  return "<out of range>";
}

namespace {

LinearSlots add_linear(ParamLayout &p, const std::string &name, Index in, Index out) {
  return {p.add(name + ".weight", out, in), p.add(name + ".bias", out, 1)};
}

NormSlots add_norm(ParamLayout &p, const std::string &name, Index dim) {
  return {p.add(name + ".gamma", dim, 1), p.add(name + ".beta", dim, 1)};
}

BlockSlots add_block(ParamLayout &p, const std::string &name, Index dim, Index hidden) {
  BlockSlots b;
  b.ln1 = add_norm(p, name + ".ln1", dim);
  b.qkv = add_linear(p, name + ".attn.qkv", dim, 3 * dim);
  b.proj = add_linear(p, name + ".attn.proj", dim, dim);
  b.ln2 = add_norm(p, name + ".ln2", dim);
  b.fc1 = add_linear(p, name + ".mlp.fc1", dim, hidden);
  b.fc2 = add_linear(p, name + ".mlp.fc2", hidden, dim);
  return b;
}

} // namespace

ModelLayout make_model_layout(const ModelConfig &cfg) {
  cfg.validate();
  ModelLayout m;
  auto &p = m.params;
  const Index C = cfg.embed_dim, D = cfg.dec_dim;
  m.phi = add_linear(p, "phi", cfg.token_length(0), C);
  if (cfg.num_scales > 1) {
    m.grid_agg = add_linear(p, "grid_agg", 8 * C, C);
    m.zero_fc1 = add_linear(p, "zero_mlp.fc1", C, cfg.hidden(C));
    m.zero_fc2 = add_linear(p, "zero_mlp.fc2", cfg.hidden(C), C);
  }
  for (int i = 0; i < cfg.enc_depth; ++i)
    m.enc.push_back(add_block(p, "enc." + std::to_string(i), C, cfg.hidden(C)));
  m.enc_to_dec = add_linear(p, "enc_to_dec", C, D);
  m.mask_token = p.add("mask_token", D, 1);
  m.scale_table = p.add("scale_table", cfg.num_scales, D);
  for (int i = 0; i < cfg.dec_depth; ++i)
    m.dec.push_back(add_block(p, "dec." + std::to_string(i), D, cfg.hidden(D)));
  for (int s = 0; s < cfg.num_scales; ++s)
    m.heads.push_back(add_linear(p, "heads." + std::to_string(s), D, cfg.token_length(s)));
  return m;
}

template <typename S> ModelParams<S> init_params(const ModelConfig &cfg, std::uint64_t seed) {
  ModelParams<S> params;
  params.config = cfg;
  params.layout = std::make_shared<const ModelLayout>(make_model_layout(cfg));
  const auto &layout = *params.layout;
  params.values = Vec<S>::Zero(layout.params.total());

  const auto &slots = layout.params.slots();
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto &slot = slots[i];
    CounterRng rng(derive_seed(seed, {i}));
    auto v = params.vec(static_cast<int>(i));
    const auto ends_with = [&](const char *suffix) {
      const std::string s(suffix);
      return slot.name.size() >= s.size() && slot.name.compare(slot.name.size() - s.size(), s.size(), s) == 0;
    };
    if (ends_with(".gamma")) {
      v.setOnes();
    } else if (ends_with(".weight")) {
      const double a = std::sqrt(6.0 / static_cast<double>(slot.rows + slot.cols));
      for (Index k = 0; k < v.size(); ++k)
        v[k] = static_cast<S>(rng.uniform(-a, a));
    } else if (slot.name == "mask_token" || slot.name == "scale_table") {
      for (Index k = 0; k < v.size(); ++k)
        v[k] = static_cast<S>(0.02 * rng.normal());
    }
  }
  if (cfg.num_scales > 1) {
    params.vec(layout.zero_fc2.weight).setZero();
    params.vec(layout.zero_fc2.bias).setZero();
  }
  return params;
}

template ModelParams<float> init_params<float>(const ModelConfig &, std::uint64_t);
template ModelParams<double> init_params<double>(const ModelConfig &, std::uint64_t);

} // namespace dynpatch
