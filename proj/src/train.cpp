#include "dynpatch/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "dynpatch/error.hpp"
#include "dynpatch/model/checkpoint.hpp"
#include "dynpatch/parallel.hpp"
#include "dynpatch/rng.hpp"

namespace dynpatch {

void TrainConfig::validate() const {
  if (!(min_lr >= 0.0 && min_lr <= lr))
    throw Error(ErrorKind::BadConfig, "need 0 <= min_lr <= lr");
  if (epochs < 1 || batch < 1 || warmup_epochs < 0 || warmup_epochs > epochs)
    throw Error(ErrorKind::BadConfig, "need epochs >= 1, batch >= 1 and 0 <= warmup_epochs <= epochs");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0 && weight_decay >= 0.0))
    throw Error(ErrorKind::BadConfig, "invalid AdamW hyperparameters");
}

double lr_at(long step, long total_steps, const TrainConfig &cfg) {
  const long warmup = std::lround(static_cast<double>(total_steps) * cfg.warmup_epochs / cfg.epochs);
  if (step < warmup)
    return cfg.lr * static_cast<double>(step) / static_cast<double>(warmup);
  const long span = total_steps - 1 - warmup;
  if (span <= 0)
    return cfg.min_lr;
  const double progress = std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(span));
  return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename S>
void adamw_step(Vec<S> &params, const Vec<S> &grads, AdamState<S> &state, double lr, const TrainConfig &cfg) {
  if (grads.size() != params.size())
    throw Error(ErrorKind::ShapeMismatch, "gradient and parameter sizes differ");
  if (state.m.size() == 0) {
    state.m = Vec<S>::Zero(params.size());
    state.v = Vec<S>::Zero(params.size());
  }
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw Error(ErrorKind::ShapeMismatch, "optimizer state does not match the parameters");
  ++state.t;
  const S b1 = S(cfg.beta1), b2 = S(cfg.beta2);
  state.m = b1 * state.m + (S(1) - b1) * grads;
  state.v = b2 * state.v + (S(1) - b2) * grads.cwiseProduct(grads);
  const S c1 = S(1) / S(1.0 - std::pow(cfg.beta1, static_cast<double>(state.t)));
  const S c2 = S(1) / S(1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)));
  params *= S(1.0 - lr * cfg.weight_decay);
  params.array() -= S(lr) * (state.m.array() * c1) / ((state.v.array() * c2).sqrt() + S(cfg.eps));
}

template void adamw_step<float>(Vec<float> &, const Vec<float> &, AdamState<float> &, double, const TrainConfig &);
template void adamw_step<double>(Vec<double> &, const Vec<double> &, AdamState<double> &, double,
                                 const TrainConfig &);

std::uint64_t mask_seed(std::uint64_t seed, long epoch, long sample) {
  return derive_seed(seed, {0x65706f63ULL, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(sample)});
}

namespace {

template <typename S>
std::vector<EpochRecord> run_training(ModelParams<S> &params, const TrainConfig &cfg,
                                      const std::vector<TokenSet> &data) {
  const auto &model_cfg = params.config;
  std::vector<EpochRecord> curve;
  AdamState<S> adam;

  const long n = static_cast<long>(data.size());
  const long per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const long total = per_epoch * cfg.epochs;
  const auto K = static_cast<std::size_t>(model_cfg.num_scales);
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss_scale.assign(K, 0.0);
    for (long start = 0; start < n; start += cfg.batch) {
      const long stop = std::min(n, start + cfg.batch);
      auto grads = params.zeros_like();
      for (long i = start; i < stop; ++i) {
        const auto &sample = data[static_cast<std::size_t>(i)];
        const auto plan = sample_mask(sample.layout, model_cfg.mask_ratio, mask_seed(cfg.seed, epoch, i));
        ForwardTrace<S> trace;
        const auto loss = forward_loss(params, sample, plan, &trace);
        backward(params, sample, trace, grads);
        rec.loss_total += loss.total;
        for (std::size_t s = 0; s < K; ++s)
          rec.loss_scale[s] += loss.per_scale[s];
      }
      grads.values /= static_cast<S>(stop - start);
      rec.lr = lr_at(step, total, cfg);
      adamw_step(params.values, grads.values, adam, rec.lr, cfg);
      ++step;
    }
    rec.step = step;
    rec.loss_total /= static_cast<double>(n);
    for (auto &l : rec.loss_scale)
      l /= static_cast<double>(n);
    curve.push_back(std::move(rec));
  }
  return curve;
}

} // namespace

TrainResult train(const ModelConfig &model_cfg, const TrainConfig &cfg, const std::vector<TokenSet> &data,
                  const TrainOutputs &outputs) {
  cfg.validate();
  if (data.empty())
    throw Error(ErrorKind::EmptyInput, "no training samples");
  TrainResult result;
  if (cfg.f64) {
    auto params = init_params<double>(model_cfg, cfg.seed);
    result.curve = run_training(params, cfg, data);
    result.params = params.cast<float>();
  } else {
    result.params = init_params<float>(model_cfg, cfg.seed);
    result.curve = run_training(result.params, cfg, data);
  }
  const auto &params = result.params;
  if (outputs.csv)
    write_loss_csv(*outputs.csv, result.curve, model_cfg.num_scales);
  if (outputs.checkpoint)
    save_checkpoint(*outputs.checkpoint, params);
  return result;
}

std::vector<TokenSet> phantom_dataset(const std::vector<PhantomSpec> &specs, const ModelConfig &model_cfg, double tau) {
  std::vector<TokenSet> data;
  TokenizeOptions opts;
  opts.pyramid.base_edge = model_cfg.base_edge;
  opts.pyramid.num_scales = model_cfg.num_scales;
  opts.tau = tau;
  for (const auto &spec : specs) {
    if (spec.frames != model_cfg.frames)
      throw Error(ErrorKind::BadConfig, "phantom frame count differs from the model's");
    const auto tv = tokenize_volume(make_phantom(spec), opts);
    data.push_back(make_token_set(tv.signal, tv.layout));
  }
  return data;
}

TrainResult train_toy(const ModelConfig &model_cfg, const TrainConfig &train_cfg,
                      const std::vector<PhantomSpec> &phantoms, const TrainOutputs &outputs) {
  return train(model_cfg, train_cfg, phantom_dataset(phantoms, model_cfg), outputs);
}

double evaluate(const ModelParams<float> &params, const std::vector<TokenSet> &data, double mask_ratio,
                std::uint64_t seed, int repeats) {
  double sum = 0.0;
  long count = 0;
  for (int r = 0; r < repeats; ++r)
    for (std::size_t i = 0; i < data.size(); ++i) {
      const auto plan = sample_mask(data[i].layout, mask_ratio,
                                    derive_seed(seed, {0x6576616cULL, static_cast<std::uint64_t>(r), i}));
      sum += forward_loss(params, data[i], plan).total;
      ++count;
    }
  return count ? sum / static_cast<double>(count) : 0.0;
}

void write_loss_csv(const std::filesystem::path &path, const std::vector<EpochRecord> &curve, int num_scales) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.precision(17);
  out << "epoch,step,lr,loss_total";
  for (int s = 0; s < num_scales; ++s)
    out << ",loss_scale_" << s;
  out << '\n';
  for (const auto &r : curve) {
    out << r.epoch << ',' << r.step << ',' << r.lr << ',' << r.loss_total;
    for (double l : r.loss_scale)
      out << ',' << l;
    out << '\n';
  }
  if (!out)
    throw Error(ErrorKind::IoError, "failed writing " + path.string());
}

ModelConfig toy_model_config() {
  ModelConfig c;
  c.embed_dim = 32;
  c.enc_depth = 2;
  c.enc_heads = 4;
  c.dec_dim = 64;
  c.dec_depth = 1;
  c.dec_heads = 4;
  c.num_scales = 2;
  c.base_edge = 4;
  c.frames = 4;
  c.mask_ratio = 0.75;
  return c;
}

TrainConfig toy_train_config() {
  TrainConfig t;
  t.lr = 1e-2;
  t.min_lr = 1e-5;
  t.weight_decay = 0.0;
  t.warmup_epochs = 2;
  t.epochs = 50;
  t.batch = 1;
  return t;
}

PhantomSpec toy_phantom_spec(std::uint64_t seed) {
  PhantomSpec s;
  s.edge = 32;
  s.frames = 4;
  s.n_blobs = 3;
  s.seed = seed;
  return s;
}

// ---- gradient check ----

TokenSet gradcheck_tokens(const ModelConfig &cfg, std::uint64_t seed) {
  if (cfg.num_scales > 2)
    throw Error(ErrorKind::BadConfig, "the gradient-check instance supports K <= 2");
  const Index b = cfg.base_edge, c = 2 * b;
  Volume4D vol({4 * b, 4 * b, 4 * b, cfg.frames});
  CounterRng rng(derive_seed(seed, {0x766f6cULL}));
  for (Index i = 0; i < vol.size(); ++i)
    vol.data[i] = rng.uniform(-1.0, 1.0);

  TokenLayout layout;
  layout.base_edge = b;
  layout.num_scales = cfg.num_scales;
  layout.volume_dims = vol.dims;
  if (cfg.num_scales == 2) {
    // Coarse cells in the z = 0 slab, one split cell, three background cells.
    for (Index y = 0; y < 2 * c; y += c)
      for (Index x = 0; x < 2 * c; x += c)
        layout.tokens.push_back({{x, y, 0}, 1, 0});
    for (Index z = c; z < 2 * c; z += b)
      for (Index y = 0; y < c; y += b)
        for (Index x = 0; x < c; x += b)
          layout.tokens.push_back({{x, y, z}, 0, 0});
  } else {
    for (Index i = 0; i < 12; ++i)
      layout.tokens.push_back({{(i % 4) * b, ((i / 4) % 3) * b, (i % 2) * 2 * b}, 0, 0});
    std::sort(layout.tokens.begin(), layout.tokens.end(), [](const TokenRec &p, const TokenRec &q) {
      return std::tie(p.origin[2], p.origin[1], p.origin[0]) < std::tie(q.origin[2], q.origin[1], q.origin[0]);
    });
  }
  for (std::size_t i = 0; i < layout.tokens.size(); ++i)
    layout.tokens[i].linear_index = static_cast<Index>(i);
  return make_token_set(vol, layout);
}

namespace {

struct GradcheckProblem {
  TokenSet tokens;
  MaskPlan plan;
  ModelParams<double> params;
  ModelParams<double> grads;

  GradcheckProblem(const ModelConfig &cfg, const GradcheckOptions &opts)
      : tokens(gradcheck_tokens(cfg, opts.seed)),
        plan(sample_mask(tokens.layout, opts.mask_ratio, derive_seed(opts.seed, {0x706c616eULL}))),
        params(init_params<double>(cfg, opts.seed)) {
    if (cfg.num_scales > 1) {
      CounterRng rng(derive_seed(opts.seed, {0x7a65726fULL}));
      for (int slot : {params.layout->zero_fc2.weight, params.layout->zero_fc2.bias}) {
        auto v = params.vec(slot);
        for (Index i = 0; i < v.size(); ++i)
          v[i] = rng.uniform(-0.3, 0.3);
      }
    }
    ForwardTrace<double> trace;
    forward_loss(params, tokens, plan, &trace);
    grads = params.zeros_like();
    backward(params, tokens, trace, grads);
  }

  double numeric(Index i, double step) const {
    auto probe = params;
    const double theta = params.values[i];
    const double h = step * (1.0 + std::abs(theta));
    probe.values[i] = theta + h;
    const double up = forward_loss(probe, tokens, plan).total;
    probe.values[i] = theta - h;
    const double down = forward_loss(probe, tokens, plan).total;
    return (up - down) / (2.0 * h);
  }

  static double rel_err(double a, double n, double floor) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
  }
};

} // namespace

std::vector<Index> head_parameter_indices(const ModelParams<double> &params) {
  std::vector<Index> out;
  const auto &layout = params.layout->params;
  for (const auto &h : params.layout->heads)
    for (int slot : {h.weight, h.bias})
      for (Index k = 0; k < layout[slot].size(); ++k)
        out.push_back(layout[slot].offset + k);
  return out;
}

GradcheckReport gradcheck(const ModelConfig &cfg, const GradcheckOptions &opts) {
  GradcheckProblem prob(cfg, opts);
  auto &grads = prob.grads;

  Index fault = -1;
  if (opts.fault_scale != 1.0) {
    if (opts.fault_index) {
      fault = *opts.fault_index;
    } else {
      double best = -1.0;
      for (Index i : head_parameter_indices(prob.params))
        if (std::abs(grads.values[i]) > best) {
          best = std::abs(grads.values[i]);
          fault = i;
        }
    }
    if (fault < 0 || fault >= grads.values.size())
      throw Error(ErrorKind::OutOfBounds, "fault index outside the parameter vector");
    grads.values[fault] *= opts.fault_scale;
  }

  GradcheckReport report;
  report.total = prob.params.values.size();
  std::vector<Index> indices(static_cast<std::size_t>(report.total));
  for (Index i = 0; i < report.total; ++i)
    indices[static_cast<std::size_t>(i)] = i;
  if (report.total > opts.max_checked) {
    CounterRng rng(derive_seed(opts.seed, {0x73756273ULL}));
    for (Index i = 0; i < opts.max_checked; ++i)
      std::swap(indices[static_cast<std::size_t>(i)],
                indices[static_cast<std::size_t>(i + static_cast<Index>(rng.below(
                                                         static_cast<std::uint64_t>(report.total - i))))]);
    indices.resize(static_cast<std::size_t>(opts.max_checked));
    if (fault >= 0 && std::find(indices.begin(), indices.end(), fault) == indices.end())
      indices.back() = fault;
    std::sort(indices.begin(), indices.end());
  }

  const auto &layout = prob.params.layout->params;
  for (Index i : indices) {
    const double err = GradcheckProblem::rel_err(grads.values[i], prob.numeric(i, opts.step), opts.floor);
    if (report.worst_param.empty() || err > report.max_rel_err) {
      report.max_rel_err = err;
      report.worst_param = layout.describe(i);
    }
  }
  report.checked = static_cast<Index>(indices.size());
  report.passed = report.max_rel_err < opts.tol;
  return report;
}

std::vector<GradcheckEntry> gradcheck_entries(const ModelConfig &cfg, const GradcheckOptions &opts,
                                              const std::vector<Index> &indices) {
  const GradcheckProblem prob(cfg, opts);
  for (Index i : indices)
    if (i < 0 || i >= prob.params.values.size())
      throw Error(ErrorKind::OutOfBounds, "gradcheck index outside the parameter vector");
  std::vector<GradcheckEntry> out(indices.size());
  parallel_for(static_cast<std::ptrdiff_t>(indices.size()), [&](std::ptrdiff_t k) {
    const Index i = indices[static_cast<std::size_t>(k)];
    auto &e = out[static_cast<std::size_t>(k)];
    e.index = i;
    e.analytic = prob.grads.values[i] * opts.fault_scale;
    e.numeric = prob.numeric(i, opts.step);
    e.rel_err = GradcheckProblem::rel_err(e.analytic, e.numeric, opts.floor);
  });
  return out;
}

} // namespace dynpatch
