#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dynpatch/model/mae.hpp"
#include "dynpatch/phantom.hpp"

namespace dynpatch {

struct TrainConfig {
  double lr = 2e-4;
  double min_lr = 1e-6;
  double beta1 = 0.9, beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  int warmup_epochs = 5;
  int epochs = 35;
  int batch = 24;
  std::uint64_t seed = 0;
  /// Train in 64-bit arithmetic; the returned parameters are still float.
  bool f64 = false;

  void validate() const;
};

/// Linear warmup over the first warmup_epochs' worth of steps, then cosine
/// decay reaching min_lr exactly at total_steps - 1.
double lr_at(long step, long total_steps, const TrainConfig &cfg);

template <typename S> struct AdamState {
  Vec<S> m, v;
  long t = 0;
};

/// One decoupled-weight-decay Adam update; theta -= lr * (mhat / (sqrt(vhat) + eps) + wd * theta).
template <typename S>
void adamw_step(Vec<S> &params, const Vec<S> &grads, AdamState<S> &state, double lr, const TrainConfig &cfg);

extern template void adamw_step<float>(Vec<float> &, const Vec<float> &, AdamState<float> &, double,
                                       const TrainConfig &);
extern template void adamw_step<double>(Vec<double> &, const Vec<double> &, AdamState<double> &, double,
                                        const TrainConfig &);

struct EpochRecord {
  int epoch = 0;
  long step = 0; // optimizer steps completed at the end of the epoch
  double lr = 0.0; // rate used by the epoch's last step
  double loss_total = 0.0;
  std::vector<double> loss_scale;
};

struct TrainResult {
  std::vector<EpochRecord> curve;
  ModelParams<float> params;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> csv, checkpoint;
};

/// Mask seed for (epoch, sample); a fresh plan is drawn every epoch.
std::uint64_t mask_seed(std::uint64_t seed, long epoch, long sample);

/// Mini-batch AdamW on pre-tokenized samples. Gradients are summed in
/// ascending sample order and divided by the batch size.
TrainResult train(const ModelConfig &model_cfg, const TrainConfig &train_cfg, const std::vector<TokenSet> &data,
                  const TrainOutputs &outputs = {});

/// Tokenizes phantoms with base edge / scales from the model config.
std::vector<TokenSet> phantom_dataset(const std::vector<PhantomSpec> &specs, const ModelConfig &model_cfg,
                                      double tau = kDefaultTau);

TrainResult train_toy(const ModelConfig &model_cfg, const TrainConfig &train_cfg,
                      const std::vector<PhantomSpec> &phantoms, const TrainOutputs &outputs = {});

/// Mean masked reconstruction loss over `repeats` mask draws per sample.
double evaluate(const ModelParams<float> &params, const std::vector<TokenSet> &data, double mask_ratio,
                std::uint64_t seed, int repeats = 4);

void write_loss_csv(const std::filesystem::path &path, const std::vector<EpochRecord> &curve, int num_scales);

/// Small desk-scale settings used by the toy profile.
ModelConfig toy_model_config();
TrainConfig toy_train_config();
PhantomSpec toy_phantom_spec(std::uint64_t seed);

// ---- finite-difference gradient check ----

struct GradcheckOptions {
  double step = 1e-5; // relative: h = step * (1 + |theta|)
  double tol = 1e-6;
  /// Floor of the relative-error denominator.
  double floor = 1e-3;
  double mask_ratio = 0.75;
  std::uint64_t seed = 0;
  Index max_checked = 10000;
  /// Multiplies one analytic head gradient entry before comparison.
  double fault_scale = 1.0;
  /// Flat index of the faulted entry; defaults to the head entry with the largest gradient.
  std::optional<Index> fault_index;
};

struct GradcheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  Index checked = 0, total = 0;
  bool passed = false;
};

/// Toy instance: an 8^3 random volume with base edge 2. For K = 2 the
/// layout has four coarse tokens and one cell split into eight fine tokens;
/// for K = 1 it has twelve fine tokens. The ZeroMLP output layer is
/// randomized so that every parameter carries gradient.
GradcheckReport gradcheck(const ModelConfig &cfg, const GradcheckOptions &opts);

TokenSet gradcheck_tokens(const ModelConfig &cfg, std::uint64_t seed);

struct GradcheckEntry {
  Index index = 0;
  double analytic = 0.0; // after the fault scale
  double numeric = 0.0;
  double rel_err = 0.0;
};

/// Same instance as gradcheck(); compares the listed entries, each with its
/// analytic gradient multiplied by opts.fault_scale.
std::vector<GradcheckEntry> gradcheck_entries(const ModelConfig &cfg, const GradcheckOptions &opts,
                                              const std::vector<Index> &indices);

/// Flat indices of every per-scale head weight and bias.
std::vector<Index> head_parameter_indices(const ModelParams<double> &params);

} // namespace dynpatch
