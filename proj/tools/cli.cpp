#include "cli.hpp"

#include <algorithm>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "dynpatch/complexity.hpp"
#include "dynpatch/error.hpp"
#include "dynpatch/parallel.hpp"
#include "dynpatch/rng.hpp"
#include "dynpatch/tokenizer.hpp"
#include "dynpatch/train.hpp"

namespace dynpatch::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  int threads = 0;
  bool f64 = false;
  bool quiet = false;
};

struct ComplexityArgs {
  std::string input, out, metric = "variance";
  Index coarse_edge = 8;
};

struct TokenizeArgs {
  std::string input, out, mask_out, metric = "variance";
  double tau = kDefaultTau, bg_thresh = kDefaultBackgroundThreshold, mask_ratio = 0.75;
  Index base_edge = kDefaultBaseEdge;
  int scales = kDefaultScales;
  bool no_zscore = false;
};

struct PretrainArgs {
  std::string profile = "toy", data, out;
  int epochs = 0, phantoms = 4;
  bool dry_run = false, force = false;
};

struct GradcheckArgs {
  std::string config = "toy";
  double tol = 1e-6, mask_ratio = 0.75, fault = 1.0;
  int scales = 2;
  bool patch_norm = false;
  Index max_checked = 10000;
};

struct PhantomArgs {
  std::string out;
  Index edge = 64, frames = 8;
  int blobs = 6;
  double noise = 0.05;
};

// Data errors surface as exit code 2 with a one-line diagnostic.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ComplexityMetric metric_or_throw(const std::string &name) {
  const auto m = parse_metric(name);
  if (!m)
    throw UsageError("unknown metric '" + name + "'; valid metrics: " + std::string(kMetricNames));
  return *m;
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(6) << v;
  return s.str();
}

int cmd_complexity(const Globals &g, const ComplexityArgs &a, std::ostream &out) {
  const auto metric = metric_or_throw(a.metric);
  const auto map = complexity_map(load_volume(a.input), metric, a.coarse_edge);
  write_complexity_json(map, a.out);
  if (!g.quiet) {
    const double mx = map.scores.size() ? map.scores.maxCoeff() : 0.0;
    out << "cells=" << map.cells() << " metric=" << a.metric << " max=" << fmt(mx) << '\n';
  }
  return kOk;
}

int cmd_tokenize(const Globals &g, const TokenizeArgs &a, std::ostream &out) {
  TokenizeOptions opts;
  opts.pyramid.base_edge = a.base_edge;
  opts.pyramid.num_scales = a.scales;
  opts.pyramid.bg_thresh = a.bg_thresh;
  opts.pyramid.metric = metric_or_throw(a.metric);
  opts.tau = a.tau;
  opts.zscore = !a.no_zscore;
  const auto tv = tokenize_volume(load_volume(a.input), opts);
  const auto rep = token_count_report(tv.layout);
  out << "tokens=" << rep.total << " fine=" << rep.per_scale.front() << " coarse=" << rep.per_scale.back()
      << " uniform_fine=" << rep.uniform_fine_total << " reduction=" << fmt(rep.reduction_ratio);
  for (std::size_t s = 1; s + 1 < rep.per_scale.size(); ++s)
    out << " scale_" << s << '=' << rep.per_scale[s];
  out << '\n';
  if (!a.out.empty())
    write_layout_json(tv.layout, a.out);
  if (!a.mask_out.empty())
    write_mask_json(sample_mask(tv.layout, a.mask_ratio, g.seed), a.mask_out);
  return kOk;
}

ModelConfig paper_model_config(Index frames) {
  ModelConfig c;
  c.embed_dim = 768;
  c.enc_depth = 12;
  c.enc_heads = 12;
  c.dec_dim = 512;
  c.dec_depth = 8;
  c.dec_heads = 16;
  c.num_scales = 2;
  c.base_edge = 4;
  c.frames = frames;
  c.mask_ratio = 0.75;
  c.patch_norm_targets = false;
  return c;
}

TrainConfig paper_train_config() {
  TrainConfig t; // the defaults are this profile
  t.epochs = 35;
  t.batch = 24;
  return t;
}

json profile_json(const std::string &profile, const ModelConfig &m, const TrainConfig &t, double tau) {
  json model = json::parse(to_json_text(m));
  if (profile == "paper")
    model.erase("frames"); // set by the data
  return {{"profile", profile},
          {"model", model},
          {"tokenizer", {{"tau", tau}, {"base_edge", m.base_edge}, {"scales", m.num_scales},
                         {"bg_thresh", kDefaultBackgroundThreshold}}},
          {"train",
           {{"optimizer", "AdamW"},
            {"betas", {t.beta1, t.beta2}},
            {"schedule", "warmup_cosine"},
            {"lr", t.lr},
            {"min_lr", t.min_lr},
            {"weight_decay", t.weight_decay},
            {"warmup_epochs", t.warmup_epochs},
            {"epochs", t.epochs},
            {"batch", t.batch}}}};
}

std::vector<fs::path> data_files(const fs::path &dir) {
  if (!fs::is_directory(dir))
    throw UsageError("data directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto &e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (e.is_regular_file() && (ext == ".vol" || ext == ".nii" || ext == ".hdr"))
      files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty())
    throw UsageError("no .vol, .nii or .hdr volumes in " + dir.string());
  return files;
}

std::vector<TokenSet> load_dataset(const std::vector<fs::path> &files, const ModelConfig &m) {
  TokenizeOptions opts;
  opts.pyramid.base_edge = m.base_edge;
  opts.pyramid.num_scales = m.num_scales;
  std::vector<TokenSet> data;
  for (const auto &f : files) {
    const auto tv = tokenize_volume(load_volume(f), opts);
    if (tv.signal.frames() != m.frames)
      throw UsageError("volume " + f.string() + " has " + std::to_string(tv.signal.frames()) + " frames, expected " +
                       std::to_string(m.frames));
    data.push_back(make_token_set(tv.signal, tv.layout));
  }
  return data;
}

int cmd_pretrain(const Globals &g, const PretrainArgs &a, std::ostream &out) {
  const bool paper = a.profile == "paper";
  ModelConfig model = paper ? paper_model_config(8) : toy_model_config();
  TrainConfig train_cfg = paper ? paper_train_config() : toy_train_config();
  if (a.epochs > 0) {
    train_cfg.epochs = a.epochs;
    train_cfg.warmup_epochs = std::min(train_cfg.warmup_epochs, a.epochs);
  }
  train_cfg.seed = g.seed;
  train_cfg.f64 = g.f64;

  if (a.dry_run) {
    out << profile_json(a.profile, model, train_cfg, kDefaultTau).dump(2) << '\n';
    return kOk;
  }
  if (paper && !a.force)
    throw UsageError("refusing the paper profile at desk scale (about 157M parameters); pass --force to run anyway");
  if (a.out.empty())
    throw UsageError("--out is required unless --dry-run is given");
  if (paper && a.data.empty())
    throw UsageError("the paper profile needs --data");

  std::vector<TokenSet> data;
  if (!a.data.empty()) {
    const auto files = data_files(a.data);
    model.frames = load_volume(files.front()).frames();
    data = load_dataset(files, model);
  } else {
    std::vector<PhantomSpec> specs;
    for (int i = 0; i < a.phantoms; ++i)
      specs.push_back(toy_phantom_spec(derive_seed(g.seed, {0x70686eULL, static_cast<std::uint64_t>(i)})));
    data = phantom_dataset(specs, model);
  }

  fs::create_directories(a.out);
  const TrainOutputs outputs{fs::path(a.out) / "loss.csv", fs::path(a.out) / "model.ckpt"};
  const auto result = train(model, train_cfg, data, outputs);
  if (!g.quiet)
    for (const auto &r : result.curve)
      out << "epoch=" << r.epoch << " step=" << r.step << " lr=" << fmt(r.lr) << " loss=" << fmt(r.loss_total) << '\n';
  const double first = result.curve.front().loss_total, last = result.curve.back().loss_total;
  out << "samples=" << data.size() << " steps=" << result.curve.back().step << " initial_loss=" << fmt(first)
      << " final_loss=" << fmt(last) << " ratio=" << fmt(last / first) << '\n';
  return kOk;
}

int cmd_gradcheck(const Globals &g, const GradcheckArgs &a, std::ostream &out) {
  if (a.config != "toy")
    throw UsageError("only --config toy is available");
  ModelConfig cfg; // C=16, depth 2, twelve tokens
  cfg.num_scales = a.scales;
  cfg.patch_norm_targets = a.patch_norm;
  GradcheckOptions opts;
  opts.tol = a.tol;
  opts.mask_ratio = a.mask_ratio;
  opts.seed = g.seed;
  opts.max_checked = a.max_checked;
  opts.fault_scale = a.fault;
  const auto r = gradcheck(cfg, opts);
  out << "max_rel_err=" << fmt(r.max_rel_err) << " worst=" << r.worst_param << " checked=" << r.checked << '/'
      << r.total << " result=" << (r.passed ? "pass" : "fail") << '\n';
  return r.passed ? kOk : kCheckFailed;
}

int cmd_phantom(const Globals &g, const PhantomArgs &a, std::ostream &out) {
  PhantomSpec s;
  s.edge = a.edge;
  s.frames = a.frames;
  s.n_blobs = a.blobs;
  s.noise_sigma = a.noise;
  s.seed = g.seed;
  write_raw_volume(make_phantom(s), a.out);
  if (!g.quiet)
    out << "wrote " << a.out << " dims=" << a.edge << 'x' << a.edge << 'x' << a.edge << 'x' << a.frames << '\n';
  return kOk;
}

} // namespace

int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
  CLI::App app{"Dynamic patch tokenization and scale-aware masked autoencoding for 4D volumes", "dynpatch"};
  app.fallthrough();
  app.require_subcommand(1);

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream");
  app.add_option("--threads", g.threads, "Worker cap (0 = hardware); never changes results")->check(CLI::NonNegativeNumber);
  app.add_flag("--f64", g.f64, "Use 64-bit arithmetic for training");
  app.add_flag("--quiet", g.quiet, "Only print the machine-readable report lines");

  ComplexityArgs ca;
  auto *complexity = app.add_subcommand("complexity", "Per-patch complexity map");
  complexity->add_option("--input", ca.input, "Volume (.nii, .hdr or raw .vol)")->required();
  complexity->add_option("--metric", ca.metric, "variance | entropy | laplacian | mse");
  complexity->add_option("--coarse-edge", ca.coarse_edge, "Patch edge in voxels");
  complexity->add_option("--out", ca.out, "Output .cmap.json")->required();

  TokenizeArgs ta;
  auto *tokenize = app.add_subcommand("tokenize", "Dynamic token layout and count report");
  tokenize->add_option("--input", ta.input, "Volume (.nii, .hdr or raw .vol)")->required();
  tokenize->add_option("--tau", ta.tau, "Complexity threshold");
  tokenize->add_option("--base-edge", ta.base_edge, "Finest patch edge");
  tokenize->add_option("--scales", ta.scales, "Number of scales K");
  tokenize->add_option("--bg-thresh", ta.bg_thresh, "Background threshold on the max-normalized mean");
  tokenize->add_option("--metric", ta.metric, "variance | entropy | laplacian | mse");
  tokenize->add_flag("--no-zscore", ta.no_zscore, "Skip global z-scoring");
  tokenize->add_option("--out", ta.out, "Layout JSON");
  tokenize->add_option("--mask-ratio", ta.mask_ratio, "Ratio for --mask-out");
  tokenize->add_option("--mask-out", ta.mask_out, "Mask plan JSON");

  PretrainArgs pa;
  auto *pretrain = app.add_subcommand("pretrain", "Masked-autoencoder pretraining");
  pretrain->add_option("--profile", pa.profile, "toy | paper")->check(CLI::IsMember({"toy", "paper"}));
  pretrain->add_option("--epochs", pa.epochs, "Override the profile's epoch count");
  pretrain->add_option("--data", pa.data, "Directory of volumes (default: generated phantoms)");
  pretrain->add_option("--phantoms", pa.phantoms, "Phantom count when --data is absent")->check(CLI::PositiveNumber);
  pretrain->add_option("--out", pa.out, "Output directory for loss.csv and model.ckpt");
  pretrain->add_flag("--dry-run", pa.dry_run, "Print the resolved configuration and exit");
  pretrain->add_flag("--force", pa.force, "Allow the paper profile to run");

  GradcheckArgs ga;
  auto *grad = app.add_subcommand("gradcheck", "Finite-difference check of the analytic gradients");
  grad->add_option("--config", ga.config, "toy");
  grad->add_option("--tol", ga.tol, "Relative error tolerance");
  grad->add_option("--scales", ga.scales, "1 or 2")->check(CLI::Range(1, 2));
  grad->add_flag("--patch-norm", ga.patch_norm, "Standardize targets per patch");
  grad->add_option("--mask-ratio", ga.mask_ratio, "Mask ratio of the check instance");
  grad->add_option("--inject-fault", ga.fault, "Scale the largest head gradient entry by this factor");
  grad->add_option("--max-checked", ga.max_checked, "Subsample above this many parameters");

  PhantomArgs ph;
  auto *phantom = app.add_subcommand("phantom", "Synthetic 4D phantom as a raw volume");
  phantom->add_option("--edge", ph.edge, "Spatial edge (multiple of 8)");
  phantom->add_option("--frames", ph.frames, "Time points");
  phantom->add_option("--blobs", ph.blobs, "Number of oscillating blobs");
  phantom->add_option("--noise", ph.noise, "Noise standard deviation");
  phantom->add_option("--out", ph.out, "Output .vol (sidecar written next to it)")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp &) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp &) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError &e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (g.threads > 0)
      set_max_threads(g.threads);
    if (complexity->parsed())
      return cmd_complexity(g, ca, out);
    if (tokenize->parsed())
      return cmd_tokenize(g, ta, out);
    if (pretrain->parsed())
      return cmd_pretrain(g, pa, out);
    if (grad->parsed())
      return cmd_gradcheck(g, ga, out);
    if (phantom->parsed())
      return cmd_phantom(g, ph, out);
  } catch (const UsageError &e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error &e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

} // namespace dynpatch::cli
