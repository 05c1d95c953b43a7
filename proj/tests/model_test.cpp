#include <doctest.h>

#include <numeric>

#include "dynpatch/error.hpp"
#include "dynpatch/model/checkpoint.hpp"
#include "dynpatch/model/mae.hpp"
#include "model_oracles.hpp"

using namespace dynpatch;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.embed_dim = 16;
  c.enc_depth = 2;
  c.enc_heads = 2;
  c.dec_dim = 12;
  c.dec_depth = 1;
  c.dec_heads = 2;
  c.num_scales = 2;
  c.base_edge = 2;
  c.frames = 2;
  return c;
}

// Fills the zero-initialized ZeroMLP output layer so every parameter is live.
template <typename S> void wake_zero_mlp(ModelParams<S> &p, std::uint64_t seed) {
  CounterRng rng(seed);
  for (int slot : {p.layout->zero_fc2.weight, p.layout->zero_fc2.bias}) {
    auto v = p.vec(slot);
    for (Index i = 0; i < v.size(); ++i)
      v[i] = static_cast<S>(rng.uniform(-0.3, 0.3));
  }
}

MaskPlan explicit_plan(Index n, std::initializer_list<Index> masked) {
  MaskPlan plan;
  plan.masked.assign(static_cast<std::size_t>(n), 0);
  for (Index i : masked)
    plan.masked[static_cast<std::size_t>(i)] = 1;
  return plan;
}

TokenSet toy_tokens(const ModelConfig &cfg, std::uint64_t seed) {
  const auto vol = oracle::random_volume({8, 8, 8, cfg.frames}, seed);
  return make_token_set(vol, oracle::twelve_token_layout(cfg.frames));
}

Eigen::VectorXd col(const Vec<double> &v) { return v; }

} // namespace

TEST_CASE("parameter layout and initialization") {
  const auto cfg = toy_config();
  const auto p = init_params<float>(cfg, 3);
  const auto &L = *p.layout;
  Index sum = 0;
  for (const auto &s : L.params.slots())
    sum += s.size();
  CHECK(sum == p.values.size());
  CHECK(p.mat(L.scale_table).rows() == cfg.num_scales);
  CHECK(p.mat(L.scale_table).cols() == cfg.dec_dim);
  CHECK(p.vec(L.zero_fc2.weight).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(p.vec(L.zero_fc2.bias).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(p.vec(L.zero_fc1.weight).cwiseAbs().maxCoeff() > 0.0f);
  CHECK(p.mat(L.heads[1].weight).rows() == cfg.token_length(1));
  CHECK(L.params.describe(L.params[L.phi.weight].offset + 1) == "phi.weight[1,0]");
  CHECK(init_params<float>(cfg, 3).values == p.values);
  CHECK(init_params<float>(cfg, 4).values != p.values);

  ModelConfig bad = cfg;
  bad.enc_heads = 3;
  CHECK_THROWS_AS(make_model_layout(bad), Error);
  bad = cfg;
  bad.num_scales = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(model_config_from_json(to_json_text(cfg)) == cfg);
}

TEST_CASE("positional embedding") {
  const TokenRec fine{{0, 0, 0}, 0, 0};
  const auto p = positional_embedding(fine, 4, 12);
  CHECK(p[0] == doctest::Approx(std::sin(1.5)).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(std::cos(1.5)).epsilon(1e-15));

  // Same centre, different scales.
  const TokenRec coarse{{0, 0, 0}, 1, 0};
  const TokenRec shifted{{2, 2, 2}, 0, 0};
  CHECK(positional_embedding(coarse, 4, 12) == positional_embedding(shifted, 4, 12));

  // Leftover channels stay zero when dim is not a multiple of 6.
  const auto q = positional_embedding(fine, 4, 16);
  CHECK(q[12] == 0.0);
  CHECK(q[15] == 0.0);

  CounterRng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    TokenRec a{{static_cast<Index>(rng.below(24)) * 4, static_cast<Index>(rng.below(24)) * 4,
                static_cast<Index>(rng.below(24)) * 4},
               0, 0};
    TokenRec b = a;
    b.origin[rng.below(3)] += 4 * static_cast<Index>(1 + rng.below(5));
    CHECK((positional_embedding(a, 4, 18) - positional_embedding(b, 4, 18)).cwiseAbs().maxCoeff() > 0.0);
  }
  CHECK_THROWS_AS(positional_embedding(fine, 4, 5), Error);
}

TEST_CASE("embedding: zero-init contract and naive oracle") {
  const auto cfg = toy_config();
  const auto vol = oracle::random_volume({8, 8, 8, cfg.frames}, 21);
  const auto layout = oracle::twelve_token_layout(cfg.frames);
  const auto p = init_params<double>(cfg, 5);

  // With the output layer at zero, scrambling the other residual-branch
  // weights cannot change a single bit.
  auto scrambled = p;
  CounterRng rng(9);
  for (int slot : {scrambled.layout->grid_agg.weight, scrambled.layout->zero_fc1.weight})
    for (Index i = 0; i < scrambled.vec(slot).size(); ++i)
      scrambled.vec(slot)[i] = rng.uniform(-5.0, 5.0);
  for (const auto &tok : layout.tokens) {
    const auto v = extract_token_voxels(vol, tok, cfg.base_edge).matrix().eval();
    const auto z = embed_token(p, tok, v);
    CHECK(z == embed_token(scrambled, tok, v));
    Eigen::VectorXd pooled = Eigen::Map<const Eigen::VectorXd>(
        oracle::pooled_block(vol, tok.origin[0], tok.origin[1], tok.origin[2], cfg.edge(tok.scale),
                             cfg.edge(tok.scale) / cfg.base_edge)
            .data(),
        cfg.token_length(0));
    const Eigen::VectorXd single = p.mat(p.layout->phi.weight) * pooled + p.vec(p.layout->phi.bias) +
                                   positional_embedding(tok, cfg.base_edge, cfg.embed_dim);
    CHECK((z - single).cwiseAbs().maxCoeff() < 1e-12);
  }

  // phi as a zero map with bias b on a fine token gives b + p.
  auto zero_phi = p;
  zero_phi.vec(p.layout->phi.weight).setZero();
  const auto &fine = layout.tokens[4];
  const auto zf = embed_token(zero_phi, fine, extract_token_voxels(vol, fine, 2).matrix().eval());
  CHECK((zf - (col(p.vec(p.layout->phi.bias)) + positional_embedding(fine, 2, cfg.embed_dim))).norm() < 1e-14);

  auto live = p;
  wake_zero_mlp(live, 77);
  for (const auto &tok : layout.tokens) {
    const auto z = embed_token(live, tok, extract_token_voxels(vol, tok, cfg.base_edge).matrix().eval());
    const auto ref = oracle::naive_embedding(live, vol, tok);
    for (Index i = 0; i < cfg.embed_dim; ++i)
      CHECK(z[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-10));
  }

  CHECK_THROWS_AS(embed_token(live, fine, Eigen::VectorXd::Zero(3)), Error);
}

TEST_CASE("embedding: hierarchical aggregation over three scales") {
  auto cfg = toy_config();
  cfg.num_scales = 3;
  const auto vol = oracle::random_volume({8, 8, 8, cfg.frames}, 31);
  auto p = init_params<double>(cfg, 6);
  wake_zero_mlp(p, 8);
  for (const TokenRec &tok : {TokenRec{{0, 0, 0}, 2, 0}, TokenRec{{4, 0, 4}, 1, 0}, TokenRec{{2, 6, 4}, 0, 0}}) {
    const auto z = embed_token(p, tok, extract_token_voxels(vol, tok, cfg.base_edge).matrix().eval());
    const auto ref = oracle::naive_embedding(p, vol, tok);
    for (Index i = 0; i < cfg.embed_dim; ++i)
      CHECK(z[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-10));
  }
}

TEST_CASE("encoder") {
  const auto cfg = toy_config();
  const auto p = init_params<double>(cfg, 12);
  CounterRng rng(4);
  Mat<double> x(cfg.embed_dim, 7);
  for (Index i = 0; i < x.size(); ++i)
    x.data()[i] = rng.normal();

  auto shallow = cfg;
  shallow.enc_depth = 0;
  CHECK(encoder_forward(init_params<double>(shallow, 1), x) == x);
  CHECK_THROWS_AS(encoder_forward(p, Mat<double>(cfg.embed_dim, 0)), Error);

  SUBCASE("single token: attention reduces to the value path") {
    auto one = cfg;
    one.enc_depth = 1;
    const auto q = init_params<double>(one, 2);
    const auto &b = q.layout->enc[0];
    const Eigen::VectorXd x0 = x.col(0);
    auto ln = [](const Eigen::VectorXd &v, const Eigen::VectorXd &g, const Eigen::VectorXd &beta) {
      const double m = v.mean();
      const double var = (v.array() - m).square().mean();
      return Eigen::VectorXd(((v.array() - m) / std::sqrt(var + 1e-5)) * g.array() + beta.array());
    };
    const Index C = one.embed_dim;
    const Eigen::VectorXd n1 = ln(x0, q.vec(b.ln1.gamma), q.vec(b.ln1.beta));
    const Eigen::VectorXd value =
        q.mat(b.qkv.weight).middleRows(2 * C, C) * n1 + q.vec(b.qkv.bias).segment(2 * C, C);
    const Eigen::VectorXd mid = x0 + q.mat(b.proj.weight) * value + col(q.vec(b.proj.bias));
    const Eigen::VectorXd n2 = ln(mid, q.vec(b.ln2.gamma), q.vec(b.ln2.beta));
    Eigen::VectorXd h = q.mat(b.fc1.weight) * n2 + col(q.vec(b.fc1.bias));
    h = h.unaryExpr([](double v) { return oracle::gelu(v); });
    const Eigen::VectorXd expect = mid + q.mat(b.fc2.weight) * h + col(q.vec(b.fc2.bias));
    CHECK((encoder_forward(q, Mat<double>(x0)).col(0) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("permutation equivariance") {
    const std::vector<Index> perm{3, 0, 6, 1, 5, 2, 4};
    Mat<double> xp(x.rows(), x.cols());
    for (Index j = 0; j < x.cols(); ++j)
      xp.col(j) = x.col(perm[static_cast<std::size_t>(j)]);
    const auto y = encoder_forward(p, x);
    const auto yp = encoder_forward(p, xp);
    double worst = 0.0;
    for (Index j = 0; j < x.cols(); ++j)
      worst = std::max(worst, (yp.col(j) - y.col(perm[static_cast<std::size_t>(j)])).cwiseAbs().maxCoeff());
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("decoder inputs") {
  const auto cfg = toy_config();
  auto p = init_params<double>(cfg, 13);
  const auto layout = oracle::twelve_token_layout(cfg.frames);
  const auto &L = *p.layout;
  const Index N = layout.size();
  CounterRng rng(5);

  auto pos = [&](Index i) { return positional_embedding(layout.tokens[static_cast<std::size_t>(i)], 2, cfg.dec_dim); };

  SUBCASE("nothing masked") {
    const auto plan = sample_mask(layout, 0.0, 1);
    Mat<double> lat = Mat<double>::Random(cfg.dec_dim, N);
    const auto u = decoder_inputs(p, lat, layout, plan);
    for (Index i = 0; i < N; ++i) {
      const Eigen::VectorXd h =
          u.col(i) - pos(i) - p.mat(L.scale_table).row(layout.tokens[static_cast<std::size_t>(i)].scale).transpose();
      CHECK((h - col(p.vec(L.mask_token))).norm() > 1e-3);
      CHECK((h - lat.col(i)).norm() < 1e-12);
    }
  }
  SUBCASE("everything masked with a zero scale table") {
    p.mat(L.scale_table).setZero();
    const auto plan = sample_mask(layout, 1.0, 1);
    const auto u = decoder_inputs(p, Mat<double>(cfg.dec_dim, 0), layout, plan);
    for (Index i = 0; i < N; ++i)
      CHECK((u.col(i) - pos(i) - col(p.vec(L.mask_token))).norm() < 1e-14);
  }
  SUBCASE("mixed plan matches a naive scatter") {
    for (Index i = 0; i < p.vec(L.scale_table).size(); ++i)
      p.vec(L.scale_table)[i] = rng.normal();
    const auto plan = explicit_plan(N, {0, 2, 5, 6, 11});
    const Index nv = N - 5;
    Mat<double> lat(cfg.dec_dim, nv);
    for (Index i = 0; i < lat.size(); ++i)
      lat.data()[i] = rng.normal();
    const auto u = decoder_inputs(p, lat, layout, plan);
    Index k = 0;
    for (Index i = 0; i < N; ++i) {
      const int s = layout.tokens[static_cast<std::size_t>(i)].scale;
      const auto pe = pos(i);
      for (Index r = 0; r < cfg.dec_dim; ++r) {
        const double base = plan.masked[static_cast<std::size_t>(i)] ? p.vec(L.mask_token)[r] : lat(r, k);
        CHECK(u(r, i) == doctest::Approx(base + pe[r] + p.mat(L.scale_table)(s, r)).epsilon(1e-14));
      }
      if (!plan.masked[static_cast<std::size_t>(i)])
        ++k;
    }
    CHECK_THROWS_AS(decoder_inputs(p, Mat<double>(cfg.dec_dim, nv + 1), layout, plan), Error);
  }
}

TEST_CASE("reconstruction heads") {
  auto cfg = toy_config();
  cfg.base_edge = 4;
  cfg.frames = 3;
  auto p = init_params<double>(cfg, 14);
  TokenLayout layout;
  layout.base_edge = 4;
  layout.num_scales = 2;
  layout.tokens = {TokenRec{{0, 0, 0}, 1, 0}, TokenRec{{8, 0, 0}, 0, 1}, TokenRec{{12, 0, 0}, 0, 2}};
  Mat<double> decoded = Mat<double>::Random(cfg.dec_dim, 3);

  const auto pred = reconstruct(p, decoded, layout);
  CHECK(pred[0].size() == 3 * 512);
  CHECK(pred[1].size() == 3 * 64);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto &h = p.layout->heads[static_cast<std::size_t>(layout.tokens[i].scale)];
    std::vector<double> in(decoded.col(static_cast<Index>(i)).data(),
                           decoded.col(static_cast<Index>(i)).data() + cfg.dec_dim);
    const auto ref = oracle::affine(p, h, in);
    for (Index k = 0; k < pred[i].size(); ++k)
      CHECK(pred[i][k] == doctest::Approx(ref[static_cast<std::size_t>(k)]).epsilon(1e-12));
  }
  for (const auto &h : p.layout->heads) {
    p.vec(h.weight).setZero();
    p.vec(h.bias).setZero();
  }
  for (const auto &v : reconstruct(p, decoded, layout))
    CHECK(v.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("scale-aware loss") {
  TokenLayout layout;
  layout.base_edge = 2;
  layout.num_scales = 2;
  layout.tokens = {TokenRec{{0, 0, 0}, 1, 0}, TokenRec{{4, 0, 0}, 1, 1}, TokenRec{{0, 0, 4}, 0, 2},
                   TokenRec{{2, 0, 4}, 0, 3}, TokenRec{{0, 2, 4}, 0, 4}};
  const Index T = 3;
  CounterRng rng(17);
  std::vector<Eigen::VectorXd> targets;
  std::vector<Vec<double>> pred;
  for (const auto &t : layout.tokens) {
    const Index len = T * layout.voxel_volume(t.scale);
    Eigen::VectorXd y(len), q(len);
    for (Index k = 0; k < len; ++k) {
      y[k] = rng.normal();
      q[k] = rng.normal();
    }
    targets.push_back(y);
    pred.push_back(q);
  }

  SUBCASE("perfect predictions") {
    const auto same = std::vector<Vec<double>>(targets.begin(), targets.end());
    CHECK(scale_aware_loss(same, targets, layout, explicit_plan(5, {0, 2, 3}), false).total == 0.0);
  }
  SUBCASE("scale balance") {
    const double eps = 0.09;
    std::vector<Vec<double>> off;
    for (const auto &y : targets)
      off.push_back((y.array() + std::sqrt(eps)).matrix());
    const auto r = scale_aware_loss(off, targets, layout, explicit_plan(5, {1, 4}), false);
    CHECK(r.per_scale[0] == doctest::Approx(T * eps).epsilon(1e-12));
    CHECK(r.per_scale[1] == doctest::Approx(T * eps).epsilon(1e-12));
    CHECK(r.total == doctest::Approx(2 * T * eps).epsilon(1e-12));
    // More masked tokens at one scale leave the balance unchanged.
    const auto r2 = scale_aware_loss(off, targets, layout, explicit_plan(5, {1, 2, 3, 4}), false);
    CHECK(r2.per_scale[0] == doctest::Approx(T * eps).epsilon(1e-12));
  }
  SUBCASE("naive loop, additivity and counts") {
    const auto plan = explicit_plan(5, {0, 2, 4});
    const auto r = scale_aware_loss(pred, targets, layout, plan, false);
    const std::vector<Eigen::VectorXd> pd(pred.begin(), pred.end());
    const auto ref = oracle::naive_scale_loss(pd, targets, layout, plan.masked);
    CHECK(r.per_scale[0] == doctest::Approx(ref[0]).epsilon(1e-6));
    CHECK(r.per_scale[1] == doctest::Approx(ref[1]).epsilon(1e-6));
    CHECK(r.total == doctest::Approx(r.per_scale[0] + r.per_scale[1]).epsilon(1e-6));
    CHECK(r.masked_counts == std::vector<Index>{2, 1});
    CHECK(r.voxel_volumes == std::vector<Index>{8, 64});
    CHECK(r.total >= 0.0);
  }
  SUBCASE("empty scale is skipped") {
    const auto r = scale_aware_loss(pred, targets, layout, explicit_plan(5, {2}), false);
    CHECK(r.per_scale[1] == 0.0);
    CHECK(r.masked_counts[1] == 0);
  }
  SUBCASE("patch norm with a constant target") {
    auto flat = targets;
    flat[2].setConstant(4.0);
    const auto r = scale_aware_loss(pred, flat, layout, explicit_plan(5, {2}), true);
    CHECK(std::isfinite(r.total));
    CHECK(patch_normalize(flat[2]).cwiseAbs().maxCoeff() == 0.0);
    const auto z = patch_normalize(targets[0]);
    CHECK(std::abs(z.mean()) < 1e-12);
    CHECK(z.array().square().mean() == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("shape errors") {
    auto bad = pred;
    bad[0].resize(3);
    CHECK_THROWS_AS(scale_aware_loss(bad, targets, layout, explicit_plan(5, {0}), false), Error);
    CHECK_THROWS_AS(scale_aware_loss(pred, targets, layout, explicit_plan(4, {0}), false), Error);
  }
}

TEST_CASE("forward loss") {
  const auto cfg = toy_config();
  const auto tokens = toy_tokens(cfg, 41);
  const auto plan = explicit_plan(12, {1, 3, 4, 7, 9, 10});

  SUBCASE("constant predictor on a constant volume") {
    auto zero = cfg;
    zero.enc_depth = 0;
    zero.dec_depth = 0;
    auto p = init_params<float>(zero, 2);
    for (const auto &h : p.layout->heads) {
      p.vec(h.weight).setZero();
      p.vec(h.bias).setConstant(0.625f);
    }
    const auto flat = make_token_set(Volume4D({8, 8, 8, zero.frames}, 0.625), tokens.layout);
    CHECK(forward_loss(p, flat, plan).total == 0.0);
  }
  SUBCASE("bit-identical reruns") {
    const auto p = init_params<float>(cfg, 8);
    const auto a = forward_loss(p, tokens, plan);
    const auto b = forward_loss(p, tokens, plan);
    CHECK(a.total == b.total);
    CHECK(a.per_scale == b.per_scale);
    CHECK(a.total > 0.0);
  }
  SUBCASE("trace agrees with the staged API") {
    auto p = init_params<double>(cfg, 8);
    wake_zero_mlp(p, 3);
    ForwardTrace<double> tr;
    const auto r = forward_loss(p, tokens, plan, &tr);
    const auto visible = plan.visible_indices();
    Mat<double> x(cfg.embed_dim, static_cast<Index>(visible.size()));
    for (std::size_t j = 0; j < visible.size(); ++j) {
      const auto id = static_cast<std::size_t>(visible[j]);
      x.col(static_cast<Index>(j)) = embed_token(p, tokens.layout.tokens[id], tokens.voxels[id]);
    }
    const auto &L = *p.layout;
    const Mat<double> proj =
        layers::linear<double>(p.mat(L.enc_to_dec.weight), p.vec(L.enc_to_dec.bias), encoder_forward(p, x));
    const auto dec = decoder_forward(p, decoder_inputs(p, proj, tokens.layout, plan));
    const auto ref = scale_aware_loss(reconstruct(p, dec, tokens.layout), tokens.voxels, tokens.layout, plan, false);
    CHECK(r.total == doctest::Approx(ref.total).epsilon(1e-12));
    CHECK(r.per_scale[0] == doctest::Approx(ref.per_scale[0]).epsilon(1e-12));
  }
  SUBCASE("fully masked plan") {
    const auto p = init_params<float>(cfg, 8);
    CHECK_THROWS_AS(forward_loss(p, tokens, sample_mask(12, 1.0, 0)), Error);
  }
}

TEST_CASE("analytic gradients match central differences") {
  for (bool patch_norm : {false, true}) {
    CAPTURE(patch_norm);
    auto cfg = toy_config();
    cfg.patch_norm_targets = patch_norm;
    const auto tokens = toy_tokens(cfg, 42);
    const auto plan = explicit_plan(12, {0, 2, 5, 6, 8, 11});
    auto p = init_params<double>(cfg, 19);
    wake_zero_mlp(p, 23);

    ForwardTrace<double> tr;
    forward_loss(p, tokens, plan, &tr);
    auto g = p.zeros_like();
    backward(p, tokens, tr, g);

    auto q = p;
    const auto f = [&](const Eigen::VectorXd &theta) {
      q.values = theta;
      return forward_loss(q, tokens, plan).total;
    };
    const double worst = oracle::max_relative_gradient_error(f, p.values, g.values);
    MESSAGE("worst relative error " << worst);
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("gradient special cases") {
  const auto cfg = toy_config();
  const auto plan = explicit_plan(12, {0, 5, 6, 9});

  SUBCASE("zero targets and zero heads give zero head gradients") {
    const auto tokens = make_token_set(Volume4D({8, 8, 8, cfg.frames}, 0.0), oracle::twelve_token_layout(cfg.frames));
    auto p = init_params<double>(cfg, 4);
    for (const auto &h : p.layout->heads) {
      p.vec(h.weight).setZero();
      p.vec(h.bias).setZero();
    }
    ForwardTrace<double> tr;
    CHECK(forward_loss(p, tokens, plan, &tr).total == 0.0);
    auto g = p.zeros_like();
    backward(p, tokens, tr, g);
    for (const auto &h : p.layout->heads) {
      CHECK(g.vec(h.weight).cwiseAbs().maxCoeff() == 0.0);
      CHECK(g.vec(h.bias).cwiseAbs().maxCoeff() == 0.0);
    }
  }
  SUBCASE("ZeroMLP output layer has a live gradient at init") {
    const auto tokens = toy_tokens(cfg, 43);
    const auto p = init_params<double>(cfg, 4);
    ForwardTrace<double> tr;
    forward_loss(p, tokens, plan, &tr);
    auto g = p.zeros_like();
    backward(p, tokens, tr, g);
    CHECK(g.vec(p.layout->zero_fc2.weight).cwiseAbs().maxCoeff() > 1e-8);
    CHECK(g.vec(p.layout->zero_fc2.bias).cwiseAbs().maxCoeff() > 1e-8);
    // Upstream of the zero layer nothing flows yet.
    CHECK(g.vec(p.layout->zero_fc1.weight).cwiseAbs().maxCoeff() == 0.0);
    CHECK(g.vec(p.layout->grid_agg.weight).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("float and double gradients agree") {
    const auto tokens = toy_tokens(cfg, 44);
    auto pd = init_params<double>(cfg, 4);
    wake_zero_mlp(pd, 1);
    pd.values = pd.values.cast<float>().cast<double>();
    const auto pf = pd.cast<float>();
    ForwardTrace<double> trd;
    ForwardTrace<float> trf;
    forward_loss(pd, tokens, plan, &trd);
    forward_loss(pf, tokens, plan, &trf);
    auto gd = pd.zeros_like();
    auto gf = pf.zeros_like();
    backward(pd, tokens, trd, gd);
    backward(pf, tokens, trf, gf);
    CHECK((gf.values.cast<double>() - gd.values).cwiseAbs().maxCoeff() < 1e-3 * (1.0 + gd.values.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = oracle::temp_dir("checkpoint");
  auto p = init_params<float>(toy_config(), 6);
  wake_zero_mlp(p, 2);
  const auto path = dir / "model.ckpt";
  save_checkpoint(path, p);
  const auto q = load_checkpoint(path);
  CHECK(q.config == p.config);
  CHECK(q.values == p.values);

  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  CHECK(static_cast<unsigned char>(bytes[0]) == kCheckpointVersion);
  auto write = [&](const std::string &b) {
    std::ofstream f(dir / "bad.ckpt", std::ios::binary);
    f.write(b.data(), static_cast<std::streamsize>(b.size()));
  };
  auto flipped = bytes;
  flipped[0] = 9;
  write(flipped);
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
  write(bytes.substr(0, bytes.size() - 4));
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), Error);
}
