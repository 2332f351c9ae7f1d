#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"

using namespace smcd;
using namespace smcd::test;

namespace {

using D = double;

constexpr double kGoldenSum = 12.9817734;
constexpr double kGoldenMax = 2.31310225;

ParamSpecs attention_specs(const std::string& p, int c, int ckv) {
  ParamSpecs s;
  layers::declare_norm(s, p + ".norm", c, Group::spatial_attn);
  layers::declare_attention(s, p, c, ckv, Group::spatial_attn);
  return s;
}

template <typename Fn>
Tensor<D> run(const ParameterStore<D>& st, Fn&& fn) {
  Graph<D> g(false);
  ParamBinder<D> pb(g, st);
  return fn(pb, g).value();
}

Tensor<D> permute_rows(const Tensor<D>& t, const std::vector<int>& perm) {
  Tensor<D> out(t.shape());
  const int b = t.dim(0), l = t.dim(1), c = t.dim(2);
  for (int bi = 0; bi < b; ++bi)
    for (int i = 0; i < l; ++i)
      for (int j = 0; j < c; ++j) out.at({bi, i, j}) = t.at({bi, perm[i], j});
  return out;
}

Tensor<D> permute_batch(const Tensor<D>& t, const std::vector<int>& perm) {
  Tensor<D> out(t.shape());
  const std::size_t per = t.size() / static_cast<std::size_t>(t.dim(0));
  for (int i = 0; i < t.dim(0); ++i) std::copy_n(t.data() + perm[i] * per, per, out.data() + i * per);
  return out;
}

}  // namespace

// ---- attention sublayers -------------------------------------------------------

TEST(SpatialSelfAttention, ZeroValueProjectionIsIdentity) {
  auto st = random_store<D>(attention_specs("s", 4, 4), 1);
  st.at("s.v.w").value.fill(0);
  st.at("s.out.b").value.fill(0);
  Rng rng(2);
  const auto z = randn<D>(rng, {2, 5, 4});
  const auto out = run(st, [&](auto& pb, auto& g) { return layers::spatial_self_attention(pb, "s", g.constant(z), 2); });
  EXPECT_EQ(out, z);
}

TEST(SpatialSelfAttention, PermutationEquivariant) {
  const auto st = random_store<D>(attention_specs("s", 4, 4), 3);
  Rng rng(4);
  const auto z = randn<D>(rng, {2, 5, 4});
  const std::vector<int> perm{3, 0, 4, 1, 2};
  auto f = [&](const Tensor<D>& x) {
    return run(st, [&](auto& pb, auto& g) { return layers::spatial_self_attention(pb, "s", g.constant(x), 2); });
  };
  EXPECT_LT(max_abs_diff(f(permute_rows(z, perm)), permute_rows(f(z), perm)), 1e-12);
}

TEST(SpatialSelfAttention, TwoTokenOracle) {
  const auto st = random_store<D>(attention_specs("s", 2, 2), 5);
  Rng rng(6);
  const auto z = randn<D>(rng, {1, 2, 2});
  const auto out = run(st, [&](auto& pb, auto& g) { return layers::spatial_self_attention(pb, "s", g.constant(z), 1); });
  const auto x = naive::rows(z, 0);
  const auto n = naive::layer_norm(x, st.at("s.norm.g").value, st.at("s.norm.b").value);
  EXPECT_LT(naive::max_diff(naive::add(x, naive::attend(st, "s", n, n, 1)), out, 0), 1e-12);
}

TEST(TextCrossAttention, ZeroValueProjectionIsIdentity) {
  auto st = random_store<D>(attention_specs("t", 4, 6), 7);
  st.at("t.v.w").value.fill(0);
  st.at("t.out.b").value.fill(0);
  Rng rng(8);
  const auto z = randn<D>(rng, {2, 3, 4});
  const auto text = randn<D>(rng, {1, 3, 6});
  const auto out = run(st, [&](auto& pb, auto& g) {
    return layers::text_cross_attention(pb, "t", g.constant(z), g.constant(text), 2);
  });
  EXPECT_EQ(out, z);
}

TEST(TextCrossAttention, SingleTokenAddsTheSameVectorEverywhere) {
  const auto st = random_store<D>(attention_specs("t", 4, 6), 9);
  Rng rng(10);
  const auto z = randn<D>(rng, {2, 3, 4});
  const auto text = randn<D>(rng, {1, 1, 6});
  const auto out = run(st, [&](auto& pb, auto& g) {
    return layers::text_cross_attention(pb, "t", g.constant(z), g.constant(text), 2);
  });
  const auto expect = naive::attend(st, "t", naive::rows(text, 0), naive::rows(text, 0), 2);
  for (int f = 0; f < 2; ++f)
    for (int i = 0; i < 3; ++i)
      for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.at({f, i, c}) - z.at({f, i, c}), expect[0][c], 1e-12);
}

TEST(TextCrossAttention, NumericOracle) {
  const auto st = random_store<D>(attention_specs("t", 4, 6), 11);
  Rng rng(12);
  const auto z = randn<D>(rng, {2, 3, 4});
  const auto text = randn<D>(rng, {1, 4, 6});
  const auto out = run(st, [&](auto& pb, auto& g) {
    return layers::text_cross_attention(pb, "t", g.constant(z), g.constant(text), 2);
  });
  for (int f = 0; f < 2; ++f) {
    const auto x = naive::rows(z, f);
    const auto n = naive::layer_norm(x, st.at("t.norm.g").value, st.at("t.norm.b").value);
    EXPECT_LT(naive::max_diff(naive::add(x, naive::attend(st, "t", n, naive::rows(text, 0), 2)), out, f), 1e-12);
  }
}

TEST(TemporalAttention, SingleFrameZeroValueIsIdentity) {
  auto st = random_store<D>(attention_specs("m", 4, 4), 13);
  st.at("m.v.w").value.fill(0);
  st.at("m.out.b").value.fill(0);
  Rng rng(14);
  const auto z = randn<D>(rng, {1, 6, 4});
  EXPECT_EQ(run(st, [&](auto& pb, auto& g) { return layers::temporal_attention(pb, "m", g.constant(z), 2); }), z);
}

TEST(TemporalAttention, SingleFrameAddsValueProjection) {
  const auto st = random_store<D>(attention_specs("m", 4, 4), 15);
  Rng rng(16);
  const auto z = randn<D>(rng, {1, 3, 4});
  const auto out = run(st, [&](auto& pb, auto& g) { return layers::temporal_attention(pb, "m", g.constant(z), 2); });
  const auto x = naive::rows(z, 0);
  const auto n = naive::layer_norm(x, st.at("m.norm.g").value, st.at("m.norm.b").value);
  const auto v = naive::matmul(naive::matmul(n, st.at("m.v.w").value), st.at("m.out.w").value, &st.at("m.out.b").value);
  EXPECT_LT(naive::max_diff(naive::add(x, v), out, 0), 1e-12);
}

TEST(TemporalAttention, FramePermutationEquivariant) {
  const auto st = random_store<D>(attention_specs("m", 4, 4), 17);
  Rng rng(18);
  const auto z = randn<D>(rng, {3, 5, 4});
  const std::vector<int> perm{2, 0, 1};
  auto f = [&](const Tensor<D>& x) {
    return run(st, [&](auto& pb, auto& g) { return layers::temporal_attention(pb, "m", g.constant(x), 2); });
  };
  EXPECT_LT(max_abs_diff(f(permute_batch(z, perm)), permute_batch(f(z), perm)), 1e-12);
}

TEST(TemporalAttention, TwoFrameOraclePerCell) {
  const auto st = random_store<D>(attention_specs("m", 2, 2), 19);
  Rng rng(20);
  const auto z = randn<D>(rng, {2, 3, 2});
  const auto out = run(st, [&](auto& pb, auto& g) { return layers::temporal_attention(pb, "m", g.constant(z), 1); });
  for (int cell = 0; cell < 3; ++cell) {
    naive::Mat x{{z.at({0, cell, 0}), z.at({0, cell, 1})}, {z.at({1, cell, 0}), z.at({1, cell, 1})}};
    const auto n = naive::layer_norm(x, st.at("m.norm.g").value, st.at("m.norm.b").value);
    const auto y = naive::add(x, naive::attend(st, "m", n, n, 1));
    for (int f = 0; f < 2; ++f)
      for (int c = 0; c < 2; ++c) EXPECT_NEAR(out.at({f, cell, c}), y[f][c], 1e-12);
  }
}

// ---- whole denoiser --------------------------------------------------------------

namespace {

struct Fixture {
  DenoiserConfig cfg = micro_config();
  ParameterStore<D> base;
  ParameterStore<D> full;

  explicit Fixture(DenoiserConfig c = micro_config(), std::uint64_t seed = 1) : cfg(std::move(c)) {
    base = init_base_params<D>(cfg, seed);
    Rng rng(seed + 100);
    perturb_all(base, rng, 0.1);
    full = base;
    attach_conditioning(full, cfg, seed);
  }
};

Tensor<D> noisy_latent(const DenoiserConfig& cfg, int frames, std::uint64_t seed) {
  Rng rng(seed);
  return randn<D>(rng, {frames, cfg.latent_channels, cfg.latent_height, cfg.latent_width});
}

}  // namespace

TEST(Denoiser, GateZeroIdentity) {
  for (auto order : {LayerOrder::standard, LayerOrder::swapped}) {
    DenoiserConfig c = micro_config();
    c.order = order;
    Fixture fx(c);
    Rng rng(3);
    const auto cond = full_conditions<D>(fx.cfg, rng, fx.cfg.frames);
    const auto z = noisy_latent(fx.cfg, fx.cfg.frames, 4);
    const auto ref = predict_noise(fx.base, fx.cfg, z, 7, cond.without_image().without_boxes());
    const auto out = predict_noise(fx.full, fx.cfg, z, 7, cond);
    EXPECT_LT(rel_diff(out, ref), 1e-6);
  }
}

TEST(Denoiser, AbsentImageAndBoxesMatchBaseBitwise) {
  Fixture fx;
  Rng rng(5);
  // nonzero gates and zero conv: skipping must not depend on them
  for (auto& [name, p] : fx.full.all())
    if (p.group == Group::mim || p.group == Group::diim)
      for (auto& v : p.value.vec()) v += 0.3 * rng.normal();
  const auto cond = full_conditions<D>(fx.cfg, rng, fx.cfg.frames).without_image().without_boxes();
  const auto z = noisy_latent(fx.cfg, fx.cfg.frames, 6);
  EXPECT_EQ(predict_noise(fx.full, fx.cfg, z, 3, cond), predict_noise(fx.base, fx.cfg, z, 3, cond));
}

TEST(Denoiser, ConditioningChangesOutputOnceGatesOpen) {
  Fixture fx;
  Rng rng(7);
  perturb_all(fx.full, rng);
  const auto cond = full_conditions<D>(fx.cfg, rng, fx.cfg.frames);
  const auto z = noisy_latent(fx.cfg, fx.cfg.frames, 8);
  const auto a = predict_noise(fx.full, fx.cfg, z, 3, cond);
  EXPECT_GT(max_abs_diff(a, predict_noise(fx.full, fx.cfg, z, 3, cond.without_boxes())), 1e-6);
  EXPECT_GT(max_abs_diff(a, predict_noise(fx.full, fx.cfg, z, 3, cond.without_image())), 1e-6);
  EXPECT_GT(max_abs_diff(a, predict_noise(fx.full, fx.cfg, z, 3, cond.without_text())), 1e-6);
}

TEST(Denoiser, Deterministic) {
  Fixture fx;
  Rng rng(9);
  perturb_all(fx.full, rng);
  const auto cond = full_conditions<D>(fx.cfg, rng, fx.cfg.frames);
  const auto z = noisy_latent(fx.cfg, fx.cfg.frames, 10);
  EXPECT_EQ(predict_noise(fx.full, fx.cfg, z, 1, cond), predict_noise(fx.full, fx.cfg, z, 1, cond));
}

// Regression oracle: values recorded from the first verified build.
TEST(Denoiser, GoldenFingerprint) {
  const DenoiserConfig cfg = micro_config();
  auto params = init_base_params<float>(cfg, 1);
  attach_conditioning(params, cfg, 1);
  Rng rng(42);
  perturb_all(params, rng, 0.1);
  const auto cond = full_conditions<float>(cfg, rng, cfg.frames);
  const auto z = randn<float>(rng, {cfg.frames, cfg.latent_channels, cfg.latent_height, cfg.latent_width});
  const auto out = predict_noise(params, cfg, z, 11, cond);
  const double s = sum(out), m = max_abs(out);
  std::printf("fingerprint sum=%.9g max=%.9g\n", s, m);
  EXPECT_NEAR(s, kGoldenSum, 1e-4 * std::abs(kGoldenSum) + 1e-4);
  EXPECT_NEAR(m, kGoldenMax, 1e-4 * kGoldenMax);
}

TEST(Denoiser, ShapePreservedAcrossConfigMatrix) {
  int checked = 0;
  for (int frames : {1, 3})
    for (int levels : {1, 2, 3})
      for (int heads : {1, 2})
        for (auto order : {LayerOrder::standard, LayerOrder::swapped})
          for (auto inj : {ImageInjection::both, ImageInjection::zero_conv, ImageInjection::cross_attention}) {
            DenoiserConfig c = micro_config();
            c.frames = frames;
            c.latent_height = 8;
            c.latent_width = 4;
            c.channel_mults.assign(static_cast<std::size_t>(levels), 1);
            std::iota(c.channel_mults.begin(), c.channel_mults.end(), 1);
            c.heads = heads;
            c.order = order;
            c.image_injection = inj;
            auto params = init_base_params<float>(c, 2);
            attach_conditioning(params, c, 2);
            validate_params(params, c);
            Rng rng(static_cast<std::uint64_t>(checked));
            perturb_all(params, rng, 0.05);
            const auto cond = full_conditions<float>(c, rng, frames);
            const auto z = randn<float>(rng, {frames, c.latent_channels, 8, 4});
            const auto out = predict_noise(params, c, z, 0, cond);
            ASSERT_EQ(out.shape(), z.shape());
            for (float v : out.vec()) ASSERT_TRUE(std::isfinite(v));
            ++checked;
          }
  EXPECT_EQ(checked, 72);
}

TEST(Denoiser, AblationConfigsDeclareOnlyTheirPaths) {
  DenoiserConfig c = micro_config();
  c.image_injection = ImageInjection::zero_conv;
  auto zc = denoiser::declare_conditioning(c);
  EXPECT_TRUE(zc.count("diim.zero_conv.w"));
  EXPECT_FALSE(zc.count("down0.diim.beta"));
  c.image_injection = ImageInjection::cross_attention;
  auto gca = denoiser::declare_conditioning(c);
  EXPECT_FALSE(gca.count("diim.zero_conv.w"));
  EXPECT_TRUE(gca.count("down0.diim.beta"));
  EXPECT_TRUE(gca.count("down0.mim.gamma"));
  EXPECT_TRUE(gca.count("down0.mim.ground.fc1.w"));
  EXPECT_TRUE(gca.count("up0.mim.ground.fc1.w"));
}

TEST(Denoiser, ConfigJsonRoundTrip) {
  DenoiserConfig c = micro_config();
  c.order = LayerOrder::swapped;
  c.image_injection = ImageInjection::cross_attention;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<DenoiserConfig>(), c);
  j["layer_order"] = "sideways";
  EXPECT_THROW(j.get<DenoiserConfig>(), ValidationError);
  j["layer_order"] = "standard";
  j["image_injection"] = "ctrlnet";
  EXPECT_THROW(j.get<DenoiserConfig>(), ValidationError);
}

TEST(Denoiser, MismatchesFailLoudly) {
  Fixture fx;
  Rng rng(12);
  const auto cond = full_conditions<D>(fx.cfg, rng, fx.cfg.frames);
  const auto z = noisy_latent(fx.cfg, fx.cfg.frames, 13);
  EXPECT_THROW(predict_noise(fx.base, fx.cfg, z, 0, cond), ConfigError);
  EXPECT_THROW(predict_noise(fx.full, fx.cfg, Tensor<D>(Shape{2, 3, 8, 8}), 0, cond.without_image().without_boxes()),
               ShapeError);
  DenoiserConfig other = fx.cfg;
  other.base_channels = 16;
  EXPECT_THROW(validate_params(fx.full, other), ShapeError);
  DenoiserConfig bad = fx.cfg;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = fx.cfg;
  bad.latent_height = 5;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(attach_conditioning(fx.full, fx.cfg, 1), ConfigError);
}

TEST(Denoiser, TimestepEmbedding) {
  const auto e = timestep_embedding<double>(0, 8);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(e[i], 0.0);
    EXPECT_EQ(e[4 + i], 1.0);
  }
  const auto e5 = timestep_embedding<double>(5, 8);
  EXPECT_NEAR(e5[1], std::sin(5 * std::exp(-std::log(10000.0) / 4)), 1e-15);
}

// ---- gradient correctness --------------------------------------------------------

namespace {

struct StageCase {
  int stage;
  int frames;
  bool conditioned;
};

GradCheck stage_gradient_check(const StageCase& sc) {
  DenoiserConfig cfg = micro_config();
  Fixture fx(cfg, 21);
  ParameterStore<D> st = sc.conditioned ? fx.full : fx.base;
  Rng rng(22);
  perturb_all(st, rng, 0.2);
  st.set_trainable(freeze_policy(sc.stage));
  const auto sched = make_schedule(20, 1e-3, 0.2);

  std::vector<TrainingExample<D>> batch;
  std::vector<int> ts{4, 15};
  std::vector<Tensor<D>> eps;
  for (int b = 0; b < 2; ++b) {
    TrainingExample<D> ex;
    ex.z0 = randn<D>(rng, {sc.frames, cfg.latent_channels, cfg.latent_height, cfg.latent_width}, 0.7);
    ex.cond = full_conditions<D>(cfg, rng, sc.frames);
    if (!sc.conditioned) ex.cond = ex.cond.without_image().without_boxes();
    if (sc.stage == 1) ex.cond = ex.cond.without_image();
    if (b == 1) ex.cond = ex.cond.without_text();
    eps.push_back(randn<D>(rng, ex.z0.shape()));
    batch.push_back(std::move(ex));
  }
  const ForwardOptions opt{sc.stage != 1};
  auto loss_value = [&] {
    Graph<D> g(false);
    ParamBinder<D> pb(g, st);
    return diffusion_loss(g, batch, ts, eps, sched, denoiser_net(pb, cfg, opt)).value()[0];
  };
  Graph<D> g;
  ParamBinder<D> pb(g, st);
  g.backward(diffusion_loss(g, batch, ts, eps, sched, denoiser_net(pb, cfg, opt)));
  const auto grads = pb.gradients();
  for (const auto& [name, _] : grads) EXPECT_TRUE(st.is_trainable(st.at(name).group)) << name;
  std::size_t trainable = 0;
  for (const auto& [name, p] : st.all())
    if (st.is_trainable(p.group)) {
      ++trainable;
      EXPECT_TRUE(grads.count(name)) << "no gradient for " << name;
    }
  EXPECT_EQ(grads.size(), trainable);
  return check_gradients(st, grads, loss_value, 1e-5, 0, 1e-6);
}

}  // namespace

TEST(DenoiserGradients, Stage0AllBackboneParameters) {
  const auto r = stage_gradient_check({0, 2, false});
  std::printf("stage 0: %zu entries, worst %.3g at %s\n", r.checked, r.worst, r.where.c_str());
  EXPECT_LT(r.worst, 1e-3) << r.where;
}

TEST(DenoiserGradients, Stage1MotionModule) {
  const auto r = stage_gradient_check({1, 1, true});
  std::printf("stage 1: %zu entries, worst %.3g at %s\n", r.checked, r.worst, r.where.c_str());
  EXPECT_LT(r.worst, 1e-3) << r.where;
}

TEST(DenoiserGradients, Stage2ImageModuleAndTemporal) {
  const auto r = stage_gradient_check({2, 2, true});
  std::printf("stage 2: %zu entries, worst %.3g at %s\n", r.checked, r.worst, r.where.c_str());
  EXPECT_LT(r.worst, 1e-3) << r.where;
}
