#include <gtest/gtest.h>

#include "support.hpp"

using namespace smcd;
using namespace smcd::test;

TEST(MakeSchedule, SingleStep) {
  const auto s = make_schedule(1, 0.1, 0.1);
  ASSERT_EQ(s.betas.size(), 1u);
  EXPECT_DOUBLE_EQ(s.betas[0], 0.1);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 0.9);
}

TEST(MakeSchedule, LinearEndpointsInclusive) {
  const auto s = make_schedule(4, 0.1, 0.2);
  const double expect[] = {0.1, 0.1 + 0.1 / 3, 0.1 + 0.2 / 3, 0.2};
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(s.betas[t], expect[t], 1e-15);
  EXPECT_NEAR(s.alpha_bars[3], 0.9 * (1 - expect[1]) * (1 - expect[2]) * 0.8, 1e-15);
  EXPECT_NEAR(s.alpha_bars[3], 0.5200, 5e-5);
}

TEST(MakeSchedule, RejectsBadInputs) {
  EXPECT_THROW(make_schedule(0, 0.1, 0.2), ConfigError);
  EXPECT_THROW(make_schedule(4, 0.0, 0.2), ConfigError);
  EXPECT_THROW(make_schedule(4, 0.3, 0.2), ConfigError);
  EXPECT_THROW(make_schedule(4, 0.1, 1.0), ConfigError);
}

TEST(MakeSchedule, InvariantsHoldForRandomValidInputs) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = rng.uniform_int(1, 300);
    double a = rng.uniform(1e-6, 0.5), b = rng.uniform(1e-6, 0.5);
    if (a > b) std::swap(a, b);
    const auto s = make_schedule(T, a, b);
    const auto again = make_schedule(T, a, b);
    EXPECT_EQ(s.betas, again.betas);
    EXPECT_EQ(s.alpha_bars, again.alpha_bars);
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
      EXPECT_GT(s.betas[t], 0.0);
      EXPECT_LT(s.betas[t], 1.0);
      EXPECT_EQ(s.alphas[t], 1.0 - s.betas[t]);
      prod *= s.alphas[t];
      EXPECT_NEAR(s.alpha_bars[t], prod, 1e-12 * prod);
      if (t > 0) {
        EXPECT_GE(s.betas[t], s.betas[t - 1]);
        EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
        EXPECT_LT(s.snr(t), s.snr(t - 1));
      }
    }
  }
}

TEST(QSample, ZeroNoiseScalesSignal) {
  const auto s = make_schedule(10, 0.01, 0.2);
  Rng rng(1);
  const auto z0 = randn<double>(rng, {2, 3});
  const auto out = q_sample(z0, 6, Tensor<double>(Shape{2, 3}), s);
  for (std::size_t i = 0; i < z0.size(); ++i) EXPECT_DOUBLE_EQ(out[i], std::sqrt(s.alpha_bars[6]) * z0[i]);
}

TEST(QSample, IdentityScheduleReturnsInput) {
  const auto s = NoiseSchedule::from_betas({0.0, 0.0});
  Rng rng(2);
  const auto z0 = randn<double>(rng, {5});
  EXPECT_EQ(q_sample(z0, 1, randn<double>(rng, {5}), s), z0);
}

TEST(QSample, ScalarHandValue) {
  // betas chosen so that alpha_bar_1 = 0.25
  const auto s = NoiseSchedule::from_betas({0.5, 0.5});
  const auto out = q_sample(Tensor<double>::scalar(2.0), 1, Tensor<double>::scalar(1.0), s);
  EXPECT_NEAR(out[0], 0.5 * 2.0 + std::sqrt(0.75), 1e-15);
  EXPECT_NEAR(out[0], 1.8660, 5e-5);
}

TEST(QSample, ShapeMismatchIsContractViolation) {
  const auto s = make_schedule(4, 0.1, 0.2);
  EXPECT_THROW(q_sample(Tensor<double>(Shape{2}), 0, Tensor<double>(Shape{3}), s), ContractViolation);
  EXPECT_THROW(q_sample(Tensor<double>(Shape{2}), 4, Tensor<double>(Shape{2}), s), ContractViolation);
}

TEST(DdpmStep, FinalStepIgnoresNoise) {
  const auto s = make_schedule(10, 0.01, 0.2);
  Rng rng(3);
  const auto z = randn<double>(rng, {4}), e = randn<double>(rng, {4});
  EXPECT_EQ(ddpm_step(z, e, 0, randn<double>(rng, {4}), s), ddpm_step(z, e, 0, randn<double>(rng, {4}), s));
}

TEST(DdpmStep, PosteriorMeanMatchesScalarOracle) {
  const auto s = make_schedule(50, 1e-3, 0.1);
  Rng rng(4);
  for (int t : {0, 1, 17, 49}) {
    const auto z0 = randn<double>(rng, {6}), eps = randn<double>(rng, {6});
    const auto zt = q_sample(z0, t, eps, s);
    const auto out = ddpm_step(zt, eps, t, Tensor<double>(Shape{6}), s);
    for (std::size_t i = 0; i < 6; ++i) {
      const double a = 1 - s.betas[t];
      const double oracle = (zt[i] - s.betas[t] / std::sqrt(1 - s.alpha_bars[t]) * eps[i]) / std::sqrt(a);
      EXPECT_NEAR(out[i], oracle, 1e-12);
    }
  }
}

TEST(DdpmStep, NoiseScaledBySqrtBeta) {
  const auto s = make_schedule(10, 0.01, 0.2);
  const Tensor<double> z(Shape{1}, 0.7), e(Shape{1}, 0.2);
  const double with = ddpm_step(z, e, 5, Tensor<double>::scalar(1.0), s)[0];
  const double without = ddpm_step(z, e, 5, Tensor<double>::scalar(0.0), s)[0];
  EXPECT_NEAR(with - without, std::sqrt(s.betas[5]), 1e-12);
}

TEST(DdpmStep, ZeroBetaIsNoOp) {
  const auto s = NoiseSchedule::from_betas({0.1, 0.0});
  Rng rng(5);
  const auto z = randn<double>(rng, {4});
  EXPECT_EQ(ddpm_step(z, randn<double>(rng, {4}), 1, randn<double>(rng, {4}), s), z);
}

TEST(DdpmStepClipped, MatchesPlainStepInsideRange) {
  const auto s = make_schedule(50, 1e-3, 0.1);
  Rng rng(7);
  for (int t : {0, 1, 17, 49}) {
    const auto z0 = randn<double>(rng, {8});
    Tensor<double> x0(Shape{8});
    for (std::size_t i = 0; i < 8; ++i) x0[i] = std::tanh(z0[i]);  // inside [-1, 1]
    const auto eps = randn<double>(rng, {8}), noise = randn<double>(rng, {8});
    const auto zt = q_sample(x0, t, eps, s);
    const auto a = ddpm_step(zt, eps, t, noise, s), b = ddpm_step_clipped(zt, eps, t, noise, s);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(a[i], b[i], 1e-10) << t;
  }
}

TEST(DdpmStepClipped, ClampedScalarOracle) {
  // betas 0.1, 0.2: abar = 0.9, 0.72. At t = 1 with z = 3, eps = -1:
  // x0 = (3 + sqrt(0.28)) / sqrt(0.72) > 1, so x0 -> 1.
  const auto s = NoiseSchedule::from_betas({0.1, 0.2});
  const auto out = ddpm_step_clipped(Tensor<double>::scalar(3.0), Tensor<double>::scalar(-1.0), 1,
                                     Tensor<double>::scalar(0.5), s);
  const double c0 = std::sqrt(0.9) * 0.2 / 0.28, ct = std::sqrt(0.8) * 0.1 / 0.28;
  EXPECT_NEAR(out[0], c0 * 1.0 + ct * 3.0 + std::sqrt(0.2) * 0.5, 1e-12);
  // final step returns the clamped estimate itself
  const auto last = ddpm_step_clipped(Tensor<double>::scalar(-5.0), Tensor<double>::scalar(0.0), 0,
                                      Tensor<double>::scalar(9.0), s);
  EXPECT_DOUBLE_EQ(last[0], -1.0);
}

TEST(DdpmStepClipped, OutputBoundedByClampedEstimate) {
  const auto s = make_schedule(20, 1e-3, 0.2);
  Rng rng(8);
  for (int rep = 0; rep < 200; ++rep) {
    const int t = static_cast<int>(rng.uniform_int(0, 19));
    const auto z = randn<double>(rng, {1}), e = randn<double>(rng, {1});
    const double abar_prev = t == 0 ? 1.0 : s.alpha_bars[t - 1];
    const double ct = std::sqrt(s.alphas[t]) * (1 - abar_prev) / (1 - s.alpha_bars[t]);
    const double c0 = std::sqrt(abar_prev) * s.betas[t] / (1 - s.alpha_bars[t]);
    const double mean = ddpm_step_clipped(z, e, t, Tensor<double>::scalar(0.0), s)[0];
    EXPECT_LE(std::abs(mean - ct * z[0]), c0 + 1e-12);
  }
}

TEST(QSample, MonteCarloMoments) {
  const auto s = make_schedule(100, 1e-3, 0.2);
  Rng rng(6);
  const int n = 10000;
  for (int t : {1, 50, 99}) {
    const double z0 = 1.3;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
      const double v = q_sample(Tensor<double>::scalar(z0), t, Tensor<double>::scalar(rng.normal()), s)[0];
      sum += v, sq += v * v;
    }
    const double mean = sum / n, var = sq / n - mean * mean;
    const double expect_var = 1 - s.alpha_bars[t];
    EXPECT_LT(std::abs(mean - std::sqrt(s.alpha_bars[t]) * z0), 4 * std::sqrt(expect_var / n));
    EXPECT_LT(std::abs(var / expect_var - 1), 0.05);
  }
}

TEST(Respace, KeepsCumulativeProducts) {
  const auto s = make_schedule(100, 1e-3, 0.2);
  const auto r = respace(s, 10);
  ASSERT_EQ(r.timesteps.size(), 10u);
  EXPECT_EQ(r.timesteps.front(), 0);
  EXPECT_EQ(r.timesteps.back(), 99);
  for (std::size_t i = 0; i < r.timesteps.size(); ++i) {
    if (i) EXPECT_GT(r.timesteps[i], r.timesteps[i - 1]);
    EXPECT_NEAR(r.schedule.alpha_bars[i], s.alpha_bars[static_cast<std::size_t>(r.timesteps[i])], 1e-12);
  }
  EXPECT_EQ(respace(s, 100).schedule.betas, s.betas);
  EXPECT_THROW(respace(s, 101), ConfigError);
}

TEST(DefaultSchedule, EndsNearPureNoise) {
  const auto s = ScheduleConfig{}.build();
  EXPECT_EQ(s.T, 100);
  EXPECT_LT(s.alpha_bars.back(), 1e-3);
}
