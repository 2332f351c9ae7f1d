#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "smcd/error.hpp"
#include "smcd/tensor.hpp"

namespace smcd {

/// Variance schedule of the forward diffusion process. Timesteps are
/// zero-based: t in [0, T).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  /// Builds the derived tables from an explicit beta sequence. Accepts
  /// beta = 0 so degenerate (identity) schedules can be expressed.
  static NoiseSchedule from_betas(std::vector<double> betas) {
    SMCD_REQUIRE(!betas.empty(), ConfigError, "noise schedule needs at least one step");
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.betas = std::move(betas);
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double acc = 1.0;
    for (std::size_t t = 0; t < s.betas.size(); ++t) {
      SMCD_REQUIRE(s.betas[t] >= 0.0 && s.betas[t] < 1.0, ConfigError,
                   "beta values must lie in [0, 1)");
      s.alphas[t] = 1.0 - s.betas[t];
      acc *= s.alphas[t];
      s.alpha_bars[t] = acc;
    }
    return s;
  }

  double snr(int t) const { return alpha_bars.at(t) / (1.0 - alpha_bars.at(t)); }
};

/// Linear beta schedule with both endpoints included.
inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  SMCD_REQUIRE(T >= 1, ConfigError, "schedule step count must be >= 1");
  SMCD_REQUIRE(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, ConfigError,
               "schedule variances must satisfy 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t) / (T - 1);
    betas[t] = t == T - 1 && T > 1 ? beta_end : beta_start + (beta_end - beta_start) * frac;
  }
  return NoiseSchedule::from_betas(std::move(betas));
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  SMCD_REQUIRE(z0.shape() == eps.shape(), ContractViolation,
               "q_sample: z0 " + shape_str(z0.shape()) + " vs eps " + shape_str(eps.shape()));
  SMCD_REQUIRE(t >= 0 && t < sched.T, ContractViolation, "q_sample: timestep out of range");
  const T a = static_cast<T>(std::sqrt(sched.alpha_bars[t]));
  const T b = static_cast<T>(std::sqrt(1.0 - sched.alpha_bars[t]));
  Tensor<T> out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

/// One ancestral reverse step with fixed variance sigma_t^2 = beta_t. No
/// noise is added at t = 0.
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, const Tensor<T>& noise,
                    const NoiseSchedule& sched) {
  SMCD_REQUIRE(z_t.shape() == eps_pred.shape(), ContractViolation, "ddpm_step: eps shape mismatch");
  SMCD_REQUIRE(t >= 0 && t < sched.T, ContractViolation, "ddpm_step: timestep out of range");
  const double beta = sched.betas[t];
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alphas[t]);
  const double eps_coef = beta == 0.0 ? 0.0 : beta / std::sqrt(1.0 - sched.alpha_bars[t]);
  const bool add_noise = t > 0 && beta > 0.0;
  if (add_noise)
    SMCD_REQUIRE(noise.shape() == z_t.shape(), ContractViolation, "ddpm_step: noise shape mismatch");
  const double sigma = std::sqrt(beta);
  Tensor<T> out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = inv_sqrt_alpha * (static_cast<double>(z_t[i]) - eps_coef * static_cast<double>(eps_pred[i]));
    if (add_noise) v += sigma * static_cast<double>(noise[i]);
    out[i] = static_cast<T>(v);
  }
  return out;
}

/// The same step written through the predicted clean latent
/// x0 = (z_t - sqrt(1 - abar_t) eps) / sqrt(abar_t), clamped to [lo, hi]
/// before forming the posterior mean. Without clamping it equals ddpm_step.
template <typename T>
Tensor<T> ddpm_step_clipped(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, const Tensor<T>& noise,
                            const NoiseSchedule& sched, double lo = -1.0, double hi = 1.0) {
  SMCD_REQUIRE(z_t.shape() == eps_pred.shape(), ContractViolation, "ddpm_step: eps shape mismatch");
  SMCD_REQUIRE(t >= 0 && t < sched.T, ContractViolation, "ddpm_step: timestep out of range");
  SMCD_REQUIRE(lo < hi, ContractViolation, "ddpm_step: empty clip range");
  const double beta = sched.betas[t];
  if (beta == 0.0) return z_t;
  const double abar = sched.alpha_bars[t];
  const double abar_prev = t == 0 ? 1.0 : sched.alpha_bars[t - 1];
  const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
  const double ct = std::sqrt(sched.alphas[t]) * (1.0 - abar_prev) / (1.0 - abar);
  const double ra = 1.0 / std::sqrt(abar), rb = std::sqrt(1.0 - abar);
  const bool add_noise = t > 0;
  if (add_noise)
    SMCD_REQUIRE(noise.shape() == z_t.shape(), ContractViolation, "ddpm_step: noise shape mismatch");
  const double sigma = std::sqrt(beta);
  Tensor<T> out(z_t.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double z = z_t[i];
    const double x0 = std::clamp(ra * (z - rb * static_cast<double>(eps_pred[i])), lo, hi);
    double v = c0 * x0 + ct * z;
    if (add_noise) v += sigma * static_cast<double>(noise[i]);
    out[i] = static_cast<T>(v);
  }
  return out;
}

/// A shortened schedule over evenly spaced original timesteps, with betas
/// re-derived so the cumulative products match the original at each kept
/// step.
struct RespacedSchedule {
  NoiseSchedule schedule;
  std::vector<int> timesteps;  // original index for each respaced step
};

inline RespacedSchedule respace(const NoiseSchedule& sched, int steps) {
  SMCD_REQUIRE(steps >= 1 && steps <= sched.T, ConfigError,
               "sampling steps must be in [1, T]");
  RespacedSchedule out;
  if (steps == sched.T) {
    out.schedule = sched;
    out.timesteps.resize(static_cast<std::size_t>(sched.T));
    for (int t = 0; t < sched.T; ++t) out.timesteps[t] = t;
    return out;
  }
  for (int i = 0; i < steps; ++i) {
    const double pos = steps == 1 ? sched.T - 1 : static_cast<double>(i) * (sched.T - 1) / (steps - 1);
    out.timesteps.push_back(static_cast<int>(std::lround(pos)));
  }
  std::vector<double> betas;
  double prev = 1.0;
  for (int t : out.timesteps) {
    betas.push_back(1.0 - sched.alpha_bars[t] / prev);
    prev = sched.alpha_bars[t];
  }
  out.schedule = NoiseSchedule::from_betas(std::move(betas));
  return out;
}

}  // namespace smcd
