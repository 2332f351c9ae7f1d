#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "smcd/model.hpp"

namespace smcd {

struct SamplerConfig {
  double alpha = 2.0;  // guidance scale
  int steps = 100;     // <= T; fewer steps respace the schedule evenly
  std::uint64_t seed = 0;
  bool guidance = true;  // false: plain conditional prediction, no null branch
  bool clip = true;      // clamp the predicted clean latent to the codec range [-1, 1]

  void validate(int T) const {
    SMCD_REQUIRE(alpha >= 0.0 && std::isfinite(alpha), ConfigError, "sampler.alpha must be finite and >= 0");
    SMCD_REQUIRE(steps >= 1 && steps <= T, ConfigError, "sampler.steps must be in [1, T]");
  }
};

inline void to_json(nlohmann::json& j, const SamplerConfig& c) {
  j = {{"alpha", c.alpha}, {"steps", c.steps}, {"seed", c.seed}, {"guidance", c.guidance}, {"clip", c.clip}};
}

/// Guided prediction eps_c + alpha (eps_c - eps_null), where the null branch
/// swaps only the text for the learned null embedding. The combination is
/// formed in double before rounding. alpha = 0 returns eps_c untouched.
template <typename T>
Tensor<T> cfg_combine(const Tensor<T>& eps_cond, const Tensor<T>& eps_null, double alpha) {
  SMCD_REQUIRE(eps_cond.shape() == eps_null.shape(), ContractViolation, "cfg: branch shapes differ");
  if (alpha == 0.0) return eps_cond;
  Tensor<T> out(eps_cond.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double c = eps_cond[i], n = eps_null[i];
    out[i] = static_cast<T>(c + alpha * (c - n));
  }
  return out;
}

template <typename T>
Tensor<T> cfg_epsilon(const ParameterStore<T>& params, const DenoiserConfig& cfg, const Tensor<T>& z_t, int t,
                      const ConditionSet<T>& cond, double alpha) {
  Tensor<T> eps_c = predict_noise(params, cfg, z_t, t, cond);
  if (alpha == 0.0) return eps_c;
  return cfg_combine(eps_c, predict_noise(params, cfg, z_t, t, cond.without_text()), alpha);
}

struct Generation {
  std::vector<Image> frames;
  Tensor<float> latent;  // final Z_0 estimate, [F, C, H, W]
};

/// Ancestral sampling from Z_T ~ N(0, I). One noise tensor is drawn per
/// step (including the last, where it is unused) so the stream layout does
/// not depend on the step count's parity or on guidance.
inline Generation generate(const Model& model, const ConditionSet<float>& cond, const SamplerConfig& sc) {
  const auto& dcfg = model.config.denoiser;
  const NoiseSchedule sched = model.config.schedule.build();
  sc.validate(sched.T);
  validate_params(model.params, dcfg);
  SMCD_REQUIRE(!sc.guidance || sc.alpha == 0.0 || cond.has_text(), ConfigError,
               "guided sampling needs a caption (the null branch replaces it)");
  const RespacedSchedule rs = respace(sched, sc.steps);
  const Shape shape{dcfg.frames, dcfg.latent_channels, dcfg.latent_height, dcfg.latent_width};

  Rng rng(sc.seed);
  Tensor<float> z = rng.normal_tensor<float>(shape);
  for (int i = sc.steps - 1; i >= 0; --i) {
    const int t = rs.timesteps[static_cast<std::size_t>(i)];
    const Tensor<float> eps = sc.guidance ? cfg_epsilon(model.params, dcfg, z, t, cond, sc.alpha)
                                          : predict_noise(model.params, dcfg, z, t, cond);
    const Tensor<float> noise = rng.normal_tensor<float>(shape);
    z = sc.clip ? ddpm_step_clipped(z, eps, i, noise, rs.schedule) : ddpm_step(z, eps, i, noise, rs.schedule);
  }
  return {decode_video(z, model.config.patch), z};
}

}  // namespace smcd
