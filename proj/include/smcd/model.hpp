#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "smcd/denoiser.hpp"
#include "smcd/encoders.hpp"
#include "smcd/schedule.hpp"

namespace smcd {

struct ScheduleConfig {
  int steps = 100;
  // Linear betas scaled by 1000/T from the usual (1e-4, 0.02) so that the
  // 100-step chain still ends close to pure noise.
  double beta_start = 1e-3;
  double beta_end = 0.2;

  NoiseSchedule build() const { return make_schedule(steps, beta_start, beta_end); }
  friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& c) {
  j = {{"steps", c.steps}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& c) {
  ScheduleConfig d;
  c.steps = j.value("steps", d.steps);
  c.beta_start = j.value("beta_start", d.beta_start);
  c.beta_end = j.value("beta_end", d.beta_end);
}

/// Everything needed to rebuild a model around a parameter store.
struct ModelConfig {
  DenoiserConfig denoiser;
  ScheduleConfig schedule;
  int patch = 2;  // codec space-to-depth factor; latent channels = 3 * patch^2
  std::uint64_t embedder_seed = 7;
  std::uint64_t param_seed = 1;

  int image_size() const { return denoiser.latent_height * patch; }

  void validate() const {
    denoiser.validate();
    SMCD_REQUIRE(patch >= 1, ConfigError, "config.patch must be >= 1");
    SMCD_REQUIRE(denoiser.latent_channels == 3 * patch * patch, ConfigError,
                 "config.denoiser.latent_channels must equal 3 * patch^2 (" + std::to_string(3 * patch * patch) + ")");
    schedule.build();
  }

  TextEmbedder embedder() const { return TextEmbedder(denoiser.text_dim, embedder_seed); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"denoiser", c.denoiser},
       {"schedule", c.schedule},
       {"patch", c.patch},
       {"embedder_seed", c.embedder_seed},
       {"param_seed", c.param_seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.denoiser = j.value("denoiser", d.denoiser);
  c.schedule = j.value("schedule", d.schedule);
  c.patch = j.value("patch", d.patch);
  c.embedder_seed = j.value("embedder_seed", d.embedder_seed);
  c.param_seed = j.value("param_seed", d.param_seed);
}

/// Parameters plus the last completed training stage (-1 = untrained).
struct Model {
  ModelConfig config;
  ParameterStore<float> params;
  int stage = -1;

  static Model fresh(const ModelConfig& cfg) {
    cfg.validate();
    return Model{cfg, init_base_params<float>(cfg.denoiser, cfg.param_seed), -1};
  }

  bool has_conditioning() const { return denoiser::has_conditioning_modules(params); }
  void attach_conditioning() { smcd::attach_conditioning(params, config.denoiser, config.param_seed); }
};

}  // namespace smcd
