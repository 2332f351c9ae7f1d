#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smcd/conditions.hpp"
#include "smcd/image_integration.hpp"
#include "smcd/layers.hpp"
#include "smcd/motion.hpp"

namespace smcd {

/// Position of the two conditioning layers inside a block. standard:
/// spatial -> MIM -> text -> DIIM -> temporal. swapped: spatial -> DIIM ->
/// text -> MIM -> temporal.
enum class LayerOrder { standard, swapped };

/// Which of the two image paths exist: zero-conv input injection, gated
/// cross-attention, or both (the full module).
enum class ImageInjection { both, zero_conv, cross_attention };

inline std::string injection_name(ImageInjection m) {
  switch (m) {
    case ImageInjection::both: return "both";
    case ImageInjection::zero_conv: return "zero_conv";
    case ImageInjection::cross_attention: return "cross_attention";
  }
  return "?";
}

struct DenoiserConfig {
  int latent_channels = 12;
  int latent_height = 16;
  int latent_width = 16;
  int frames = 8;
  int base_channels = 32;
  std::vector<int> channel_mults{1, 2};
  int heads = 2;
  int text_dim = 64;
  int fourier_freqs = 8;
  LayerOrder order = LayerOrder::standard;
  ImageInjection image_injection = ImageInjection::both;

  bool zero_conv() const { return image_injection != ImageInjection::cross_attention; }
  bool image_cross_attention() const { return image_injection != ImageInjection::zero_conv; }

  int levels() const { return static_cast<int>(channel_mults.size()); }
  int channels(int level) const { return base_channels * channel_mults.at(static_cast<std::size_t>(level)); }
  int time_dim() const { return 4 * base_channels; }
  int grounding_dim() const { return motion::grounding_dim(fourier_freqs, text_dim); }

  void validate() const {
    SMCD_REQUIRE(latent_channels >= 1 && latent_height >= 1 && latent_width >= 1 && frames >= 1, ConfigError,
                 "denoiser: latent dimensions must be positive");
    SMCD_REQUIRE(base_channels >= 1 && heads >= 1 && text_dim >= 1 && fourier_freqs >= 1, ConfigError,
                 "denoiser: widths must be positive");
    SMCD_REQUIRE(!channel_mults.empty(), ConfigError, "denoiser: need at least one resolution level");
    const int scale = 1 << (levels() - 1);
    SMCD_REQUIRE(latent_height % scale == 0 && latent_width % scale == 0, ConfigError,
                 "denoiser: latent size not divisible by 2^(levels-1)");
    for (int l = 0; l < levels(); ++l) {
      SMCD_REQUIRE(channel_mults[l] >= 1, ConfigError, "denoiser: channel multipliers must be >= 1");
      SMCD_REQUIRE(channels(l) % heads == 0, ConfigError, "denoiser: block width not divisible by head count");
    }
    SMCD_REQUIRE(time_dim() % 2 == 0, ConfigError, "denoiser: odd timestep embedding width");
  }

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"latent_channels", c.latent_channels},
       {"latent_height", c.latent_height},
       {"latent_width", c.latent_width},
       {"frames", c.frames},
       {"base_channels", c.base_channels},
       {"channel_mults", c.channel_mults},
       {"heads", c.heads},
       {"text_dim", c.text_dim},
       {"fourier_freqs", c.fourier_freqs},
       {"layer_order", c.order == LayerOrder::standard ? "standard" : "swapped"},
       {"image_injection", injection_name(c.image_injection)}};
}

inline void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  DenoiserConfig d;
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.latent_height = j.value("latent_height", d.latent_height);
  c.latent_width = j.value("latent_width", d.latent_width);
  c.frames = j.value("frames", d.frames);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.channel_mults = j.value("channel_mults", d.channel_mults);
  c.heads = j.value("heads", d.heads);
  c.text_dim = j.value("text_dim", d.text_dim);
  c.fourier_freqs = j.value("fourier_freqs", d.fourier_freqs);
  const std::string order = j.value("layer_order", std::string("standard"));
  SMCD_REQUIRE(order == "standard" || order == "swapped", ValidationError,
               "config.layer_order must be 'standard' or 'swapped'");
  c.order = order == "standard" ? LayerOrder::standard : LayerOrder::swapped;
  const std::string inj = j.value("image_injection", std::string("both"));
  bool known = false;
  for (auto m : {ImageInjection::both, ImageInjection::zero_conv, ImageInjection::cross_attention})
    if (inj == injection_name(m)) c.image_injection = m, known = true;
  SMCD_REQUIRE(known, ValidationError, "config.image_injection must be 'both', 'zero_conv' or 'cross_attention'");
}

namespace denoiser {

inline std::string down_name(int level) { return "down" + std::to_string(level); }
inline std::string up_name(int level) { return "up" + std::to_string(level); }

/// (block name, input width, output width, level) in execution order.
struct BlockLayout {
  std::string name;
  int cin;
  int cout;
  int level;
};

inline std::vector<BlockLayout> block_layout(const DenoiserConfig& cfg) {
  std::vector<BlockLayout> out;
  int prev = cfg.base_channels;
  for (int l = 0; l < cfg.levels(); ++l) {
    out.push_back({down_name(l), prev, cfg.channels(l), l});
    prev = cfg.channels(l);
  }
  for (int l = cfg.levels() - 2; l >= 0; --l) {
    out.push_back({up_name(l), prev + cfg.channels(l), cfg.channels(l), l});
    prev = cfg.channels(l);
  }
  return out;
}

/// Parameters of the text-to-video backbone.
inline ParamSpecs declare_base(const DenoiserConfig& cfg) {
  cfg.validate();
  ParamSpecs s;
  const int e = cfg.time_dim();
  layers::declare_linear(s, "time.fc1", e, e, Group::resnet);
  layers::declare_linear(s, "time.fc2", e, e, Group::resnet);
  layers::declare_conv(s, "conv_in", cfg.latent_channels, cfg.base_channels, Group::resnet);
  layers::declare_norm(s, "norm_out", cfg.base_channels, Group::resnet);
  layers::declare_conv(s, "conv_out", cfg.base_channels, cfg.latent_channels, Group::resnet);
  declare(s, "text_null", Shape{1, cfg.text_dim}, Group::text_cross_attn, InitKind::fan_in, 1);
  for (const auto& b : block_layout(cfg)) {
    layers::declare_resblock(s, b.name + ".res", b.cin, b.cout, e, Group::resnet);
    layers::declare_norm(s, b.name + ".spatial.norm", b.cout, Group::spatial_attn);
    layers::declare_attention(s, b.name + ".spatial", b.cout, b.cout, Group::spatial_attn);
    layers::declare_norm(s, b.name + ".text.norm", b.cout, Group::text_cross_attn);
    layers::declare_attention(s, b.name + ".text", b.cout, cfg.text_dim, Group::text_cross_attn);
    layers::declare_norm(s, b.name + ".temporal.norm", b.cout, Group::temporal_attn);
    layers::declare_attention(s, b.name + ".temporal", b.cout, b.cout, Group::temporal_attn);
  }
  return s;
}

/// Parameters of the motion and image integration modules.
inline ParamSpecs declare_conditioning(const DenoiserConfig& cfg) {
  cfg.validate();
  ParamSpecs s;
  if (cfg.zero_conv()) image_integration::declare_zero_conv(s, cfg.latent_channels);
  for (const auto& b : block_layout(cfg)) {
    motion::declare_gated_self_attention(s, b.name + ".mim", b.cout, cfg.fourier_freqs, cfg.text_dim);
    if (cfg.image_cross_attention())
      image_integration::declare_gated_cross_attention(s, b.name + ".diim", b.cout, cfg.latent_channels);
  }
  return s;
}

inline ParamSpecs declare_all(const DenoiserConfig& cfg, bool with_conditioning) {
  ParamSpecs s = declare_base(cfg);
  if (with_conditioning) s.merge(declare_conditioning(cfg));
  return s;
}

template <typename T>
bool has_conditioning_modules(const ParameterStore<T>& s) {
  return s.groups().count(Group::mim) != 0;
}

}  // namespace denoiser

/// Fresh backbone parameters.
template <typename T>
ParameterStore<T> init_base_params(const DenoiserConfig& cfg, std::uint64_t seed) {
  ParameterStore<T> store;
  Rng rng = Rng::substream(seed, 0);
  materialize_into(store, denoiser::declare_base(cfg), rng);
  store.set_trainable(GroupSet(kAllGroups.begin(), kAllGroups.end()));
  return store;
}

/// Appends MIM and DIIM with zero gates and a zero convolution, so the
/// network function is unchanged. Existing tensors are not touched.
template <typename T>
void attach_conditioning(ParameterStore<T>& store, const DenoiserConfig& cfg, std::uint64_t seed) {
  SMCD_REQUIRE(!denoiser::has_conditioning_modules(store), ConfigError, "conditioning modules already attached");
  Rng rng = Rng::substream(seed, 1);
  materialize_into(store, denoiser::declare_conditioning(cfg), rng);
}

template <typename T>
void validate_params(const ParameterStore<T>& store, const DenoiserConfig& cfg) {
  validate_store(store, denoiser::declare_all(cfg, denoiser::has_conditioning_modules(store)));
}

/// Sinusoidal embedding of a (zero-based) timestep, [1, dim].
template <typename T>
Tensor<T> timestep_embedding(int t, int dim) {
  const int half = dim / 2;
  Tensor<T> out(Shape{1, dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    out[i] = static_cast<T>(std::sin(t * freq));
    out[half + i] = static_cast<T>(std::cos(t * freq));
  }
  return out;
}

struct ForwardOptions {
  bool temporal = true;  // false skips every temporal attention layer
};

namespace denoiser {

template <typename T>
struct BlockContext {
  std::optional<Var<T>> grounding;  // token MLP inputs, [F, N, 8L + D]
  std::vector<unsigned char> grounding_mask;
  std::vector<Var<T>> image_by_level;  // pooled x0 per level, [1, h, w, C_latent]
  Var<T> text;                          // [1, L, D]
  bool temporal = true;
  int heads = 1;
};

template <typename T>
Var<T> block(ParamBinder<T>& pb, const DenoiserConfig& cfg, const BlockLayout& b, Var<T> h, Var<T> temb,
             const BlockContext<T>& ctx) {
  h = layers::resblock(pb, b.name + ".res", h, std::optional<Var<T>>(temb));
  const Shape spatial = h.shape();
  Var<T> z = ops::reshape(h, Shape{spatial[0], spatial[1] * spatial[2], spatial[3]});
  z = layers::spatial_self_attention(pb, b.name + ".spatial", z, ctx.heads);
  auto mim = [&](Var<T> x) {
    if (!ctx.grounding) return x;
    return motion::gated_self_attention(pb, b.name + ".mim", x, ctx.grounding, ctx.grounding_mask, ctx.heads);
  };
  auto diim = [&](Var<T> x) {
    if (ctx.image_by_level.empty() || !cfg.image_cross_attention()) return x;
    return image_integration::gated_cross_attention(pb, b.name + ".diim", x,
                                                    ctx.image_by_level[static_cast<std::size_t>(b.level)], ctx.heads);
  };
  const bool standard = cfg.order == LayerOrder::standard;
  z = standard ? mim(z) : diim(z);
  z = layers::text_cross_attention(pb, b.name + ".text", z, ctx.text, ctx.heads);
  z = standard ? diim(z) : mim(z);
  if (ctx.temporal) z = layers::temporal_attention(pb, b.name + ".temporal", z, ctx.heads);
  return ops::reshape(z, spatial);
}

}  // namespace denoiser

/// Noise prediction eps_theta(Z_t, t, cond). z_t is [F, C, H, W]; the result
/// is channels-last [F, H, W, C]. Conditioning paths run only for the
/// elements present in `cond`.
template <typename T>
Var<T> denoise(ParamBinder<T>& pb, const DenoiserConfig& cfg, const Tensor<T>& z_t, int t,
               const ConditionSet<T>& cond, ForwardOptions opt = {}) {
  SMCD_REQUIRE(z_t.rank() == 4 && z_t.dim(1) == cfg.latent_channels && z_t.dim(2) == cfg.latent_height &&
                   z_t.dim(3) == cfg.latent_width,
               ShapeError, "denoise: latent " + shape_str(z_t.shape()) + " does not match config");
  Graph<T>& g = pb.graph();
  const int frames = z_t.dim(0);
  const bool conditioned = cond.has_boxes() || cond.has_image();
  if (conditioned)
    SMCD_REQUIRE(denoiser::has_conditioning_modules(pb.store()), ConfigError,
                 "image/box conditions given but the parameters have no motion/image modules");

  denoiser::BlockContext<T> ctx;
  ctx.heads = cfg.heads;
  ctx.temporal = opt.temporal;
  if (cond.has_text()) {
    SMCD_REQUIRE(cond.text.tokens.dim(1) == cfg.text_dim, ShapeError, "denoise: text embedding width mismatch");
    ctx.text = g.constant(cond.text.tokens.reshaped(Shape{1, cond.text.tokens.dim(0), cfg.text_dim}));
  } else {
    ctx.text = ops::reshape(pb("text_null"), Shape{1, 1, cfg.text_dim});
  }

  Var<T> x = g.constant(ops::to_channels_last(z_t));
  if (cond.has_image()) {
    const auto& lat = cond.image.latent;
    SMCD_REQUIRE(lat.rank() == 3 && lat.dim(0) == cfg.latent_channels && lat.dim(1) == cfg.latent_height &&
                     lat.dim(2) == cfg.latent_width,
                 ShapeError, "denoise: image latent " + shape_str(lat.shape()) + " does not match config");
    Var<T> x0 = g.constant(ops::to_channels_last(lat.reshaped(Shape{1, lat.dim(0), lat.dim(1), lat.dim(2)})));
    if (cfg.zero_conv()) x = image_integration::zero_conv_inject(pb, x, x0);
    ctx.image_by_level.push_back(x0);
    for (int l = 1; l < cfg.levels(); ++l) ctx.image_by_level.push_back(ops::avg_pool2(ctx.image_by_level.back()));
  }
  if (cond.has_boxes()) {
    auto batch = grounding_batch(cond, frames, cfg.fourier_freqs);
    SMCD_REQUIRE(batch.inputs.dim(2) == cfg.grounding_dim(), ShapeError, "denoise: label embedding width mismatch");
    ctx.grounding = g.constant(std::move(batch.inputs));
    ctx.grounding_mask = std::move(batch.mask);
  }

  Var<T> temb = g.constant(timestep_embedding<T>(t, cfg.time_dim()));
  temb = layers::linear(pb, "time.fc2", ops::silu(layers::linear(pb, "time.fc1", temb)));

  Var<T> h = layers::conv(pb, "conv_in", x);
  std::vector<Var<T>> skips;
  for (const auto& b : denoiser::block_layout(cfg)) {
    if (b.name.starts_with("up")) {
      h = ops::concat_channels(ops::upsample2(h), skips[static_cast<std::size_t>(b.level)]);
    } else if (b.level > 0) {
      h = ops::avg_pool2(h);
    }
    h = denoiser::block(pb, cfg, b, h, temb, ctx);
    if (b.name.starts_with("down") && b.level < cfg.levels() - 1) skips.push_back(h);
  }
  return layers::conv(pb, "conv_out", ops::silu(layers::group_norm(pb, "norm_out", h)));
}

/// Gradient-free forward returning [F, C, H, W].
template <typename T>
Tensor<T> predict_noise(const ParameterStore<T>& params, const DenoiserConfig& cfg, const Tensor<T>& z_t, int t,
                        const ConditionSet<T>& cond, ForwardOptions opt = {}) {
  Graph<T> g(false);
  ParamBinder<T> pb(g, params);
  return ops::to_channels_first(denoise(pb, cfg, z_t, t, cond, opt).value());
}

}  // namespace smcd
