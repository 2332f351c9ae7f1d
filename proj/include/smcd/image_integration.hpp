#pragma once

#include <string>

#include "smcd/layers.hpp"

namespace smcd::image_integration {

inline void declare_zero_conv(ParamSpecs& s, int latent_channels) {
  layers::declare_conv(s, "diim.zero_conv", latent_channels, latent_channels, Group::diim, InitKind::zeros);
}

/// Adds ZeroConv(x0) to every frame. z: [F, H, W, C]; x0: [1, H, W, C].
template <typename T>
Var<T> zero_conv_inject(ParamBinder<T>& pb, Var<T> z, Var<T> x0) {
  SMCD_REQUIRE(z.value().rank() == 4 && x0.value().rank() == 4 && x0.dim(0) == 1 && z.dim(1) == x0.dim(1) &&
                   z.dim(2) == x0.dim(2) && z.dim(3) == x0.dim(3),
               ContractViolation,
               "zero_conv_inject: latent " + shape_str(z.shape()) + " vs image " + shape_str(x0.shape()));
  return ops::add_broadcast_leading(z, layers::conv(pb, "diim.zero_conv", x0));
}

/// Adapter (conv into the block width plus one residual conv block),
/// cross-attention projections and the beta gate.
inline void declare_gated_cross_attention(ParamSpecs& s, const std::string& p, int c, int latent_channels) {
  layers::declare_conv(s, p + ".adapter.in", latent_channels, c, Group::diim);
  layers::declare_resblock(s, p + ".adapter.res", c, c, 0, Group::diim);
  layers::declare_norm(s, p + ".norm", c, Group::diim);
  layers::declare_attention(s, p, c, c, Group::diim);
  declare(s, p + ".beta", Shape{1}, Group::diim, InitKind::zeros);
}

/// x_hat0 = ResNet(x0) as tokens [1, h*w, C]; x0 is already pooled to the
/// block resolution, [1, h, w, C_latent].
template <typename T>
Var<T> image_tokens(ParamBinder<T>& pb, const std::string& p, Var<T> x0) {
  Var<T> h = layers::conv(pb, p + ".adapter.in", x0);
  h = layers::resblock<T>(pb, p + ".adapter.res", h, std::nullopt);
  return ops::reshape(h, Shape{1, h.dim(1) * h.dim(2), h.dim(3)});
}

/// z + tanh(beta) * CrossAttn(q(z), k(x_hat0), v(x_hat0)); z: [F, HW, C].
template <typename T>
Var<T> gated_cross_attention(ParamBinder<T>& pb, const std::string& p, Var<T> z, Var<T> x0, int heads) {
  Var<T> img = image_tokens(pb, p, x0);
  Var<T> n = layers::layer_norm(pb, p + ".norm", z);
  Var<T> attn = layers::attend(pb, p, n, img, heads);
  return ops::add(z, ops::mul_scalar(attn, ops::tanh(pb(p + ".beta"))));
}

}  // namespace smcd::image_integration
