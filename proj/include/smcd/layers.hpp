#pragma once

#include <map>
#include <numeric>
#include <optional>
#include <string>

#include "smcd/autograd.hpp"
#include "smcd/params.hpp"

namespace smcd {

enum class InitKind { fan_in, zeros, ones };

struct ParamSpec {
  Shape shape;
  Group group;
  InitKind init = InitKind::fan_in;
  int fan_in = 1;
  double gain = 1.0;
};

/// Declared parameters of a model, keyed by name. Used both to initialize a
/// store and to validate a loaded one.
using ParamSpecs = std::map<std::string, ParamSpec>;

inline void declare(ParamSpecs& specs, const std::string& name, Shape shape, Group group,
                    InitKind init = InitKind::fan_in, int fan_in = 1, double gain = 1.0) {
  SMCD_REQUIRE(!specs.count(name), ConfigError, "parameter declared twice: " + name);
  specs.emplace(name, ParamSpec{std::move(shape), group, init, fan_in, gain});
}

template <typename T>
Tensor<T> materialize(const ParamSpec& spec, Rng& rng) {
  switch (spec.init) {
    case InitKind::zeros: return init::zeros<T>(spec.shape);
    case InitKind::ones: return init::ones<T>(spec.shape);
    case InitKind::fan_in:
      return init::normal<T>(rng, spec.shape, spec.gain / std::sqrt(static_cast<double>(spec.fan_in)));
  }
  return {};
}

/// Adds every declared parameter whose group is in `groups` (all when empty).
template <typename T>
void materialize_into(ParameterStore<T>& store, const ParamSpecs& specs, Rng& rng, const GroupSet& groups = {}) {
  for (const auto& [name, spec] : specs)
    if (groups.empty() || groups.count(spec.group)) store.add(name, materialize<T>(spec, rng), spec.group);
}

/// Every spec must be present with the declared shape and group, and the
/// store must not carry anything undeclared.
template <typename T>
void validate_store(const ParameterStore<T>& store, const ParamSpecs& specs) {
  for (const auto& [name, spec] : specs) {
    SMCD_REQUIRE(store.contains(name), ShapeError, "parameter '" + name + "' missing from store");
    const auto& p = store.at(name);
    SMCD_REQUIRE(p.value.shape() == spec.shape, ShapeError,
                 "parameter '" + name + "' has shape " + shape_str(p.value.shape()) + ", config expects " +
                     shape_str(spec.shape));
    SMCD_REQUIRE(p.group == spec.group, ShapeError, "parameter '" + name + "' in wrong group");
  }
  for (const auto& [name, _] : store.all())
    SMCD_REQUIRE(specs.count(name), ShapeError, "unexpected parameter '" + name + "' for this config");
}

inline int norm_groups(int channels) { return std::gcd(channels, 8); }

namespace layers {

// ---- declarations --------------------------------------------------------

inline void declare_norm(ParamSpecs& s, const std::string& p, int c, Group g) {
  declare(s, p + ".g", Shape{c}, g, InitKind::ones);
  declare(s, p + ".b", Shape{c}, g, InitKind::zeros);
}

inline void declare_linear(ParamSpecs& s, const std::string& p, int in, int out, Group g, bool bias = true,
                           InitKind init = InitKind::fan_in) {
  declare(s, p + ".w", Shape{in, out}, g, init, in);
  if (bias) declare(s, p + ".b", Shape{out}, g, InitKind::zeros);
}

inline void declare_conv(ParamSpecs& s, const std::string& p, int cin, int cout, Group g,
                         InitKind init = InitKind::fan_in) {
  declare(s, p + ".w", Shape{9 * cin, cout}, g, init, 9 * cin);
  declare(s, p + ".b", Shape{cout}, g, InitKind::zeros);
}

/// q/k/v/out projections. Query width `c`, key/value source width `ckv`.
inline void declare_attention(ParamSpecs& s, const std::string& p, int c, int ckv, Group g) {
  declare_linear(s, p + ".q", c, c, g, false);
  declare_linear(s, p + ".k", ckv, c, g, false);
  declare_linear(s, p + ".v", ckv, c, g, false);
  declare_linear(s, p + ".out", c, c, g);
}

inline void declare_resblock(ParamSpecs& s, const std::string& p, int cin, int cout, int temb_dim, Group g) {
  declare_norm(s, p + ".norm1", cin, g);
  declare_conv(s, p + ".conv1", cin, cout, g);
  if (temb_dim > 0) declare_linear(s, p + ".temb", temb_dim, cout, g);
  declare_norm(s, p + ".norm2", cout, g);
  declare_conv(s, p + ".conv2", cout, cout, g);
  if (cin != cout) declare_linear(s, p + ".skip", cin, cout, g);
}

// ---- forward -------------------------------------------------------------

template <typename T>
Var<T> linear(ParamBinder<T>& pb, const std::string& p, Var<T> x, bool bias = true) {
  return bias ? ops::linear(x, pb(p + ".w"), std::optional<Var<T>>(pb(p + ".b"))) : ops::linear(x, pb(p + ".w"));
}

template <typename T>
Var<T> layer_norm(ParamBinder<T>& pb, const std::string& p, Var<T> x) {
  return ops::layer_norm(x, pb(p + ".g"), pb(p + ".b"));
}

template <typename T>
Var<T> group_norm(ParamBinder<T>& pb, const std::string& p, Var<T> x) {
  return ops::group_norm(x, norm_groups(x.dim(-1)), pb(p + ".g"), pb(p + ".b"));
}

template <typename T>
Var<T> conv(ParamBinder<T>& pb, const std::string& p, Var<T> x) {
  return ops::conv3x3(x, pb(p + ".w"), pb(p + ".b"));
}

/// Attention sublayer body: out(Attn(q(x), k(src), v(src))). Callers handle
/// normalization and the residual.
template <typename T>
Var<T> attend(ParamBinder<T>& pb, const std::string& p, Var<T> x, Var<T> src, int heads,
              const std::vector<unsigned char>* key_mask = nullptr) {
  Var<T> q = linear(pb, p + ".q", x, false);
  Var<T> k = linear(pb, p + ".k", src, false);
  Var<T> v = linear(pb, p + ".v", src, false);
  return linear(pb, p + ".out", ops::attention(q, k, v, heads, key_mask));
}

/// z + SelfAttn(LN(z)) over the tokens of each frame; z is [F, HW, C].
template <typename T>
Var<T> spatial_self_attention(ParamBinder<T>& pb, const std::string& p, Var<T> z, int heads) {
  Var<T> n = layer_norm(pb, p + ".norm", z);
  return ops::add(z, attend(pb, p, n, n, heads));
}

/// z + CrossAttn(LN(z), text); text tokens [1, L, D] are shared by all frames.
template <typename T>
Var<T> text_cross_attention(ParamBinder<T>& pb, const std::string& p, Var<T> z, Var<T> text, int heads) {
  Var<T> n = layer_norm(pb, p + ".norm", z);
  return ops::add(z, attend(pb, p, n, text, heads));
}

/// Z + TempAttn(Z): attention along the frame axis, independently for every
/// spatial cell. No positional encoding, so frames are exchangeable.
template <typename T>
Var<T> temporal_attention(ParamBinder<T>& pb, const std::string& p, Var<T> z, int heads) {
  Var<T> x = ops::swap_leading(z);  // [HW, F, C]
  Var<T> n = layer_norm(pb, p + ".norm", x);
  return ops::add(z, ops::swap_leading(attend(pb, p, n, n, heads)));
}

/// Residual conv block on [B, H, W, Cin]; temb is [1, E] or absent.
template <typename T>
Var<T> resblock(ParamBinder<T>& pb, const std::string& p, Var<T> x, std::optional<Var<T>> temb) {
  Var<T> h = conv(pb, p + ".conv1", ops::silu(group_norm(pb, p + ".norm1", x)));
  if (temb) {
    Var<T> e = linear(pb, p + ".temb", ops::silu(*temb));
    h = ops::add_bias(h, ops::reshape(e, Shape{e.dim(-1)}));
  }
  h = conv(pb, p + ".conv2", ops::silu(group_norm(pb, p + ".norm2", h)));
  Var<T> skip = pb.store().contains(p + ".skip.w") ? linear(pb, p + ".skip", x) : x;
  return ops::add(h, skip);
}

}  // namespace layers
}  // namespace smcd
