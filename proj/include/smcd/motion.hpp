#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "smcd/conditions.hpp"
#include "smcd/layers.hpp"
#include "smcd/trajectory.hpp"

namespace smcd {

/// Sinusoidal box code: for each coordinate in (x_min, y_min, x_max, y_max)
/// the pairs sin(2^k pi v), cos(2^k pi v) for k = 0..L-1. Length 8L.
inline std::vector<double> fourier_embed(const BoundingBox& box, int freqs) {
  SMCD_REQUIRE(box.valid(), ContractViolation, "fourier_embed: invalid box");
  SMCD_REQUIRE(freqs >= 1, ContractViolation, "fourier_embed: need at least one frequency");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(8 * freqs));
  for (double v : {box.x_min, box.y_min, box.x_max, box.y_max}) {
    double scale = std::numbers::pi;
    for (int k = 0; k < freqs; ++k, scale *= 2.0) {
      out.push_back(std::sin(scale * v));
      out.push_back(std::cos(scale * v));
    }
  }
  return out;
}

/// Fourier box code followed by the label embedding: the MLP input of one
/// grounding token.
template <typename T>
std::vector<T> grounding_input(const BoundingBox& box, const Tensor<T>& label_embedding, int freqs) {
  std::vector<T> in;
  for (double v : fourier_embed(box, freqs)) in.push_back(static_cast<T>(v));
  in.insert(in.end(), label_embedding.vec().begin(), label_embedding.vec().end());
  return in;
}

/// Grounding token MLP inputs for a run of frames, padded to one slot per
/// object. mask[f * N + i] is 0 where object i is absent at frame f.
template <typename T>
struct GroundingBatch {
  Tensor<T> inputs;  // [F, N, 8L + D]
  std::vector<unsigned char> mask;
  int frames = 0;
  int slots = 0;
};

template <typename T>
GroundingBatch<T> grounding_batch(const ConditionSet<T>& cond, int frames, int freqs) {
  const int n = static_cast<int>(cond.trajectories.size());
  SMCD_REQUIRE(n <= kMaxObjects, ConfigError, "too many objects in trajectory set");
  SMCD_REQUIRE(cond.label_embeddings.size() == cond.trajectories.size(), ContractViolation,
               "label embedding count does not match trajectories");
  const int width = n ? 8 * freqs + cond.label_embeddings[0].dim(0) : 0;
  GroundingBatch<T> out{Tensor<T>(Shape{frames, n, width}), std::vector<unsigned char>(static_cast<std::size_t>(frames) * n, 0),
                        frames, n};
  for (int i = 0; i < n; ++i) {
    const auto& traj = cond.trajectories[i];
    SMCD_REQUIRE(traj.frames() == frames, ShapeError,
                 "trajectory '" + traj.label + "' has " + std::to_string(traj.frames()) + " frames, video has " +
                     std::to_string(frames));
    for (int f = 0; f < frames; ++f) {
      if (!traj.present(f)) continue;
      const auto in = grounding_input(*traj.boxes[f], cond.label_embeddings[i], freqs);
      std::copy(in.begin(), in.end(), out.inputs.data() + (static_cast<std::size_t>(f) * n + i) * width);
      out.mask[static_cast<std::size_t>(f) * n + i] = 1;
    }
  }
  return out;
}

namespace motion {

inline int grounding_dim(int freqs, int text_dim) { return 8 * freqs + text_dim; }

/// Token MLP of one attachment block: in = 8L + D, hidden = 4 * in, out = in.
inline void declare_grounding_mlp(ParamSpecs& s, const std::string& p, int freqs, int text_dim) {
  const int g = grounding_dim(freqs, text_dim);
  layers::declare_linear(s, p + ".ground.fc1", g, 4 * g, Group::mim);
  layers::declare_linear(s, p + ".ground.fc2", 4 * g, g, Group::mim);
}

/// Token MLP, projection of the tokens to the block width, the shared
/// pre-norm, attention projections and the gamma gate.
inline void declare_gated_self_attention(ParamSpecs& s, const std::string& p, int c, int freqs, int text_dim) {
  declare_grounding_mlp(s, p, freqs, text_dim);
  layers::declare_linear(s, p + ".proj", grounding_dim(freqs, text_dim), c, Group::mim);
  layers::declare_norm(s, p + ".norm", c, Group::mim);
  layers::declare_attention(s, p, c, c, Group::mim);
  declare(s, p + ".gamma", Shape{1}, Group::mim, InitKind::zeros);
}

/// Runs block p's token MLP over every slot: [F, N, G_in] -> [F, N, G].
template <typename T>
Var<T> grounding_tokens(ParamBinder<T>& pb, const std::string& p, Var<T> inputs) {
  Var<T> h = ops::silu(layers::linear(pb, p + ".ground.fc1", inputs));
  return layers::linear(pb, p + ".ground.fc2", h);
}

/// Grounding tokens s_{i,f} of attachment block p for the objects present
/// at one frame, in object order.
template <typename T>
Tensor<T> frame_grounding_tokens(const ParameterStore<T>& store, const std::string& p, const ConditionSet<T>& cond,
                                 int frame, int freqs) {
  const int frames = cond.trajectories.empty() ? frame + 1 : cond.trajectories[0].frames();
  SMCD_REQUIRE(frame >= 0 && frame < frames, ContractViolation, "grounding_tokens: frame index out of range");
  if (cond.trajectories.empty()) return Tensor<T>(Shape{0, 0});
  Graph<T> g(false);
  ParamBinder<T> pb(g, store);
  const auto batch = grounding_batch(cond, frames, freqs);
  const auto& tok = grounding_tokens(pb, p, g.constant(batch.inputs)).value();
  const int n = batch.slots, width = tok.dim(2);
  std::vector<T> out;
  int present = 0;
  for (int i = 0; i < n; ++i) {
    if (!batch.mask[static_cast<std::size_t>(frame) * n + i]) continue;
    const T* row = tok.data() + (static_cast<std::size_t>(frame) * n + i) * width;
    out.insert(out.end(), row, row + width);
    ++present;
  }
  return Tensor<T>(Shape{present, width}, std::move(out));
}

/// z + tanh(gamma) * TS(SelfAttn([z, s])). Only visual positions are kept by
/// token selection, so queries are the visual tokens while keys and values
/// span visual plus grounding tokens. z: [F, HW, C]; inputs: the MLP inputs
/// [F, N, 8L + D] (tokens are computed here with block p's MLP).
template <typename T>
Var<T> gated_self_attention(ParamBinder<T>& pb, const std::string& p, Var<T> z, std::optional<Var<T>> inputs,
                            const std::vector<unsigned char>& token_mask, int heads) {
  Var<T> nz = layers::layer_norm(pb, p + ".norm", z);
  Var<T> attn = [&] {
    if (!inputs || inputs->dim(1) == 0) return layers::attend(pb, p, nz, nz, heads);
    const int f = z.dim(0), hw = z.dim(1), n = inputs->dim(1);
    Var<T> tokens = grounding_tokens(pb, p, *inputs);
    Var<T> s = layers::layer_norm(pb, p + ".norm", layers::linear(pb, p + ".proj", tokens));
    std::vector<unsigned char> mask(static_cast<std::size_t>(f) * (hw + n), 1);
    for (int fi = 0; fi < f; ++fi)
      for (int i = 0; i < n; ++i)
        mask[static_cast<std::size_t>(fi) * (hw + n) + hw + i] = token_mask[static_cast<std::size_t>(fi) * n + i];
    return layers::attend(pb, p, nz, ops::concat_tokens(nz, s), heads, &mask);
  }();
  return ops::add(z, ops::mul_scalar(attn, ops::tanh(pb(p + ".gamma"))));
}

}  // namespace motion
}  // namespace smcd
