#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smcd/model.hpp"
#include "smcd/synthetic.hpp"

namespace smcd {

struct TrainConfig {
  int stage = 0;
  bool joint = false;  // ablation: MIM, DIIM and temporal layers together on videos
  double lr = 5e-5;
  int batch_size = 4;
  int steps = 2000;
  double p_b = 0.1;   // box dropout
  double p_i = 0.25;  // image dropout
  double p_t = 0.1;   // text dropout, trains the null-text branch used by guidance
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;

  void validate() const {
    SMCD_REQUIRE(stage >= 0 && stage <= 2, ConfigError, "train.stage must be 0, 1 or 2");
    SMCD_REQUIRE(!joint || stage == 2, ConfigError, "joint training replaces stage 2 only");
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    SMCD_REQUIRE(prob(p_b) && prob(p_i) && prob(p_t), ConfigError, "dropout probabilities must lie in [0, 1]");
    SMCD_REQUIRE(lr >= 0.0 && std::isfinite(lr), ConfigError, "train.lr must be finite and >= 0");
    SMCD_REQUIRE(batch_size >= 1 && steps >= 0, ConfigError, "train.batch_size >= 1 and train.steps >= 0 required");
    SMCD_REQUIRE(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0 && weight_decay >= 0, ConfigError,
                 "invalid optimizer hyperparameters");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"stage", c.stage}, {"joint", c.joint},   {"lr", c.lr},       {"batch_size", c.batch_size},
       {"steps", c.steps}, {"p_b", c.p_b},       {"p_i", c.p_i},     {"p_t", c.p_t},
       {"seed", c.seed},   {"beta1", c.beta1},   {"beta2", c.beta2}, {"eps", c.eps},
       {"weight_decay", c.weight_decay}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.stage = j.value("stage", d.stage);
  c.joint = j.value("joint", d.joint);
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.p_b = j.value("p_b", d.p_b);
  c.p_i = j.value("p_i", d.p_i);
  c.p_t = j.value("p_t", d.p_t);
  c.seed = j.value("seed", d.seed);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
}

/// Trainable groups per stage. Stage 0 is the backbone pretraining stand-in.
inline GroupSet freeze_policy(int stage, bool joint = false) {
  if (joint) return {Group::mim, Group::diim, Group::temporal_attn};
  switch (stage) {
    case 0: return GroupSet(kAllGroups.begin(), kAllGroups.end());
    case 1: return {Group::mim};
    case 2: return {Group::diim, Group::temporal_attn};
  }
  throw ConfigError("unknown training stage " + std::to_string(stage));
}

struct DropoutRates {
  double p_b = 0.1, p_i = 0.25, p_t = 0.1;
};

/// Independently omits boxes (stages >= 1), the image (stage 2) and the
/// text. Three uniforms are consumed per call regardless of outcome, so the
/// stream position does not depend on the condition set.
template <typename T>
ConditionSet<T> condition_dropout(ConditionSet<T> cond, int stage, const DropoutRates& p, Rng& rng) {
  const double ub = rng.uniform(), ui = rng.uniform(), ut = rng.uniform();
  if (stage >= 1 && ub < p.p_b) cond = cond.without_boxes();
  if (stage >= 2 && ui < p.p_i) cond = cond.without_image();
  if (ut < p.p_t) cond = cond.without_text();
  return cond;
}

template <typename T>
struct TrainingExample {
  Tensor<T> z0;  // [F, C, H, W]
  ConditionSet<T> cond;
};

/// Mean over batch items of the per-item mean squared error between eps and
/// net(q_sample(z0, t, eps), t, cond). `net` returns a Var shaped like z0.
template <typename T, typename Net>
Var<T> diffusion_loss(Graph<T>& g, const std::vector<TrainingExample<T>>& batch, const std::vector<int>& ts,
                      const std::vector<Tensor<T>>& eps, const NoiseSchedule& sched, Net&& net) {
  SMCD_REQUIRE(!batch.empty() && ts.size() == batch.size() && eps.size() == batch.size(), ContractViolation,
               "diffusion_loss: batch, timesteps and noise must have equal, nonzero length");
  std::optional<Var<T>> total;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor<T> z_t = q_sample(batch[b].z0, ts[b], eps[b], sched);
    Var<T> l = ops::mse(net(g, z_t, ts[b], batch[b].cond), eps[b]);
    total = total ? ops::add(*total, l) : l;
  }
  return ops::scale(*total, static_cast<T>(1.0 / static_cast<double>(batch.size())));
}

/// The denoiser as a loss network: channels-first output matching z0.
template <typename T>
auto denoiser_net(ParamBinder<T>& pb, const DenoiserConfig& cfg, ForwardOptions opt = {}) {
  return [&pb, &cfg, opt](Graph<T>&, const Tensor<T>& z_t, int t, const ConditionSet<T>& cond) {
    return ops::channels_first(denoise(pb, cfg, z_t, t, cond, opt));
  };
}

template <typename T>
std::string parameter_norm_report(const ParameterStore<T>& store) {
  std::map<Group, double> sq;
  bool finite = true;
  for (const auto& [name, p] : store.all())
    for (T v : p.value.vec()) {
      sq[p.group] += static_cast<double>(v) * v;
      finite = finite && std::isfinite(static_cast<double>(v));
    }
  std::ostringstream os;
  os << "parameter norms:";
  for (const auto& [g, s] : sq) os << " " << group_name(g) << "=" << std::sqrt(s);
  if (!finite) os << " (non-finite entries present)";
  return os.str();
}

template <typename T>
void check_finite_loss(double loss, int step, const std::vector<int>& ts, const ParameterStore<T>& store) {
  if (std::isfinite(loss)) return;
  std::ostringstream os;
  os << "non-finite loss " << loss << " at step " << step << ", t = [";
  for (std::size_t i = 0; i < ts.size(); ++i) os << (i ? "," : "") << ts[i];
  os << "]; " << parameter_norm_report(store);
  throw NumericError(os.str());
}

/// Decoupled-weight-decay Adam. Moments are kept in double; only parameters
/// in trainable groups that received a gradient are touched.
template <typename T>
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 0.01)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(ParameterStore<T>& store, const std::map<std::string, Tensor<T>>& grads, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (const auto& [name, g] : grads) {
      auto& p = store.at(name);
      if (!store.is_trainable(p.group)) continue;
      SMCD_REQUIRE(g.size() == p.value.size(), ContractViolation, "AdamW: gradient shape mismatch for " + name);
      auto& st = state_[name];
      if (st.m.empty()) st.m.assign(g.size(), 0.0), st.v.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i];
        st.m[i] = b1_ * st.m[i] + (1 - b1_) * gi;
        st.v[i] = b2_ * st.v[i] + (1 - b2_) * gi * gi;
        const double update = (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_) + wd_ * p.value[i];
        p.value[i] = static_cast<T>(p.value[i] - lr * update);
      }
    }
  }

  int steps() const noexcept { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  double b1_, b2_, eps_, wd_;
  int t_ = 0;
  std::map<std::string, State> state_;
};

/// Encoded episodes and embeddings, computed once per training run.
struct EncodedSample {
  Tensor<float> episode;  // [E, C, H, W]; frame 0 is v0
  TextEmbedding<float> text;
  std::vector<ObjectTrajectory> trajectories;  // whole episode
  std::vector<Tensor<float>> label_embeddings;
};

inline std::vector<EncodedSample> encode_dataset(const std::vector<Sample>& data, const ModelConfig& cfg) {
  const TextEmbedder emb = cfg.embedder();
  std::vector<EncodedSample> out(data.size());
  parallel_for(static_cast<int>(data.size()), [&](int i) {
    const Sample& s = data[static_cast<std::size_t>(i)];
    SMCD_REQUIRE(static_cast<int>(s.frames.size()) >= cfg.denoiser.frames + 1, ConfigError,
                 "training sample " + std::to_string(i) + " has fewer than F+1 frames");
    SMCD_REQUIRE(s.frames[0].height == cfg.image_size() && s.frames[0].width == cfg.image_size(), ShapeError,
                 "training sample " + std::to_string(i) + " does not match the configured image size");
    EncodedSample e{encode_video<float>(s.frames, cfg.patch), emb.embed_text<float>(s.caption), s.trajectories, {}};
    for (const auto& o : s.trajectories) e.label_embeddings.push_back(emb.embed_label<float>(o.label));
    out[static_cast<std::size_t>(i)] = std::move(e);
  });
  return out;
}

inline Tensor<float> latent_frames(const Tensor<float>& episode, int first, int count) {
  const std::size_t per = episode.size() / static_cast<std::size_t>(episode.dim(0));
  Shape s = episode.shape();
  s[0] = count;
  return Tensor<float>(s, std::vector<float>(episode.data() + per * first, episode.data() + per * (first + count)));
}

/// Draws one training example for a stage: stage 0 a text-only clip, stage 1
/// a single frame with its boxes, stage 2 a clip with boxes and v0.
inline TrainingExample<float> draw_example(const EncodedSample& s, int stage, int frames, Rng& rng) {
  TrainingExample<float> ex;
  ex.cond.text = s.text;
  auto with_boxes = [&](int first, int count) {
    for (std::size_t i = 0; i < s.trajectories.size(); ++i) {
      ex.cond.trajectories.push_back(s.trajectories[i].slice(first, count));
      ex.cond.label_embeddings.push_back(s.label_embeddings[i]);
    }
    ex.cond.boxes_present = !s.trajectories.empty();
  };
  if (stage == 0) {
    ex.z0 = latent_frames(s.episode, 1, frames);
  } else if (stage == 1) {
    const int f = rng.uniform_int(0, s.episode.dim(0) - 1);
    ex.z0 = latent_frames(s.episode, f, 1);
    with_boxes(f, 1);
  } else {
    ex.z0 = latent_frames(s.episode, 1, frames);
    with_boxes(1, frames);
    const auto v0 = latent_frames(s.episode, 0, 1);
    ex.cond.image = {v0.reshaped(Shape{v0.dim(1), v0.dim(2), v0.dim(3)}), true};
  }
  return ex;
}

struct StepRecord {
  int step = 0;
  int stage = 0;
  double loss = 0;
  double lr = 0;
  double seconds = 0;
};

inline void to_json(nlohmann::json& j, const StepRecord& r) {
  j = {{"step", r.step}, {"stage", r.stage}, {"loss", r.loss}, {"lr", r.lr}, {"seconds", r.seconds}};
}

inline void check_prerequisite(const Model& model, const TrainConfig& tc) {
  if (tc.stage == 0) {
    SMCD_REQUIRE(!model.has_conditioning(), PrerequisiteError,
                 "stage 0 trains the backbone only; this model already has motion/image modules");
    return;
  }
  SMCD_REQUIRE(model.stage >= tc.stage - 1, PrerequisiteError,
               "stage " + std::to_string(tc.stage) + " requires a stage-" + std::to_string(tc.stage - 1) +
                   " checkpoint (model has completed stage " + std::to_string(model.stage) + ")");
}

/// Runs tc.steps optimizer steps of one stage on `model` in place. Each
/// batch item gets its own tape; gradients are summed in a fixed order.
inline std::vector<StepRecord> train_stage(Model& model, const std::vector<EncodedSample>& data, const TrainConfig& tc,
                                           const std::function<void(const StepRecord&)>& on_step = {}) {
  tc.validate();
  model.config.validate();
  check_prerequisite(model, tc);
  SMCD_REQUIRE(!data.empty(), ConfigError, "training data is empty");
  if (tc.stage >= 1 && !model.has_conditioning()) model.attach_conditioning();
  validate_params(model.params, model.config.denoiser);

  const auto& dcfg = model.config.denoiser;
  const NoiseSchedule sched = model.config.schedule.build();
  const ForwardOptions fopt{tc.stage != 1 || tc.joint};
  const int data_stage = tc.joint ? 2 : tc.stage;
  const DropoutRates rates{tc.p_b, tc.p_i, tc.p_t};
  model.params.set_trainable(freeze_policy(tc.stage, tc.joint));

  AdamW<float> opt(tc.beta1, tc.beta2, tc.eps, tc.weight_decay);
  Rng rng(tc.seed);
  std::vector<StepRecord> log;
  const auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < tc.steps; ++step) {
    std::map<std::string, Tensor<float>> grads;
    std::vector<int> ts;
    double loss = 0;
    for (int b = 0; b < tc.batch_size; ++b) {
      const auto& s = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(data.size()) - 1))];
      TrainingExample<float> ex = draw_example(s, data_stage, dcfg.frames, rng);
      ex.cond = condition_dropout(std::move(ex.cond), data_stage, rates, rng);
      ts.push_back(rng.uniform_int(0, sched.T - 1));
      std::vector<Tensor<float>> eps{rng.normal_tensor<float>(ex.z0.shape())};

      Graph<float> g;
      ParamBinder<float> pb(g, model.params);
      Var<float> l = diffusion_loss(g, {ex}, {ts.back()}, eps, sched, denoiser_net(pb, dcfg, fopt));
      loss += l.value()[0];
      g.backward(l);
      for (auto& [name, gr] : pb.gradients()) {
        auto it = grads.find(name);
        if (it == grads.end()) {
          grads.emplace(name, gr);
        } else {
          for (std::size_t i = 0; i < gr.size(); ++i) it->second[i] += gr[i];
        }
      }
    }
    loss /= tc.batch_size;
    check_finite_loss(loss, step, ts, model.params);
    const float inv = 1.0f / static_cast<float>(tc.batch_size);
    for (auto& [_, gr] : grads)
      for (auto& v : gr.vec()) v *= inv;
    opt.step(model.params, grads, tc.lr);

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    log.push_back({step, tc.stage, loss, tc.lr, secs});
    if (on_step) on_step(log.back());
  }
  model.stage = std::max(model.stage, tc.stage);
  return log;
}

inline std::vector<StepRecord> train_stage(Model& model, const std::vector<Sample>& data, const TrainConfig& tc,
                                           const std::function<void(const StepRecord&)>& on_step = {}) {
  return train_stage(model, encode_dataset(data, model.config), tc, on_step);
}

/// Mean loss over log entries [first, first + count).
inline double window_mean(const std::vector<StepRecord>& log, std::size_t first, std::size_t count) {
  SMCD_REQUIRE(first + count <= log.size() && count > 0, ContractViolation, "loss window out of range");
  double s = 0;
  for (std::size_t i = first; i < first + count; ++i) s += log[i].loss;
  return s / static_cast<double>(count);
}

}  // namespace smcd
