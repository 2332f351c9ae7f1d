#pragma once

// Shared helpers for the test binaries: seeded generators, a micro model
// config and a central-difference gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "smcd/smcd.hpp"

namespace smcd::test {

template <typename T>
Tensor<T> randn(Rng& rng, Shape s, double scale = 1.0) {
  return rng.normal_tensor<T>(std::move(s), scale);
}

inline double rel_err(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

/// max |a - b| / max |b|, the relative tolerance used for whole tensors.
template <typename T>
double rel_diff(const Tensor<T>& a, const Tensor<T>& b) {
  return max_abs_diff(a, b) / std::max(1e-30, static_cast<double>(max_abs(b)));
}

/// Uniform corners; with min_side > 0 both sides are at least that long.
inline BoundingBox random_box(Rng& rng, double min_side = 0.0) {
  auto side = [&] {
    const double len = min_side + (1.0 - min_side) * rng.uniform();
    const double lo = (1.0 - len) * rng.uniform();
    return std::pair{lo, lo + len};
  };
  if (min_side > 0) {
    const auto [x0, x1] = side();
    const auto [y0, y1] = side();
    return {x0, y0, x1, y1};
  }
  double x0 = rng.uniform(), x1 = rng.uniform(), y0 = rng.uniform(), y1 = rng.uniform();
  if (x0 > x1) std::swap(x0, x1);
  if (y0 > y1) std::swap(y0, y1);
  return {x0, y0, x1, y1};
}

inline ObjectTrajectory random_trajectory(Rng& rng, const std::string& label, int frames, double absent_p = 0.0) {
  ObjectTrajectory o{label, {}};
  for (int f = 0; f < frames; ++f)
    o.boxes.push_back(rng.bernoulli(absent_p) ? std::nullopt : std::optional(random_box(rng)));
  return o;
}

/// The micro configuration: F = 2, 4x4 latent, 8 base channels.
inline DenoiserConfig micro_config() {
  DenoiserConfig c;
  c.latent_channels = 3;
  c.latent_height = 4;
  c.latent_width = 4;
  c.frames = 2;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.heads = 2;
  c.text_dim = 8;
  c.fourier_freqs = 2;
  return c;
}

/// Randomizes every zero-initialized tensor (gates, zero conv, biases) so
/// all paths carry gradient.
template <typename T>
void perturb_all(ParameterStore<T>& store, Rng& rng, double scale = 0.3) {
  for (auto& [name, p] : store.all())
    for (auto& v : p.value.vec()) v += static_cast<T>(scale * rng.normal());
}

template <typename T>
ConditionSet<T> full_conditions(const DenoiserConfig& cfg, Rng& rng, int frames, int objects = 2) {
  TextEmbedder emb(cfg.text_dim, 5);
  const Tensor<T> latent = randn<T>(rng, Shape{cfg.latent_channels, cfg.latent_height, cfg.latent_width}, 0.5);
  std::vector<ObjectTrajectory> trajs;
  const char* labels[] = {"red circle", "blue square", "green triangle"};
  for (int i = 0; i < objects; ++i) trajs.push_back(random_trajectory(rng, labels[i % 3], frames, 0.25));
  return make_conditions<T>(emb, "a red circle moving right", &latent, trajs);
}

struct GradCheck {
  double worst = 0;
  std::string where;
  std::size_t checked = 0;
};

/// Central differences on up to `per_tensor` entries of every trainable
/// tensor that received an analytic gradient (entries spread evenly).
/// `loss` must evaluate the scalar at the current store contents.
template <typename T>
GradCheck check_gradients(ParameterStore<T>& store, const std::map<std::string, Tensor<T>>& analytic,
                          const std::function<double()>& loss, double h = 1e-4, std::size_t per_tensor = 0,
                          double floor = 1e-6) {
  GradCheck r;
  for (const auto& [name, g] : analytic) {
    auto& p = store.at(name).value;
    const std::size_t n = p.size();
    const std::size_t count = per_tensor == 0 ? n : std::min(n, per_tensor);
    for (std::size_t k = 0; k < count; ++k) {
      const std::size_t i = count == n ? k : k * n / count;
      const T orig = p[i];
      p[i] = orig + static_cast<T>(h);
      const double lp = loss();
      p[i] = orig - static_cast<T>(h);
      const double lm = loss();
      p[i] = orig;
      const double num = (lp - lm) / (2 * h);
      const double e = rel_err(g[i], num, floor);
      if (e > r.worst) r.worst = e, r.where = name + "[" + std::to_string(i) + "]";
      ++r.checked;
    }
  }
  return r;
}

// ---- naive reference implementations (plain loops, double) ---------------

namespace naive {

using Mat = std::vector<std::vector<double>>;

/// Rows of item b of a rank-3 tensor [B, L, C].
template <typename T>
Mat rows(const Tensor<T>& t, int b) {
  Mat m(static_cast<std::size_t>(t.dim(1)), std::vector<double>(static_cast<std::size_t>(t.dim(2))));
  for (int i = 0; i < t.dim(1); ++i)
    for (int j = 0; j < t.dim(2); ++j) m[i][j] = t.at({b, i, j});
  return m;
}

/// x W (+ bias) with W stored [in, out].
template <typename T>
Mat matmul(const Mat& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
  const int in = w.dim(0), out = w.dim(1);
  Mat y(x.size(), std::vector<double>(static_cast<std::size_t>(out)));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (int o = 0; o < out; ++o) {
      double acc = bias ? static_cast<double>((*bias)[o]) : 0.0;
      for (int i = 0; i < in; ++i) acc += x[r][i] * w.at({i, o});
      y[r][o] = acc;
    }
  return y;
}

template <typename T>
Mat layer_norm(const Mat& x, const Tensor<T>& g, const Tensor<T>& b, double eps = 1e-5) {
  Mat y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    double m = 0, v = 0;
    for (double e : x[r]) m += e;
    m /= static_cast<double>(x[r].size());
    for (double e : x[r]) v += (e - m) * (e - m);
    v /= static_cast<double>(x[r].size());
    for (std::size_t j = 0; j < x[r].size(); ++j) y[r][j] = (x[r][j] - m) / std::sqrt(v + eps) * g[j] + b[j];
  }
  return y;
}

inline Mat softmax_attention(const Mat& q, const Mat& k, const Mat& v, int heads,
                             const std::vector<unsigned char>* mask = nullptr) {
  const std::size_t d = q[0].size(), dv = v[0].size(), dh = d / heads, dvh = dv / heads;
  Mat out(q.size(), std::vector<double>(dv, 0.0));
  for (int h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s(k.size());
      double mx = -1e300;
      for (std::size_t j = 0; j < k.size(); ++j) {
        double acc = 0;
        for (std::size_t c = h * dh; c < (h + 1) * dh; ++c) acc += q[i][c] * k[j][c];
        s[j] = acc / std::sqrt(static_cast<double>(dh));
        if (!mask || (*mask)[j]) mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < k.size(); ++j) z += s[j] = (!mask || (*mask)[j]) ? std::exp(s[j] - mx) : 0.0;
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t c = h * dvh; c < (h + 1) * dvh; ++c) out[i][c] += s[j] / z * v[j][c];
    }
  return out;
}

/// out(Attn(q(x), k(src), v(src))) with the parameters of prefix p.
template <typename T>
Mat attend(const ParameterStore<T>& st, const std::string& p, const Mat& x, const Mat& src, int heads,
           const std::vector<unsigned char>* mask = nullptr) {
  const Mat q = matmul(x, st.at(p + ".q.w").value), k = matmul(src, st.at(p + ".k.w").value),
            v = matmul(src, st.at(p + ".v.w").value);
  return matmul(softmax_attention(q, k, v, heads, mask), st.at(p + ".out.w").value, &st.at(p + ".out.b").value);
}

inline Mat add(const Mat& a, const Mat& b, double scale = 1.0) {
  Mat y = a;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t j = 0; j < a[r].size(); ++j) y[r][j] += scale * b[r][j];
  return y;
}

template <typename T>
double max_diff(const Mat& m, const Tensor<T>& t, int b) {
  double worst = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j)
      worst = std::max(worst, std::abs(m[i][j] - t.at({b, static_cast<int>(i), static_cast<int>(j)})));
  return worst;
}

}  // namespace naive

/// Materializes `specs` and randomizes everything (zeros and gates too).
template <typename T>
ParameterStore<T> random_store(const ParamSpecs& specs, std::uint64_t seed, double scale = 0.3) {
  ParameterStore<T> st;
  Rng rng(seed);
  materialize_into(st, specs, rng);
  perturb_all(st, rng, scale);
  return st;
}

}  // namespace smcd::test
