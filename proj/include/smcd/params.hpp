#pragma once

#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <string_view>

#include "smcd/autograd.hpp"
#include "smcd/error.hpp"
#include "smcd/rng.hpp"
#include "smcd/tensor.hpp"

namespace smcd {

/// Freezing unit. Every denoiser parameter belongs to exactly one group.
enum class Group { spatial_attn, text_cross_attn, temporal_attn, resnet, mim, diim };

inline constexpr std::array<Group, 6> kAllGroups{Group::spatial_attn, Group::text_cross_attn,
                                                 Group::temporal_attn, Group::resnet,
                                                 Group::mim,          Group::diim};

inline std::string_view group_name(Group g) {
  switch (g) {
    case Group::spatial_attn: return "spatial_attn";
    case Group::text_cross_attn: return "text_cross_attn";
    case Group::temporal_attn: return "temporal_attn";
    case Group::resnet: return "resnet";
    case Group::mim: return "mim";
    case Group::diim: return "diim";
  }
  return "?";
}

inline Group group_from_name(std::string_view s) {
  for (Group g : kAllGroups)
    if (group_name(g) == s) return g;
  throw ValidationError("unknown parameter group '" + std::string(s) + "'");
}

using GroupSet = std::set<Group>;

template <typename T>
struct Parameter {
  Tensor<T> value;
  Group group;
};

/// Named parameter tensors plus the set of groups currently trainable.
/// Iteration order is by name, so every traversal is deterministic.
template <typename T>
class ParameterStore {
 public:
  void add(const std::string& name, Tensor<T> value, Group group) {
    SMCD_REQUIRE(!params_.count(name), ConfigError, "duplicate parameter '" + name + "'");
    params_.emplace(name, Parameter<T>{std::move(value), group});
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    SMCD_REQUIRE(it != params_.end(), ShapeError, "missing parameter '" + name + "'");
    return it->second;
  }
  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    SMCD_REQUIRE(it != params_.end(), ShapeError, "missing parameter '" + name + "'");
    return it->second;
  }

  const std::map<std::string, Parameter<T>>& all() const noexcept { return params_; }
  std::map<std::string, Parameter<T>>& all() noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  GroupSet groups() const {
    GroupSet s;
    for (const auto& [_, p] : params_) s.insert(p.group);
    return s;
  }

  void set_trainable(GroupSet groups) { trainable_ = std::move(groups); }
  const GroupSet& trainable() const noexcept { return trainable_; }
  bool is_trainable(Group g) const { return trainable_.count(g) != 0; }

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>(), p.group);
    out.set_trainable(trainable_);
    return out;
  }

  friend bool operator==(const ParameterStore& a, const ParameterStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (const auto& [name, p] : a.params_) {
      auto it = b.params_.find(name);
      if (it == b.params_.end() || it->second.group != p.group || !(it->second.value == p.value)) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
  GroupSet trainable_;
};

/// Creates one graph leaf per parameter on first use and remembers it, so
/// gradients from every use accumulate in a single node.
template <typename T>
class ParamBinder {
 public:
  ParamBinder(Graph<T>& g, const ParameterStore<T>& store) : g_(g), store_(store) {}

  Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    const auto& p = store_.at(name);
    Var<T> v = g_.leaf(p.value, store_.is_trainable(p.group));
    bound_.emplace(name, v);
    return v;
  }

  Graph<T>& graph() noexcept { return g_; }
  const ParameterStore<T>& store() const noexcept { return store_; }

  /// Gradients of every bound trainable parameter that received one.
  std::map<std::string, Tensor<T>> gradients() const {
    std::map<std::string, Tensor<T>> out;
    for (const auto& [name, v] : bound_)
      if (const Tensor<T>* gr = g_.grad_if_any(v.id)) out.emplace(name, *gr);
    return out;
  }

  const std::map<std::string, Var<T>>& bound() const noexcept { return bound_; }

 private:
  Graph<T>& g_;
  const ParameterStore<T>& store_;
  std::map<std::string, Var<T>> bound_;
};

namespace init {

template <typename T>
Tensor<T> normal(Rng& rng, Shape s, double stddev) {
  return rng.normal_tensor<T>(std::move(s), stddev);
}

/// Weight [fan_in, fan_out] with variance 1/fan_in.
template <typename T>
Tensor<T> fan_in(Rng& rng, int in, int out, double gain = 1.0) {
  return rng.normal_tensor<T>(Shape{in, out}, gain / std::sqrt(static_cast<double>(in)));
}

template <typename T>
Tensor<T> zeros(Shape s) {
  return Tensor<T>(std::move(s), T(0));
}

template <typename T>
Tensor<T> ones(Shape s) {
  return Tensor<T>(std::move(s), T(1));
}

}  // namespace init
}  // namespace smcd
