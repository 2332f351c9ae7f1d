#pragma once

#include <string>
#include <vector>

#include "smcd/encoders.hpp"
#include "smcd/trajectory.hpp"

namespace smcd {

/// Latent of the conditioning image x0 = E(v0), [C, H, W].
template <typename T>
struct ImageCondition {
  Tensor<T> latent;
  bool present = false;
};

/// Text, conditioning image and box trajectories. An absent element is
/// skipped by the denoiser (text falls back to the learned null embedding).
template <typename T>
struct ConditionSet {
  TextEmbedding<T> text;
  ImageCondition<T> image;
  std::vector<ObjectTrajectory> trajectories;
  std::vector<Tensor<T>> label_embeddings;  // one [D] vector per trajectory
  bool boxes_present = false;

  bool has_boxes() const { return boxes_present && !trajectories.empty(); }
  bool has_image() const { return image.present; }
  bool has_text() const { return !text.is_null; }

  ConditionSet without_text() const {
    ConditionSet c = *this;
    c.text = TextEmbedding<T>::null();
    return c;
  }
  ConditionSet without_image() const {
    ConditionSet c = *this;
    c.image = ImageCondition<T>{};
    return c;
  }
  ConditionSet without_boxes() const {
    ConditionSet c = *this;
    c.boxes_present = false;
    return c;
  }
};

template <typename T>
ConditionSet<T> make_conditions(const TextEmbedder& embedder, const std::string& caption,
                                const Tensor<T>* image_latent,
                                const std::vector<ObjectTrajectory>& trajectories) {
  SMCD_REQUIRE(trajectories.size() <= static_cast<std::size_t>(kMaxObjects), ConfigError,
               "at most " + std::to_string(kMaxObjects) + " objects per scene");
  ConditionSet<T> c;
  c.text = embedder.embed_text<T>(caption);
  if (image_latent) c.image = ImageCondition<T>{*image_latent, true};
  c.trajectories = trajectories;
  for (const auto& o : trajectories) c.label_embeddings.push_back(embedder.embed_label<T>(o.label));
  c.boxes_present = !trajectories.empty();
  return c;
}

}  // namespace smcd
