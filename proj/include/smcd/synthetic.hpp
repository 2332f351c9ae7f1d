#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include "smcd/encoders.hpp"
#include "smcd/parallel.hpp"
#include "smcd/rng.hpp"
#include "smcd/trajectory.hpp"

namespace smcd {

struct PaletteColor {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

// Saturated colors only; backgrounds are gray, so segmentation is unambiguous.
inline constexpr std::array<PaletteColor, 8> kPalette{{{"red", {255, 0, 0}},
                                                      {"green", {0, 255, 0}},
                                                      {"blue", {0, 0, 255}},
                                                      {"yellow", {255, 255, 0}},
                                                      {"magenta", {255, 0, 255}},
                                                      {"cyan", {0, 255, 255}},
                                                      {"white", {255, 255, 255}},
                                                      {"orange", {255, 128, 0}}}};

inline int palette_index(const std::string& name) {
  for (std::size_t i = 0; i < kPalette.size(); ++i)
    if (name == kPalette[i].name) return static_cast<int>(i);
  throw ConfigError("unknown palette color '" + name + "'");
}

enum class ShapeKind { circle, square, triangle };
inline constexpr std::array<ShapeKind, 3> kShapes{ShapeKind::circle, ShapeKind::square, ShapeKind::triangle};

inline std::string shape_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::square: return "square";
    case ShapeKind::triangle: return "triangle";
  }
  return "?";
}

/// Per-frame displacement of the object center, in canvas fractions.
/// linear: (vx f, vy f). sinusoidal: horizontal drift vx f plus a vertical
/// oscillation amplitude * sin(2 pi f / period).
struct Motion {
  enum Kind { linear, sinusoidal } kind = linear;
  double vx = 0, vy = 0;
  double amplitude = 0, period = 8;

  std::array<double, 2> offset(int f) const {
    if (kind == linear) return {vx * f, vy * f};
    return {vx * f, amplitude * std::sin(2.0 * std::numbers::pi * f / period)};
  }

  std::string direction() const {
    if (kind == sinusoidal) return vx < 0 ? "in a wave to the left" : "in a wave to the right";
    if (std::abs(vx) >= std::abs(vy)) return vx < 0 ? "left" : "right";
    return vy < 0 ? "up" : "down";
  }
};

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  int color = 0;       // palette index
  double size = 0.25;  // side / diameter as a canvas fraction
  double x = 0.5, y = 0.5;  // center at frame 0
  Motion motion;

  std::string label() const { return std::string(kPalette.at(static_cast<std::size_t>(color)).name) + " " + shape_name(shape); }
};

/// Flat gray, or a linear ramp between two gray levels along `angle`.
struct Background {
  enum Kind { flat, gradient } kind = flat;
  double level0 = 0.3, level1 = 0.3;
  double angle = 0;

  double at(double u, double v) const {
    if (kind == flat) return level0;
    const double c = std::cos(angle), s = std::sin(angle);
    const double t = ((u - 0.5) * c + (v - 0.5) * s) / (std::abs(c) + std::abs(s)) + 0.5;
    return level0 + (level1 - level0) * t;
  }
};

struct SceneSpec {
  int canvas = 32;
  Background background;
  std::vector<SceneObject> objects;
  int episode_length = 9;
};

/// Integer pixel box [left, right) x [top, bottom) of an object at a frame.
/// Geometry is snapped to the pixel grid, so the analytic box and the
/// rasterized extent coincide. Triangles get an odd width so the apex sits
/// on a pixel center.
struct PixelBox {
  int left, top, right, bottom;
};

inline PixelBox object_pixel_box(const SceneObject& o, int canvas, int frame) {
  int w = static_cast<int>(std::lround(o.size * canvas));
  if (o.shape == ShapeKind::triangle && w % 2 == 0) --w;
  w = std::max(w, 1);
  const auto off = o.motion.offset(frame);
  const int left = static_cast<int>(std::lround((o.x + off[0]) * canvas - w / 2.0));
  const int top = static_cast<int>(std::lround((o.y + off[1]) * canvas - w / 2.0));
  return {left, top, left + w, top + w};
}

inline BoundingBox object_box(const SceneObject& o, int canvas, int frame) {
  const PixelBox p = object_pixel_box(o, canvas, frame);
  const double s = canvas;
  return {p.left / s, p.top / s, p.right / s, p.bottom / s};
}

/// Rejects specs whose objects leave the canvas (a 1-pixel margin) or that
/// reuse a color.
inline void validate_scene(const SceneSpec& spec) {
  SMCD_REQUIRE(spec.canvas >= 4, ConfigError, "scene canvas must be at least 4 pixels");
  SMCD_REQUIRE(spec.episode_length >= 1, ConfigError, "scene episode must have at least one frame");
  SMCD_REQUIRE(spec.objects.size() <= static_cast<std::size_t>(kMaxObjects), ConfigError,
               "scene has more than " + std::to_string(kMaxObjects) + " objects");
  std::set<int> colors;
  for (std::size_t i = 0; i < spec.objects.size(); ++i) {
    const auto& o = spec.objects[i];
    const std::string where = "objects[" + std::to_string(i) + "]";
    SMCD_REQUIRE(o.color >= 0 && o.color < static_cast<int>(kPalette.size()), ConfigError, where + ": bad color");
    SMCD_REQUIRE(colors.insert(o.color).second, ConfigError, where + ": color reused within a scene");
    SMCD_REQUIRE(o.size > 0, ConfigError, where + ": size must be positive");
    SMCD_REQUIRE(o.motion.kind == Motion::linear || o.motion.period > 0, ConfigError, where + ": period must be positive");
    for (int f = 0; f < spec.episode_length; ++f) {
      const PixelBox p = object_pixel_box(o, spec.canvas, f);
      SMCD_REQUIRE(p.left >= 1 && p.top >= 1 && p.right <= spec.canvas - 1 && p.bottom <= spec.canvas - 1, ConfigError,
                   where + " leaves the canvas at frame " + std::to_string(f));
    }
  }
}

inline bool covers(const SceneObject& o, const PixelBox& b, double px, double py) {
  switch (o.shape) {
    case ShapeKind::square: return px >= b.left && px <= b.right && py >= b.top && py <= b.bottom;
    case ShapeKind::circle: {
      const double r = (b.right - b.left) / 2.0;
      const double dx = px - (b.left + r), dy = py - (b.top + r);
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::triangle: {
      // apex at the top center, base along the bottom edge
      const double w = b.right - b.left, h = b.bottom - b.top;
      if (py < b.top || py > b.bottom) return false;
      return std::abs(px - (b.left + w / 2.0)) <= (w / 2.0) * (py - b.top) / h;
    }
  }
  return false;
}

struct RenderedFrame {
  Image image;
  std::vector<BoundingBox> boxes;  // one per object, declaration order
};

/// Pure in (spec, frame): background, then shapes back-to-front. A pixel is
/// filled when its center lies inside the shape.
inline RenderedFrame render_frame(const SceneSpec& spec, int frame) {
  SMCD_REQUIRE(frame >= 0 && frame < spec.episode_length, ContractViolation, "render_frame: frame out of range");
  const int s = spec.canvas;
  RenderedFrame out{Image(s, s), {}};
  for (int y = 0; y < s; ++y)
    for (int x = 0; x < s; ++x) {
      const std::uint8_t g = to_byte(spec.background.at((x + 0.5) / s, (y + 0.5) / s));
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = g;
    }
  for (const auto& o : spec.objects) {
    const PixelBox b = object_pixel_box(o, s, frame);
    const auto& rgb = kPalette.at(static_cast<std::size_t>(o.color)).rgb;
    for (int y = std::max(0, b.top); y < std::min(s, b.bottom); ++y)
      for (int x = std::max(0, b.left); x < std::min(s, b.right); ++x)
        if (covers(o, b, x + 0.5, y + 0.5))
          for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = rgb[c];
    out.boxes.push_back(object_box(o, s, frame));
  }
  return out;
}

inline std::string caption(const SceneSpec& spec) {
  std::string out;
  for (const auto& o : spec.objects) {
    if (!out.empty()) out += " and ";
    out += "a " + std::string(kPalette.at(static_cast<std::size_t>(o.color)).name) + " " + shape_name(o.shape) +
           " moving " + o.motion.direction();
  }
  return out;
}

/// One episode. frames[0] is the conditioning image v0; frames[1..F] the clip.
struct Sample {
  SceneSpec spec;
  std::vector<Image> frames;
  std::vector<ObjectTrajectory> trajectories;  // over the whole episode
  std::string caption;

  std::vector<Image> clip(int f) const {
    SMCD_REQUIRE(f + 1 <= static_cast<int>(frames.size()), ContractViolation, "episode shorter than clip + 1");
    return {frames.begin() + 1, frames.begin() + 1 + f};
  }
  std::vector<ObjectTrajectory> clip_trajectories(int f) const {
    std::vector<ObjectTrajectory> out;
    for (const auto& o : trajectories) out.push_back(o.slice(1, f));
    return out;
  }
  const Image& first_frame() const { return frames.at(0); }
};

inline Sample render_sample(const SceneSpec& spec) {
  validate_scene(spec);
  Sample s{spec, {}, {}, caption(spec)};
  for (const auto& o : spec.objects) s.trajectories.push_back({o.label(), {}});
  for (int f = 0; f < spec.episode_length; ++f) {
    auto r = render_frame(spec, f);
    s.frames.push_back(std::move(r.image));
    for (std::size_t i = 0; i < r.boxes.size(); ++i) s.trajectories[i].boxes.emplace_back(r.boxes[i]);
  }
  return s;
}

/// Ranges the dataset generator draws from, uniformly.
struct SceneDistribution {
  int canvas = 32;
  int episode_length = 9;
  int min_objects = 1;
  int max_objects = 2;
  double min_size = 0.25, max_size = 0.4;
  double min_speed = 0.02, max_speed = 0.045;  // canvas fractions per frame
  double min_amplitude = 0.05, max_amplitude = 0.12;
  double min_period = 6, max_period = 12;
  double min_level = 0.05, max_level = 0.55;  // background gray range
  int max_attempts = 1000;
};

/// True when two objects' boxes (grown by one pixel) meet in any frame.
/// Generated scenes keep objects apart so no shape is ever occluded.
inline bool objects_touch(const SceneSpec& spec) {
  for (int f = 0; f < spec.episode_length; ++f)
    for (std::size_t i = 0; i < spec.objects.size(); ++i)
      for (std::size_t j = i + 1; j < spec.objects.size(); ++j) {
        const PixelBox a = object_pixel_box(spec.objects[i], spec.canvas, f);
        const PixelBox b = object_pixel_box(spec.objects[j], spec.canvas, f);
        if (a.left <= b.right && b.left <= a.right && a.top <= b.bottom && b.top <= a.bottom) return true;
      }
  return false;
}

inline SceneSpec draw_scene(const SceneDistribution& d, Rng& rng) {
  SceneSpec spec;
  spec.canvas = d.canvas;
  spec.episode_length = d.episode_length;
  if (rng.bernoulli(0.5)) {
    spec.background = {Background::flat, rng.uniform(d.min_level, d.max_level), 0, 0};
    spec.background.level1 = spec.background.level0;
  } else {
    spec.background = {Background::gradient, rng.uniform(d.min_level, d.max_level),
                       rng.uniform(d.min_level, d.max_level), rng.uniform(0, 2 * std::numbers::pi)};
  }
  const int n = rng.uniform_int(d.min_objects, d.max_objects);
  // Objects (shape, color, size, motion) are redrawn every 50 failed
  // placements, so incompatible motion pairs cannot stall the generator.
  for (int attempt = 0; attempt < d.max_attempts; ++attempt) {
    if (attempt % 50 == 0) {
      spec.objects.clear();
      std::vector<int> colors(kPalette.size());
      for (std::size_t i = 0; i < colors.size(); ++i) colors[i] = static_cast<int>(i);
      for (int i = 0; i < n; ++i) {
        std::swap(colors[static_cast<std::size_t>(i)], colors[static_cast<std::size_t>(rng.uniform_int(i, 7))]);
        SceneObject o;
        o.shape = kShapes[static_cast<std::size_t>(rng.uniform_int(0, 2))];
        o.color = colors[static_cast<std::size_t>(i)];
        o.size = rng.uniform(d.min_size, d.max_size);
        const double speed = rng.uniform(d.min_speed, d.max_speed);
        if (rng.bernoulli(0.5)) {
          o.motion.kind = Motion::linear;
          const double a = rng.uniform(0, 2 * std::numbers::pi);
          o.motion.vx = speed * std::cos(a);
          o.motion.vy = speed * std::sin(a);
        } else {
          o.motion.kind = Motion::sinusoidal;
          o.motion.vx = rng.bernoulli(0.5) ? speed : -speed;
          o.motion.amplitude = rng.uniform(d.min_amplitude, d.max_amplitude);
          o.motion.period = rng.uniform(d.min_period, d.max_period);
        }
        spec.objects.push_back(o);
      }
    }
    for (auto& o : spec.objects) {
      o.x = rng.uniform(0.1, 0.9);
      o.y = rng.uniform(0.1, 0.9);
    }
    try {
      validate_scene(spec);
    } catch (const ConfigError&) {
      continue;
    }
    if (!objects_touch(spec)) return spec;
  }
  throw ConfigError("scene distribution: no valid placement after " + std::to_string(d.max_attempts) + " attempts");
}

/// Deterministic dataset: sample i depends only on (seed, i).
inline std::vector<Sample> make_dataset(int count, std::uint64_t seed, const SceneDistribution& dist = {}) {
  SMCD_REQUIRE(count >= 1, ConfigError, "dataset count must be >= 1");
  std::vector<Sample> out(static_cast<std::size_t>(count));
  parallel_for(count, [&](int i) {
    Rng rng = Rng::substream(seed, static_cast<std::uint64_t>(i));
    out[static_cast<std::size_t>(i)] = render_sample(draw_scene(dist, rng));
  });
  return out;
}

}  // namespace smcd
