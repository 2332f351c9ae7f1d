#pragma once

#include <optional>
#include <string>
#include <vector>

#include "smcd/error.hpp"

namespace smcd {

/// Axis-aligned box in normalized image coordinates.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  bool valid() const {
    auto in01 = [](double v) { return v >= 0.0 && v <= 1.0; };
    return in01(x_min) && in01(y_min) && in01(x_max) && in01(y_max) && x_min <= x_max && y_min <= y_max;
  }
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }

  /// Reflection about the vertical center line x = 0.5.
  BoundingBox mirrored_x() const { return {1.0 - x_max, y_min, 1.0 - x_min, y_max}; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// One object's label and its per-frame box; nullopt marks frames where the
/// object is absent.
struct ObjectTrajectory {
  std::string label;
  std::vector<std::optional<BoundingBox>> boxes;

  int frames() const { return static_cast<int>(boxes.size()); }
  bool present(int f) const { return boxes.at(static_cast<std::size_t>(f)).has_value(); }

  ObjectTrajectory mirrored_x() const {
    ObjectTrajectory out{label, {}};
    for (const auto& b : boxes) out.boxes.push_back(b ? std::optional(b->mirrored_x()) : std::nullopt);
    return out;
  }

  /// Restriction to frames [first, first + count).
  ObjectTrajectory slice(int first, int count) const {
    SMCD_REQUIRE(first >= 0 && first + count <= frames(), ContractViolation, "trajectory slice out of range");
    return {label, {boxes.begin() + first, boxes.begin() + first + count}};
  }

  friend bool operator==(const ObjectTrajectory&, const ObjectTrajectory&) = default;
};

inline constexpr int kMaxObjects = 8;

inline std::vector<ObjectTrajectory> mirrored_x(const std::vector<ObjectTrajectory>& set) {
  std::vector<ObjectTrajectory> out;
  for (const auto& o : set) out.push_back(o.mirrored_x());
  return out;
}

}  // namespace smcd
