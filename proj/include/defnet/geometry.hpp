#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include <json.hpp>

#include "defnet/error.hpp"
#include "defnet/tensor.hpp"

namespace defnet {

/// Axis-aligned box in continuous pixel coordinates; area is (x2-x1)*(y2-y1).
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool finite() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2);
  }
  bool valid() const { return finite() && x1 < x2 && y1 < y2; }
  bool operator==(const BoundingBox&) const = default;

  std::string str() const {
    return "[" + format_double(x1) + "," + format_double(y1) + "," + format_double(x2) + "," +
           format_double(y2) + "]";
  }
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline BoundingBox clamp_box(const BoundingBox& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height), std::clamp(b.x2, 0.0, width),
          std::clamp(b.y2, 0.0, height)};
}

inline nlohmann::json box_to_json(const BoundingBox& b) { return nlohmann::json::array({b.x1, b.y1, b.x2, b.y2}); }

inline BoundingBox box_from_json(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 4, ErrorCode::kSchemaViolation, "box must be [x1,y1,x2,y2]");
  for (const auto& v : j) require(v.is_number(), ErrorCode::kSchemaViolation, "box coordinates must be numbers");
  const BoundingBox b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
  require(b.valid(), ErrorCode::kSchemaViolation, "box " + b.str() + " needs x1<x2 and y1<y2");
  return b;
}

}  // namespace defnet
