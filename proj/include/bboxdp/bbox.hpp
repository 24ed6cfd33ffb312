#pragma once

#include <algorithm>
#include <string>

#include "bboxdp/common.hpp"
#include "bboxdp/worldsim.hpp"

namespace bxl::annot {

struct PixelPoint {
  int x = 0;
  int y = 0;
  bool operator==(const PixelPoint&) const = default;
};

/// Pixel box, min corner inclusive and max corner exclusive.
struct BBox {
  int x_min = 0, y_min = 0, x_max = 1, y_max = 1;

  bool valid() const {
    return 0 <= x_min && x_min < x_max && x_max <= sim::kSize && 0 <= y_min && y_min < y_max && y_max <= sim::kSize;
  }
  int area() const { return (x_max - x_min) * (y_max - y_min); }
  bool contains(int x, int y) const { return x >= x_min && x < x_max && y >= y_min && y < y_max; }
  double cx() const { return 0.5 * (x_min + x_max); }
  double cy() const { return 0.5 * (y_min + y_max); }
  /// Pixel containing the box centre.
  PixelPoint center_pixel() const { return {(x_min + x_max - 1) / 2, (y_min + y_max - 1) / 2}; }
  bool operator==(const BBox&) const = default;
};

class EmptyMaskError : public Error { using Error::Error; };

inline BBox min_bbox(const sim::Mask& m) {
  int x0 = sim::kSize, y0 = sim::kSize, x1 = -1, y1 = -1;
  for (int y = 0; y < sim::kSize; ++y)
    for (int x = 0; x < sim::kSize; ++x)
      if (m.at(y, x)) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw EmptyMaskError("min_bbox: mask has no pixels");
  return {x0, y0, x1 + 1, y1 + 1};
}

inline double iou(const BBox& a, const BBox& b) {
  const int ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const int iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = static_cast<double>(ix) * iy;
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

inline std::string to_string(const BBox& b) {
  return "(" + std::to_string(b.x_min) + "," + std::to_string(b.y_min) + "," + std::to_string(b.x_max) + "," +
         std::to_string(b.y_max) + ")";
}

}  // namespace bxl::annot
