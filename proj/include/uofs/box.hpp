#pragma once

#include <algorithm>
#include <array>
#include <cmath>

namespace uofs {

// Axis-aligned rectangle in pixel coordinates, corners (x1, y1) and (x2, y2).
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  Box flipped(double image_width) const { return {image_width - x2, y1, image_width - x1, y2}; }

  friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

inline double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

// Regression target (dx, dy, dw, dh) relative to an anchor box.
using BoxDelta = std::array<double, 4>;

// Largest log-scale step decode accepts; larger values are clamped.
inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

inline BoxDelta encode_box(const Box& target, const Box& anchor) {
  return {(target.cx() - anchor.cx()) / anchor.width(),
          (target.cy() - anchor.cy()) / anchor.height(),
          std::log(target.width() / anchor.width()),
          std::log(target.height() / anchor.height())};
}

struct DecodedBox {
  Box box;
  bool clamped = false;  // width or height fell below one pixel
};

inline DecodedBox decode_box(const Box& anchor, const BoxDelta& t) {
  const double cx = anchor.cx() + t[0] * anchor.width();
  const double cy = anchor.cy() + t[1] * anchor.height();
  double w = anchor.width() * std::exp(std::min(t[2], kMaxLogScale));
  double h = anchor.height() * std::exp(std::min(t[3], kMaxLogScale));
  DecodedBox out;
  if (!(w >= 1.0)) {
    w = 1.0;
    out.clamped = true;
  }
  if (!(h >= 1.0)) {
    h = 1.0;
    out.clamped = true;
  }
  out.box = {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  return out;
}

inline Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
          std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

}  // namespace uofs
