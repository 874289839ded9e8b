#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "uofs/image.hpp"

namespace uofs {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr std::array<Rgb, 6> kSeriesColors = {
    Rgb{31, 119, 180}, Rgb{255, 127, 14}, Rgb{44, 160, 44}, Rgb{214, 39, 40}, Rgb{148, 103, 189}, Rgb{140, 86, 75}};

inline void fill_rect(RgbImage& img, int x0, int y0, int x1, int y1, Rgb c) {
  x0 = std::max(x0, 0);
  y0 = std::max(y0, 0);
  x1 = std::min(x1, img.width);
  y1 = std::min(y1, img.height);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      for (int k = 0; k < 3; ++k) img.at(x, y, k) = c[k];
}

struct Histogram {
  double lo = 0, hi = 1;
  std::vector<int> counts;
};

inline Histogram histogram(const std::vector<double>& v, double lo, double hi, int bins) {
  Histogram h{lo, hi, std::vector<int>(bins, 0)};
  if (!(hi > lo)) hi = lo + 1;
  for (double x : v) {
    int b = int(std::floor((x - lo) / (hi - lo) * bins));
    h.counts[std::clamp(b, 0, bins - 1)]++;
  }
  return h;
}

// Overlaid normalized histograms, one color per series, on a white canvas.
inline RgbImage plot_histograms(const std::vector<Histogram>& series, int width = 480, int height = 240) {
  RgbImage img(width, height, {255, 255, 255});
  if (series.empty()) return img;
  const int bins = int(series[0].counts.size());
  const int margin = 10;
  const int plot_w = width - 2 * margin, plot_h = height - 2 * margin;
  double peak = 0;
  for (const auto& h : series) {
    int total = 0;
    for (int c : h.counts) total += c;
    for (int c : h.counts)
      if (total) peak = std::max(peak, double(c) / total);
  }
  if (peak <= 0) peak = 1;
  const int sub = std::max(1, plot_w / bins / int(series.size()));
  for (std::size_t s = 0; s < series.size(); ++s) {
    int total = 0;
    for (int c : series[s].counts) total += c;
    if (!total) continue;
    for (int b = 0; b < bins; ++b) {
      const int bar = int(std::round(double(series[s].counts[b]) / total / peak * plot_h));
      const int x0 = margin + b * plot_w / bins + int(s) * sub;
      fill_rect(img, x0, margin + plot_h - bar, x0 + sub, margin + plot_h, kSeriesColors[s % kSeriesColors.size()]);
    }
  }
  fill_rect(img, margin, margin + plot_h, margin + plot_w, margin + plot_h + 1, {0, 0, 0});
  return img;
}

// Blue-to-red map for values in [0, 1].
inline Rgb heat_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  return {std::uint8_t(std::lround(255 * v)), std::uint8_t(std::lround(64 * (1 - std::abs(2 * v - 1)))),
          std::uint8_t(std::lround(255 * (1 - v)))};
}

// Nearest-neighbor upscale of a rows x cols grid blended over an RGB crop.
inline RgbImage heatmap_overlay(const RgbImage& crop, const std::vector<double>& grid, int rows, int cols,
                                double alpha = 0.5) {
  RgbImage out = crop;
  for (int y = 0; y < crop.height; ++y)
    for (int x = 0; x < crop.width; ++x) {
      const int gy = std::min(rows - 1, y * rows / crop.height);
      const int gx = std::min(cols - 1, x * cols / crop.width);
      const Rgb c = heat_color(grid[gy * cols + gx]);
      for (int k = 0; k < 3; ++k)
        out.at(x, y, k) = std::uint8_t(std::lround((1 - alpha) * crop.at(x, y, k) + alpha * c[k]));
    }
  return out;
}

// Images side by side with a gap.
inline RgbImage hconcat(const std::vector<RgbImage>& parts, int gap = 4) {
  int w = 0, h = 0;
  for (const auto& p : parts) {
    w += p.width + gap;
    h = std::max(h, p.height);
  }
  RgbImage out(std::max(0, w - gap), h, {255, 255, 255});
  int x0 = 0;
  for (const auto& p : parts) {
    for (int y = 0; y < p.height; ++y)
      for (int x = 0; x < p.width; ++x)
        for (int k = 0; k < 3; ++k) out.at(x0 + x, y, k) = p.at(x, y, k);
    x0 += p.width + gap;
  }
  return out;
}

}  // namespace uofs
