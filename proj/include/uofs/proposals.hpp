#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "uofs/box.hpp"
#include "uofs/datamodel.hpp"
#include "uofs/rng.hpp"

namespace uofs {

struct SamplerConfig {
  int n_pos = 16;
  int n_neg = 48;
  double jitter = 0.15;  // relative shift/scale of positive copies
  double min_size = 12;  // negative box side range, pixels
  double max_size = 48;
  double hard_negative_fraction = 0.25;  // negatives drawn next to ground truth
  std::uint64_t seed = 0;
};

struct Proposal {
  Box box;
  bool positive = false;
  int class_id = kUnlabeled;          // set for positives
  std::optional<int> matched_gt;      // instance index of the best-overlapping box
  double iou_with_gt = 0;
};

// Exact-form test of IoU >= 0.5: 3 * inter >= area(a) + area(b).
inline bool iou_at_least_half(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  return inter > 0 && 3.0 * inter >= a.area() + b.area();
}

// Proposal coordinates live on a 1/8 px lattice so areas and the IoU
// threshold test are exact in double precision.
inline double snap(double v) { return std::round(v * 8.0) / 8.0; }
inline Box snap(const Box& b) { return {snap(b.x1), snap(b.y1), snap(b.x2), snap(b.y2)}; }

namespace detail {

struct GtMatch {
  int index = -1;
  double iou = 0;
  bool positive = false;
};

inline GtMatch best_match(const Box& box, const std::vector<const Instance*>& gts) {
  GtMatch m;
  for (int i = 0; i < int(gts.size()); ++i) {
    const double v = iou(box, gts[i]->box);
    if (v > m.iou || (m.index < 0 && v > 0)) {
      m.iou = v;
      m.index = i;
    }
  }
  if (m.index >= 0) m.positive = iou_at_least_half(box, gts[m.index]->box);
  return m;
}

}  // namespace detail

// Positives are the labeled boxes plus jittered copies (IoU >= 0.5); negatives
// are random boxes rejected until their best IoU with every labeled box is
// below 0.5. `stream` distinguishes images sharing one sampler seed.
inline std::vector<Proposal> sample_proposals(const AnnotatedImage& image, const SamplerConfig& cfg,
                                              std::uint64_t stream = 0) {
  Rng rng(mix_seed({cfg.seed, stream, 0x70726f70ULL}));
  const double W = image.width(), H = image.height();
  std::vector<const Instance*> gts;
  std::vector<int> gt_index;
  for (int i = 0; i < int(image.instances.size()); ++i)
    if (image.instances[i].labeled()) {
      gts.push_back(&image.instances[i]);
      gt_index.push_back(i);
    }

  std::vector<Proposal> out;
  auto push = [&](const Box& b) {
    const auto m = detail::best_match(b, gts);
    Proposal p;
    p.box = b;
    p.iou_with_gt = m.iou;
    if (m.index >= 0) p.matched_gt = gt_index[m.index];
    p.positive = m.positive;
    if (p.positive) p.class_id = gts[m.index]->class_id;
    out.push_back(p);
    return p.positive;
  };

  for (const auto* g : gts) push(g->box);
  for (int made = int(gts.size()), tries = 0; !gts.empty() && made < cfg.n_pos && tries < cfg.n_pos * 50; ++tries) {
    const Box& g = gts[made % gts.size()]->box;
    const double s = std::exp(rng.uniform(-cfg.jitter, cfg.jitter));
    const double t = std::exp(rng.uniform(-cfg.jitter, cfg.jitter));
    const double cx = g.cx() + rng.uniform(-cfg.jitter, cfg.jitter) * g.width();
    const double cy = g.cy() + rng.uniform(-cfg.jitter, cfg.jitter) * g.height();
    const double w = g.width() * s, h = g.height() * t;
    const Box b = snap(clip_box({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}, W, H));
    if (!(b.width() >= 1 && b.height() >= 1)) continue;
    const auto m = detail::best_match(b, gts);
    if (!m.positive) continue;
    push(b);
    ++made;
  }

  const int n_hard = gts.empty() ? 0 : int(std::lround(cfg.n_neg * cfg.hard_negative_fraction));
  int made = 0;
  for (int tries = 0; made < cfg.n_neg && tries < cfg.n_neg * 200; ++tries) {
    Box b;
    if (made < n_hard) {
      // Half are shifted neighbours of an object, half are crops of its
      // interior, which the dense test-time grid proposes in quantity.
      const Box& g = gts[rng.uniform_int(0, gts.size() - 1)]->box;
      const bool inner = rng.bernoulli(0.5);
      const double lo = inner ? -1.2 : -0.4, hi = inner ? -0.3 : 0.4, shift = inner ? 0.3 : 1.0;
      const double w = g.width() * std::exp(rng.uniform(lo, hi));
      const double h = g.height() * std::exp(rng.uniform(lo, hi));
      const double cx = g.cx() + rng.uniform(-shift, shift) * g.width();
      const double cy = g.cy() + rng.uniform(-shift, shift) * g.height();
      b = {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
    } else {
      const double w = rng.uniform(cfg.min_size, std::min(cfg.max_size, W));
      const double h = std::clamp(w * std::exp(rng.uniform(-0.5, 0.5)), 1.0, H);
      const double x1 = rng.uniform(0, W - w), y1 = rng.uniform(0, std::max(0.0, H - h));
      b = {x1, y1, x1 + w, y1 + h};
    }
    b = snap(clip_box(b, W, H));
    if (!(b.width() >= 1 && b.height() >= 1)) continue;
    if (detail::best_match(b, gts).positive) continue;
    push(b);
    ++made;
  }
  return out;
}

// Dense sliding boxes: square boxes of each scale on a stride of scale * step_frac.
inline std::vector<Box> dense_grid(int width, int height, const std::vector<double>& scales, double step_frac) {
  std::vector<Box> boxes;
  for (double s : scales) {
    if (s > width || s > height) continue;
    const double step = std::max(1.0, s * step_frac);
    const int nx = int(std::floor((width - s) / step)) + 1;
    const int ny = int(std::floor((height - s) / step)) + 1;
    const double ox = 0.5 * (width - s - (nx - 1) * step);
    const double oy = 0.5 * (height - s - (ny - 1) * step);
    for (int j = 0; j < ny; ++j)
      for (int i = 0; i < nx; ++i) {
        const double x1 = ox + i * step, y1 = oy + j * step;
        boxes.push_back(snap(Box{x1, y1, x1 + s, y1 + s}));
      }
  }
  return boxes;
}

}  // namespace uofs
