#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "uofs/datamodel.hpp"
#include "uofs/detector.hpp"
#include "uofs/evaluation.hpp"
#include "uofs/plot.hpp"
#include "uofs/png_io.hpp"
#include "uofs/rng.hpp"

namespace uofs {

enum class DiagGroup { kFgBase, kFgNovel, kBgTrue, kBgUnlabeled };
inline constexpr std::array<DiagGroup, 4> kDiagGroups = {DiagGroup::kFgBase, DiagGroup::kFgNovel, DiagGroup::kBgTrue,
                                                         DiagGroup::kBgUnlabeled};

inline std::string group_name(DiagGroup g) {
  switch (g) {
    case DiagGroup::kFgBase: return "fg_base";
    case DiagGroup::kFgNovel: return "fg_novel";
    case DiagGroup::kBgTrue: return "bg_true";
    default: return "bg_unlabeled";
  }
}

struct DiagConfig {
  int bg_boxes_per_image = 6;
  double bg_min_size = 16, bg_max_size = 32;
  int heatmap_samples = 8;
  int histogram_bins = 30;
  std::uint64_t seed = 0;
};

struct GroupStats {
  std::vector<double> norms;    // |f_agn|
  std::vector<double> cosines;  // cosine of f_spe to its class prototype, or the best one
  double mean_norm() const {
    double s = 0;
    for (double v : norms) s += v;
    return norms.empty() ? 0.0 : s / norms.size();
  }
};

struct DiagReport {
  std::map<DiagGroup, GroupStats> groups;
  std::optional<double> silhouette_base, silhouette_all;
  std::vector<std::vector<double>> heatmap_ranges;  // per sample: min/max of every mask
};

// Boxes with zero overlap with every instance, labeled or not.
inline std::vector<Box> background_boxes(const AnnotatedImage& img, const DiagConfig& cfg, std::uint64_t stream) {
  Rng rng(stream);
  std::vector<Box> out;
  const int W = img.width(), H = img.height();
  for (int tries = 0; tries < 50 * cfg.bg_boxes_per_image && int(out.size()) < cfg.bg_boxes_per_image; ++tries) {
    const double w = rng.uniform(cfg.bg_min_size, cfg.bg_max_size);
    const double h = rng.uniform(cfg.bg_min_size, cfg.bg_max_size);
    if (w > W || h > H) continue;
    const double x = rng.uniform(0.0, W - w), y = rng.uniform(0.0, H - h);
    const Box b = snap(Box{x, y, x + w, y + h});
    bool clear = b.x2 <= W && b.y2 <= H;
    for (const auto& inst : img.instances) clear = clear && intersection_area(b, inst.box) == 0.0;
    if (clear) out.push_back(b);
  }
  return out;
}

template <class T>
DiagReport diagnose(const Detector<T>& model, const Dataset& ds, const std::set<int>& novel, const DiagConfig& cfg) {
  DiagReport rep;
  for (auto g : kDiagGroups) rep.groups[g];
  std::set<int> base(model.class_ids.begin(), model.class_ids.end());
  for (int c : novel) base.erase(c);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    std::vector<Box> boxes;
    std::vector<DiagGroup> group;
    std::vector<int> cls;
    for (const auto& inst : img.instances) {
      DiagGroup g;
      if (inst.class_id == kUnlabeled)
        g = DiagGroup::kBgUnlabeled;
      else if (novel.contains(inst.class_id))
        g = DiagGroup::kFgNovel;
      else
        g = DiagGroup::kFgBase;
      boxes.push_back(inst.box);
      group.push_back(g);
      cls.push_back(inst.class_id);
    }
    for (const Box& b : background_boxes(img, cfg, mix_seed({cfg.seed, std::uint64_t(i), 0x6267ULL}))) {
      boxes.push_back(b);
      group.push_back(DiagGroup::kBgTrue);
      cls.push_back(kUnlabeled);
    }
    if (boxes.empty()) continue;
    const auto pass = model.roi_forward(model.extract_feature_map(model.to_input(img.image)), boxes, false);
    for (std::size_t r = 0; r < boxes.size(); ++r) {
      auto& gs = rep.groups[group[r]];
      const Vec<T> fa = pass.f_agn().col(r), fs = pass.f_spe().col(r);
      gs.norms.push_back(double(fa.norm()));
      const int nc = model.n_classes();
      const int idx = model.class_index(cls[r]);
      if (fs.norm() > T(0) && nc > 0) {
        const Vec<T> c = (model.head.W_cls.leftCols(nc).colwise().normalized().transpose() * fs) / fs.norm();
        gs.cosines.push_back(idx >= 0 ? double(c[idx]) : double(c.maxCoeff()));
      }
    }
    if (int(rep.heatmap_ranges.size()) < cfg.heatmap_samples && pass.layout.masked) {
      std::vector<double> ranges;
      for (const auto& b : pass.branches) {
        ranges.push_back(double(b.mask.minCoeff()));
        ranges.push_back(double(b.mask.maxCoeff()));
      }
      rep.heatmap_ranges.push_back(ranges);
    }
  }
  std::vector<std::vector<double>> f;
  std::vector<int> l;
  gt_features(model, ds, base, f, l, true);
  try {
    rep.silhouette_base = silhouette(f, l).value;
  } catch (const Error&) {
  }
  std::set<int> all = base;
  all.insert(novel.begin(), novel.end());
  f.clear();
  l.clear();
  gt_features(model, ds, all, f, l, true);
  try {
    rep.silhouette_all = silhouette(f, l).value;
  } catch (const Error&) {
  }
  return rep;
}

inline nlohmann::json to_json(const DiagReport& rep, int bins) {
  using nlohmann::json;
  json groups = json::object();
  double hi = 0;
  for (const auto& [g, s] : rep.groups)
    for (double v : s.norms) hi = std::max(hi, v);
  for (const auto& [g, s] : rep.groups) {
    const auto h = histogram(s.norms, 0.0, hi > 0 ? hi : 1.0, bins);
    const auto hc = histogram(s.cosines, -1.0, 1.0, bins);
    groups[group_name(g)] = {{"count", s.norms.size()},
                             {"mean_norm", s.mean_norm()},
                             {"norm_histogram", {{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}}},
                             {"cosine_histogram", {{"lo", -1.0}, {"hi", 1.0}, {"counts", hc.counts}}}};
  }
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  return {{"groups", groups},
          {"silhouette", {{"base", opt(rep.silhouette_base)}, {"all", opt(rep.silhouette_all)}}},
          {"heatmap_ranges", rep.heatmap_ranges}};
}

// Writes report.json plus magnitude/cosine histograms and attention overlays.
template <class T>
void write_diagnostics(const Detector<T>& model, const Dataset& ds, const DiagReport& rep, const DiagConfig& cfg,
                       const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "plots");
  const auto doc = to_json(rep, cfg.histogram_bins);
  std::ofstream(dir / "report.json") << doc.dump(2) << "\n";

  double hi = 0;
  for (const auto& [g, s] : rep.groups)
    for (double v : s.norms) hi = std::max(hi, v);
  std::vector<Histogram> norms, cosines;
  for (auto g : kDiagGroups) {
    norms.push_back(histogram(rep.groups.at(g).norms, 0.0, hi > 0 ? hi : 1.0, cfg.histogram_bins));
    cosines.push_back(histogram(rep.groups.at(g).cosines, -1.0, 1.0, cfg.histogram_bins));
  }
  write_png(dir / "plots" / "magnitude_histogram.png", plot_histograms(norms));
  write_png(dir / "plots" / "cosine_histogram.png", plot_histograms(cosines));

  if (!model.layout().masked) return;
  const int g = model.config.backbone.roi_grid;
  int written = 0;
  for (const auto& img : ds.images) {
    if (written >= cfg.heatmap_samples) break;
    for (const auto& inst : img.instances) {
      if (written >= cfg.heatmap_samples || inst.class_id == kUnlabeled) continue;
      const Box b = inst.box;
      const auto pass = model.roi_forward(model.extract_feature_map(model.to_input(img.image)),
                                          std::span<const Box>(&b, 1), false);
      const int x0 = int(b.x1), y0 = int(b.y1);
      const int w = std::max(1, int(std::ceil(b.x2)) - x0), h = std::max(1, int(std::ceil(b.y2)) - y0);
      RgbImage crop(w, h);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          for (int k = 0; k < 3; ++k)
            crop.at(x, y, k) = img.image.at(std::min(x0 + x, img.width() - 1), std::min(y0 + y, img.height() - 1), k);
      crop = resize_bilinear(crop, 80, 80);
      std::vector<RgbImage> panels{crop};
      for (const auto& br : pass.branches) {
        std::vector<double> grid(br.mask.data(), br.mask.data() + br.mask.size());
        panels.push_back(heatmap_overlay(crop, grid, g, g));
      }
      write_png(dir / "plots" / ("attention_" + std::to_string(written) + ".png"), hconcat(panels));
      ++written;
    }
  }
}

}  // namespace uofs
