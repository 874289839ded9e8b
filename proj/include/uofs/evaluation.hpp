#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "uofs/box.hpp"
#include "uofs/datamodel.hpp"
#include "uofs/detector.hpp"
#include "uofs/heads.hpp"
#include "uofs/proposals.hpp"

namespace uofs {

struct EvalConfig {
  double iou = 0.5;
  double nms_iou = 0.5;
  double score_floor = 0.05;
  int topk = 100;
  std::vector<double> grid_scales = {14, 20, 28, 38};
  double grid_step_frac = 0.25;
  bool refine_boxes = true;     // apply the regression deltas to the grid boxes
  bool silhouette_raw = false;  // raw f instead of f / |f|
  int roi_chunk = 256;
};

struct DetectionResult {
  std::string image_id;
  Box box;
  int class_id = 0;
  double score = 0;
};

// Greedy NMS; returns kept indices in descending score order (ties by index).
inline std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores, double iou_thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
  std::vector<int> keep;
  std::vector<char> dead(boxes.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const int a = order[i];
    if (dead[a]) continue;
    keep.push_back(a);
    for (std::size_t j = i + 1; j < order.size(); ++j)
      if (!dead[order[j]] && iou(boxes[a], boxes[order[j]]) > iou_thresh) dead[order[j]] = 1;
  }
  return keep;
}

// Probabilities over the model's classes followed by background.
template <class T>
Vec<T> score_vector(const Detector<T>& model, const Vec<T>& f_spe, const Vec<T>& f_agn) {
  if (is_orthogonal(model.head.kind)) return joint_pbbs<T>(f_spe, f_agn, model.head).p;
  return entangled_probs<T>(f_spe, model.head.W_cls, model.head.kind, model.head.tau);
}

template <class T>
std::vector<DetectionResult> run_inference(const Detector<T>& model, const AnnotatedImage& image,
                                           const EvalConfig& cfg) {
  const int W = image.width(), H = image.height();
  const auto grid = dense_grid(W, H, cfg.grid_scales, cfg.grid_step_frac);
  const int nc = model.n_classes();
  std::vector<std::vector<Box>> boxes(nc);
  std::vector<std::vector<double>> scores(nc);
  const auto fmap = model.extract_feature_map(model.to_input(image.image));
  for (std::size_t start = 0; start < grid.size(); start += cfg.roi_chunk) {
    const std::size_t n = std::min<std::size_t>(cfg.roi_chunk, grid.size() - start);
    const std::span<const Box> chunk(grid.data() + start, n);
    const auto pass = model.roi_forward(fmap, chunk, false);
    for (std::size_t r = 0; r < n; ++r) {
      const Vec<T> p = score_vector<T>(model, pass.f_spe().col(r), pass.f_agn().col(r));
      for (int c = 0; c < nc; ++c) {
        if (double(p[c]) < cfg.score_floor) continue;
        Box b = chunk[r];
        if (cfg.refine_boxes) b = decode_box(b, model.deltas(pass, int(r), c)).box;
        boxes[c].push_back(clip_box(b, W, H));
        scores[c].push_back(double(p[c]));
      }
    }
  }
  std::vector<DetectionResult> out;
  for (int c = 0; c < nc; ++c)
    for (int k : nms(boxes[c], scores[c], cfg.nms_iou))
      out.push_back({image.image_id, boxes[c][k], model.class_ids[c], scores[c][k]});
  std::stable_sort(out.begin(), out.end(),
                   [](const DetectionResult& a, const DetectionResult& b) { return a.score > b.score; });
  if (int(out.size()) > cfg.topk) out.resize(cfg.topk);
  return out;
}

template <class T>
std::vector<DetectionResult> run_inference(const Detector<T>& model, const Dataset& ds, const EvalConfig& cfg) {
  std::vector<DetectionResult> all;
  for (const auto& img : ds.images) {
    auto d = run_inference(model, img, cfg);
    all.insert(all.end(), d.begin(), d.end());
  }
  return all;
}

// ---------------------------------------------------------------------------
// Average precision

struct PrPoint {
  double recall, precision;
};

// Precision/recall after each detection, highest score first. Each detection
// takes the unmatched ground truth of its image with the largest IoU.
inline std::vector<PrPoint> pr_curve(std::vector<DetectionResult> dets,
                                     const std::map<std::string, std::vector<Box>>& gt, double iou_thresh,
                                     int* n_gt_out = nullptr) {
  int n_gt = 0;
  for (const auto& [id, boxes] : gt) n_gt += int(boxes.size());
  if (n_gt_out) *n_gt_out = n_gt;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const DetectionResult& a, const DetectionResult& b) { return a.score > b.score; });
  std::map<std::string, std::vector<char>> used;
  for (const auto& [id, boxes] : gt) used[id].assign(boxes.size(), 0);
  std::vector<PrPoint> curve;
  int tp = 0, fp = 0;
  for (const auto& d : dets) {
    bool hit = false;
    auto it = gt.find(d.image_id);
    if (it != gt.end()) {
      int best = -1;
      double best_iou = iou_thresh;
      for (int g = 0; g < int(it->second.size()); ++g) {
        if (used[d.image_id][g]) continue;
        const double v = iou(d.box, it->second[g]);
        if (v >= best_iou) {
          if (best < 0 || v > best_iou) best = g;
          best_iou = std::max(best_iou, v);
        }
      }
      if (best >= 0) {
        used[d.image_id][best] = 1;
        hit = true;
      }
    }
    hit ? ++tp : ++fp;
    curve.push_back({n_gt > 0 ? double(tp) / n_gt : 0.0, double(tp) / double(tp + fp)});
  }
  return curve;
}

// All-point interpolated AP; nullopt when the class has no ground truth.
inline std::optional<double> average_precision(const std::vector<DetectionResult>& dets,
                                               const std::map<std::string, std::vector<Box>>& gt,
                                               double iou_thresh) {
  int n_gt = 0;
  const auto curve = pr_curve(dets, gt, iou_thresh, &n_gt);
  if (n_gt == 0) return std::nullopt;
  std::vector<double> env(curve.size());
  double running = 0;
  for (int i = int(curve.size()) - 1; i >= 0; --i) {
    running = std::max(running, curve[i].precision);
    env[i] = running;
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i].recall > prev_recall) {
      ap += (curve[i].recall - prev_recall) * env[i];
      prev_recall = curve[i].recall;
    }
  }
  return ap;
}

// ---------------------------------------------------------------------------
// Silhouette

struct SilhouetteResult {
  double value = 0;
  int samples = 0;
  int excluded = 0;  // samples of singleton classes
};

inline SilhouetteResult silhouette(const std::vector<std::vector<double>>& x, const std::vector<int>& labels) {
  const int n = int(x.size());
  std::map<int, int> count;
  for (int l : labels) ++count[l];
  auto dist = [&](int i, int j) {
    double s = 0;
    for (std::size_t k = 0; k < x[i].size(); ++k) s += (x[i][k] - x[j][k]) * (x[i][k] - x[j][k]);
    return std::sqrt(s);
  };
  SilhouetteResult res;
  std::set<int> usable;
  for (const auto& [l, c] : count)
    if (c >= 2) usable.insert(l);
  if (usable.size() < 2) throw Error("silhouette needs at least two classes with two or more samples");
  double total = 0;
  for (int i = 0; i < n; ++i) {
    if (!usable.contains(labels[i])) {
      ++res.excluded;
      continue;
    }
    std::map<int, double> sum;
    for (int j = 0; j < n; ++j)
      if (j != i && usable.contains(labels[j])) sum[labels[j]] += dist(i, j);
    const double a = sum[labels[i]] / (count[labels[i]] - 1);
    double b = INFINITY;
    for (int l : usable)
      if (l != labels[i]) b = std::min(b, sum[l] / count[l]);
    const double m = std::max(a, b);
    total += m > 0 ? (b - a) / m : 0.0;
    ++res.samples;
  }
  res.value = total / res.samples;
  return res;
}

// f_spe at every labeled ground-truth box of the given classes.
template <class T>
void gt_features(const Detector<T>& model, const Dataset& ds, const std::set<int>& classes,
                 std::vector<std::vector<double>>& feats, std::vector<int>& labels, bool normalize) {
  for (const auto& img : ds.images) {
    std::vector<Box> boxes;
    std::vector<int> cls;
    for (const auto& inst : img.instances)
      if (classes.contains(inst.class_id)) {
        boxes.push_back(inst.box);
        cls.push_back(inst.class_id);
      }
    if (boxes.empty()) continue;
    const auto pass = model.roi_forward(model.extract_feature_map(model.to_input(img.image)), boxes, false);
    for (std::size_t r = 0; r < boxes.size(); ++r) {
      Vec<T> f = pass.f_spe().col(r);
      if (normalize && f.norm() > T(0)) f /= f.norm();
      feats.emplace_back(f.data(), f.data() + f.size());
      labels.push_back(cls[r]);
    }
  }
}

// ---------------------------------------------------------------------------
// Report

struct EvalReport {
  std::map<int, std::optional<double>> ap50;
  std::map<int, std::optional<double>> ap75;
  std::map<int, std::optional<double>> ap;  // mean over IoU .50:.95
  double nAP50 = 0, bAP50 = 0, nAP75 = 0, nAP = 0;
  std::optional<double> silhouette_base, silhouette_all;
  std::vector<int> undefined_classes;
  int detections = 0;
};

inline double mean_defined(const std::map<int, std::optional<double>>& m, const std::set<int>& classes) {
  double s = 0;
  int n = 0;
  for (int c : classes) {
    auto it = m.find(c);
    if (it != m.end() && it->second) {
      s += *it->second;
      ++n;
    }
  }
  return n ? s / n : 0.0;
}

inline EvalReport score_detections(const std::vector<DetectionResult>& dets, const Dataset& ds,
                                   const std::set<int>& base, const std::set<int>& novel) {
  EvalReport rep;
  rep.detections = int(dets.size());
  std::set<int> all = base;
  all.insert(novel.begin(), novel.end());
  for (int c : all) {
    std::map<std::string, std::vector<Box>> gt;
    for (const auto& img : ds.images) {
      auto& v = gt[img.image_id];
      for (const auto& inst : img.instances)
        if (inst.class_id == c) v.push_back(inst.box);
    }
    std::vector<DetectionResult> mine;
    for (const auto& d : dets)
      if (d.class_id == c) mine.push_back(d);
    rep.ap50[c] = average_precision(mine, gt, 0.5);
    rep.ap75[c] = average_precision(mine, gt, 0.75);
    if (!rep.ap50[c]) {
      rep.undefined_classes.push_back(c);
      rep.ap[c] = std::nullopt;
      continue;
    }
    double s = 0;
    for (int t = 0; t < 10; ++t) s += *average_precision(mine, gt, 0.5 + 0.05 * t);
    rep.ap[c] = s / 10;
  }
  rep.nAP50 = mean_defined(rep.ap50, novel);
  rep.bAP50 = mean_defined(rep.ap50, base);
  rep.nAP75 = mean_defined(rep.ap75, novel);
  rep.nAP = mean_defined(rep.ap, novel);
  return rep;
}

template <class T>
EvalReport evaluate(const Detector<T>& model, const Dataset& ds, const std::set<int>& base,
                    const std::set<int>& novel, const EvalConfig& cfg,
                    std::vector<DetectionResult>* dets_out = nullptr) {
  const auto dets = run_inference(model, ds, cfg);
  EvalReport rep = score_detections(dets, ds, base, novel);
  auto sc = [&](const std::set<int>& classes) -> std::optional<double> {
    std::vector<std::vector<double>> f;
    std::vector<int> l;
    gt_features(model, ds, classes, f, l, !cfg.silhouette_raw);
    try {
      return silhouette(f, l).value;
    } catch (const Error&) {
      return std::nullopt;
    }
  };
  rep.silhouette_base = sc(base);
  std::set<int> all = base;
  all.insert(novel.begin(), novel.end());
  rep.silhouette_all = sc(all);
  if (dets_out) *dets_out = dets;
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json per = json::object();
  for (const auto& [c, v] : r.ap50)
    per[std::to_string(c)] = {{"ap50", opt(v)}, {"ap75", opt(r.ap75.at(c))}, {"ap", opt(r.ap.at(c))}};
  return {{"per_class", per},
          {"nAP50", r.nAP50},
          {"bAP50", r.bAP50},
          {"nAP75", r.nAP75},
          {"nAP", r.nAP},
          {"silhouette", {{"base", opt(r.silhouette_base)}, {"all", opt(r.silhouette_all)}}},
          {"undefined_classes", r.undefined_classes},
          {"detections", r.detections}};
}

inline nlohmann::json to_json(const DetectionResult& d) {
  return {{"image_id", d.image_id},
          {"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}},
          {"class_id", d.class_id},
          {"score", d.score}};
}

}  // namespace uofs
