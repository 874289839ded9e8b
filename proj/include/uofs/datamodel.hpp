#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "uofs/box.hpp"
#include "uofs/error.hpp"
#include "uofs/image.hpp"
#include "uofs/rng.hpp"

namespace uofs {

// Class id for foreground that carries no label (distractors, and novel
// instances seen inside base-set images).
inline constexpr int kUnlabeled = -1;

struct Instance {
  Box box;
  int class_id = kUnlabeled;
  std::optional<Mask> mask;
  double area = 0;

  bool labeled() const { return class_id != kUnlabeled; }
};

struct AnnotatedImage {
  std::string image_id;
  std::string file_name;
  RgbImage image;
  std::vector<Instance> instances;

  int width() const { return image.width; }
  int height() const { return image.height; }
};

struct Category {
  int id = 0;
  std::string name;
};

struct IngestError {
  std::string image_id;
  std::string message;
};

struct Dataset {
  std::vector<Category> categories;
  std::vector<AnnotatedImage> images;
  std::vector<IngestError> errors;

  std::size_t instance_count(bool include_unlabeled = false) const {
    std::size_t n = 0;
    for (const auto& img : images)
      for (const auto& inst : img.instances) n += include_unlabeled || inst.labeled();
    return n;
  }

  const AnnotatedImage* find(const std::string& image_id) const {
    for (const auto& img : images)
      if (img.image_id == image_id) return &img;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// Synthetic shapes benchmark

struct SynthConfig {
  int n_base_classes = 6;
  int n_novel_classes = 2;
  int image_size = 96;
  int min_instances = 1;
  int max_instances = 4;
  int min_size = 16;
  int max_size = 32;
  double distractor_rate = 0.3;
  // Share of distractors drawn with a novel-class signature; the rest use
  // shapes outside the class vocabulary.
  double distractor_novel_fraction = 0.5;
  std::uint64_t seed = 0;

  int n_classes() const { return n_base_classes + n_novel_classes; }
};

enum class ShapeKind {
  kEllipse,
  kRectangle,
  kTriangle,
  kDiamond,
  kCross,
  kRing,
  kHexagon,
  kStar,
  kTrapezoid,
  kArrow,
  // outside the class vocabulary
  kCrescent,
  kLShape,
  kFrame,
  kSemicircle,
};

inline constexpr int kMaxSynthClasses = 10;
inline constexpr std::array<ShapeKind, 4> kOffVocabularyShapes = {
    ShapeKind::kCrescent, ShapeKind::kLShape, ShapeKind::kFrame, ShapeKind::kSemicircle};

inline constexpr std::array<std::array<std::uint8_t, 3>, kMaxSynthClasses> kPalette = {{
    {220, 40, 40},
    {40, 170, 60},
    {40, 80, 220},
    {230, 200, 30},
    {200, 50, 200},
    {30, 200, 210},
    {250, 130, 20},
    {130, 70, 20},
    {240, 240, 240},
    {20, 20, 20},
}};

inline const char* shape_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kEllipse: return "ellipse";
    case ShapeKind::kRectangle: return "rectangle";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kDiamond: return "diamond";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kHexagon: return "hexagon";
    case ShapeKind::kStar: return "star";
    case ShapeKind::kTrapezoid: return "trapezoid";
    case ShapeKind::kArrow: return "arrow";
    case ShapeKind::kCrescent: return "crescent";
    case ShapeKind::kLShape: return "lshape";
    case ShapeKind::kFrame: return "frame";
    case ShapeKind::kSemicircle: return "semicircle";
  }
  return "?";
}

// Point-in-shape test in box-normalized coordinates u, v in [-1, 1].
inline bool shape_contains(ShapeKind k, double u, double v) {
  const double r2 = u * u + v * v;
  const double au = std::abs(u), av = std::abs(v);
  switch (k) {
    case ShapeKind::kEllipse: return r2 <= 1.0;
    case ShapeKind::kRectangle: return au <= 0.9 && av <= 0.9;
    case ShapeKind::kTriangle: return v <= 1.0 && au <= 0.5 * (v + 1.0);
    case ShapeKind::kDiamond: return au + av <= 1.0;
    case ShapeKind::kCross: return (au <= 0.3 && av <= 1.0) || (av <= 0.3 && au <= 1.0);
    case ShapeKind::kRing: return r2 <= 1.0 && r2 >= 0.3;
    case ShapeKind::kHexagon: return av <= 0.87 && au + 0.577 * av <= 1.0;
    case ShapeKind::kStar: {
      const double th = std::atan2(v, u);
      return std::sqrt(r2) <= 0.7 + 0.3 * std::cos(5.0 * th);
    }
    case ShapeKind::kTrapezoid: return av <= 0.85 && au <= 0.6 + 0.4 * (v + 0.85) / 1.7;
    case ShapeKind::kArrow:
      return (v >= -1.0 && v <= 0.0 && au <= 1.0 + v) || (v > 0.0 && v <= 1.0 && au <= 0.35);
    case ShapeKind::kCrescent: return r2 <= 1.0 && (u - 0.45) * (u - 0.45) + v * v > 0.36;
    case ShapeKind::kLShape: return au <= 1.0 && av <= 1.0 && (u <= -0.35 || v >= 0.35);
    case ShapeKind::kFrame: return au <= 1.0 && av <= 1.0 && std::max(au, av) >= 0.6;
    case ShapeKind::kSemicircle: return r2 <= 1.0 && v >= 0.0;
  }
  return false;
}

// Class ids are 1-based; base classes come first, then novel classes.
inline ShapeKind class_shape(int class_id) {
  return static_cast<ShapeKind>(class_id - 1);
}

inline std::vector<Category> synth_categories(const SynthConfig& cfg) {
  std::vector<Category> cats;
  for (int c = 1; c <= cfg.n_classes(); ++c) cats.push_back({c, shape_name(class_shape(c))});
  return cats;
}

inline std::set<int> synth_base_classes(const SynthConfig& cfg) {
  std::set<int> s;
  for (int c = 1; c <= cfg.n_base_classes; ++c) s.insert(c);
  return s;
}

inline std::set<int> synth_novel_classes(const SynthConfig& cfg) {
  std::set<int> s;
  for (int c = cfg.n_base_classes + 1; c <= cfg.n_classes(); ++c) s.insert(c);
  return s;
}

inline void validate(const SynthConfig& cfg) {
  if (cfg.n_base_classes < 1 || cfg.n_novel_classes < 0 || cfg.n_classes() > kMaxSynthClasses)
    throw ConfigError("synthetic benchmark supports 1.." + std::to_string(kMaxSynthClasses) +
                      " classes in total");
  if (cfg.distractor_rate < 0 || cfg.distractor_rate > 1)
    throw ConfigError("distractor_rate must lie in [0, 1]");
  if (cfg.distractor_novel_fraction < 0 || cfg.distractor_novel_fraction > 1)
    throw ConfigError("distractor_novel_fraction must lie in [0, 1]");
  if (cfg.min_instances < 0 || cfg.max_instances < cfg.min_instances)
    throw ConfigError("instances_per_image range is empty");
  if (cfg.min_size < 4 || cfg.max_size < cfg.min_size)
    throw ConfigError("object size range is empty or below 4 px");
  if (cfg.max_size + 2 > cfg.image_size)
    throw ConfigError("max_size does not fit inside image_size");
  const double needed = double(cfg.max_instances) * (cfg.max_size + 2) * (cfg.max_size + 2);
  if (needed > 0.6 * cfg.image_size * cfg.image_size)
    throw ConfigError("instances_per_image range infeasible for image_size: " +
                      std::to_string(cfg.max_instances) + " objects of up to " +
                      std::to_string(cfg.max_size) + " px do not fit in " +
                      std::to_string(cfg.image_size) + " px");
}

namespace detail {

inline std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

inline RgbImage render_background(int size, Rng& rng) {
  const int grid = 6;
  std::array<double, 3> base;
  for (auto& b : base) b = rng.uniform(60, 200);
  std::vector<double> lowfreq((grid + 1) * (grid + 1) * 3);
  for (auto& v : lowfreq) v = rng.uniform(-40, 40);
  const bool stripes = rng.bernoulli(0.5);
  const double period = rng.uniform(4, 10);
  const double angle = rng.uniform(0, std::numbers::pi);
  const double amp = stripes ? rng.uniform(10, 25) : 0.0;
  RgbImage img(size, size);
  for (int y = 0; y < size; ++y) {
    const double gy = double(y) / size * grid;
    const int iy = std::min(int(gy), grid - 1);
    const double wy = gy - iy;
    for (int x = 0; x < size; ++x) {
      const double gx = double(x) / size * grid;
      const int ix = std::min(int(gx), grid - 1);
      const double wx = gx - ix;
      const double stripe =
          amp * std::sin(2 * std::numbers::pi * (x * std::cos(angle) + y * std::sin(angle)) / period);
      for (int c = 0; c < 3; ++c) {
        auto g = [&](int a, int b) { return lowfreq[((b * (grid + 1)) + a) * 3 + c]; };
        const double low = (1 - wy) * ((1 - wx) * g(ix, iy) + wx * g(ix + 1, iy)) +
                           wy * ((1 - wx) * g(ix, iy + 1) + wx * g(ix + 1, iy + 1));
        img.at(x, y, c) = clamp_u8(base[c] + low + stripe + rng.uniform(-8, 8));
      }
    }
  }
  return img;
}

}  // namespace detail

// Renders image `index` of the benchmark; a pure function of (cfg, index).
inline AnnotatedImage render_synthetic(const SynthConfig& cfg, std::int64_t index) {
  Rng rng(mix_seed({cfg.seed, static_cast<std::uint64_t>(index), 0x5157ULL}));
  AnnotatedImage out;
  char id[64];
  std::snprintf(id, sizeof id, "s%llu_%07lld", static_cast<unsigned long long>(cfg.seed),
                static_cast<long long>(index));
  out.image_id = id;
  out.file_name = out.image_id + ".png";
  out.image = detail::render_background(cfg.image_size, rng);

  const int n_slots = static_cast<int>(rng.uniform_int(cfg.min_instances, cfg.max_instances));
  std::vector<Box> placed;
  for (int slot = 0; slot < n_slots; ++slot) {
    const bool distractor = rng.bernoulli(cfg.distractor_rate);
    ShapeKind kind;
    int class_id = kUnlabeled;
    std::array<std::uint8_t, 3> color;
    if (distractor) {
      if (cfg.n_novel_classes > 0 && rng.bernoulli(cfg.distractor_novel_fraction)) {
        const int c = cfg.n_base_classes + 1 + int(rng.uniform_int(0, cfg.n_novel_classes - 1));
        kind = class_shape(c);
        color = kPalette[c - 1];
      } else {
        kind = kOffVocabularyShapes[rng.uniform_int(0, kOffVocabularyShapes.size() - 1)];
        color = kPalette[rng.uniform_int(0, kMaxSynthClasses - 1)];
      }
    } else {
      class_id = 1 + int(rng.uniform_int(0, cfg.n_classes() - 1));
      kind = class_shape(class_id);
      color = kPalette[class_id - 1];
    }
    const double w = rng.uniform(cfg.min_size, cfg.max_size);
    const double h = std::clamp(w * rng.uniform(0.8, 1.25), double(cfg.min_size), double(cfg.max_size));
    std::array<double, 3> tint;
    for (int c = 0; c < 3; ++c) tint[c] = color[c] + rng.uniform(-15, 15);

    Box box;
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      const double x1 = rng.uniform(1, cfg.image_size - 1 - w);
      const double y1 = rng.uniform(1, cfg.image_size - 1 - h);
      box = {x1, y1, x1 + w, y1 + h};
      const Box grown{box.x1 - 2, box.y1 - 2, box.x2 + 2, box.y2 + 2};
      ok = std::none_of(placed.begin(), placed.end(),
                        [&](const Box& b) { return intersection_area(grown, b) > 0; });
    }
    if (!ok) continue;  // slot dropped; the size bound in validate() makes this rare

    Mask mask(cfg.image_size, cfg.image_size);
    for (int y = int(box.y1); y < std::min(cfg.image_size, int(std::ceil(box.y2))); ++y)
      for (int x = int(box.x1); x < std::min(cfg.image_size, int(std::ceil(box.x2))); ++x) {
        const double u = (x + 0.5 - box.cx()) / (0.5 * w);
        const double v = (y + 0.5 - box.cy()) / (0.5 * h);
        if (shape_contains(kind, u, v)) mask.at(x, y) = 1;
      }
    const std::size_t count = mask.count();
    if (count == 0) continue;
    // Every object shares a 2 px checker texture; backgrounds are smooth.
    auto checker = [](int x, int y) { return ((x / 2) + (y / 2)) % 2 == 0; };
    for (int y = 0; y < cfg.image_size; ++y)
      for (int x = 0; x < cfg.image_size; ++x)
        if (mask.at(x, y))
          for (int c = 0; c < 3; ++c)
            out.image.at(x, y, c) = detail::clamp_u8(tint[c] + (checker(x, y) ? 28 : -28) + rng.uniform(-4, 4));
    placed.push_back(box);

    Instance inst;
    inst.box = mask.bounds();
    inst.class_id = class_id;
    inst.area = double(count);
    inst.mask = std::move(mask);
    out.instances.push_back(std::move(inst));
  }
  return out;
}

// Images [index_offset, index_offset + n_images) of the benchmark.
inline Dataset generate_synthetic(const SynthConfig& cfg, int n_images, std::int64_t index_offset = 0) {
  validate(cfg);
  if (n_images < 1) throw ConfigError("n_images must be at least 1");
  Dataset ds;
  ds.categories = synth_categories(cfg);
  ds.images.reserve(n_images);
  for (int i = 0; i < n_images; ++i) ds.images.push_back(render_synthetic(cfg, index_offset + i));
  return ds;
}

// ---------------------------------------------------------------------------
// Few-shot split

struct InstanceRef {
  std::string image_id;
  int instance_index = 0;

  friend auto operator<=>(const InstanceRef&, const InstanceRef&) = default;
};

struct FewShotSplit {
  std::set<int> base_classes;
  std::set<int> novel_classes;
  int k = 0;
  std::map<int, std::vector<InstanceRef>> novel_sample_ids;
  // k shots per base class for the balanced fine-tune set.
  std::map<int, std::vector<InstanceRef>> base_sample_ids;
};

namespace detail {

inline std::vector<InstanceRef> sample_k(const Dataset& ds, int class_id, int k, std::uint64_t seed) {
  std::vector<InstanceRef> candidates;
  for (const auto& img : ds.images)
    for (int i = 0; i < int(img.instances.size()); ++i)
      if (img.instances[i].class_id == class_id) candidates.push_back({img.image_id, i});
  if (int(candidates.size()) < k)
    throw Error("class " + std::to_string(class_id) + " has " + std::to_string(candidates.size()) +
                " labeled instances, fewer than k=" + std::to_string(k));
  Rng rng(mix_seed({seed, static_cast<std::uint64_t>(class_id), 0x6b73ULL}));
  rng.shuffle(candidates.begin(), candidates.end());
  candidates.resize(k);
  std::sort(candidates.begin(), candidates.end());
  return candidates;
}

}  // namespace detail

inline FewShotSplit make_split(const Dataset& ds, const std::set<int>& novel_classes, int k,
                               std::uint64_t seed) {
  if (k < 1) throw ConfigError("k must be at least 1");
  FewShotSplit split;
  split.k = k;
  split.novel_classes = novel_classes;
  for (const auto& cat : ds.categories)
    if (!novel_classes.contains(cat.id)) split.base_classes.insert(cat.id);
  for (int c : novel_classes) {
    if (std::none_of(ds.categories.begin(), ds.categories.end(),
                     [&](const Category& cat) { return cat.id == c; }))
      throw ConfigError("novel class " + std::to_string(c) + " is not a dataset category");
    split.novel_sample_ids[c] = detail::sample_k(ds, c, k, seed);
  }
  for (int c : split.base_classes) split.base_sample_ids[c] = detail::sample_k(ds, c, k, seed);
  return split;
}

// Base-set view: novel-class instances lose their label.
inline Dataset base_view(const Dataset& ds, const FewShotSplit& split) {
  Dataset out = ds;
  for (auto& img : out.images)
    for (auto& inst : img.instances)
      if (split.novel_classes.contains(inst.class_id)) inst.class_id = kUnlabeled;
  return out;
}

// Fine-tune set: the images holding sampled shots, annotated with those shots only.
inline Dataset finetune_view(const Dataset& ds, const FewShotSplit& split) {
  std::map<std::string, std::vector<int>> keep;
  for (const auto* samples : {&split.novel_sample_ids, &split.base_sample_ids})
    for (const auto& [cls, refs] : *samples)
      for (const auto& r : refs) keep[r.image_id].push_back(r.instance_index);
  Dataset out;
  out.categories = ds.categories;
  for (const auto& img : ds.images) {
    auto it = keep.find(img.image_id);
    if (it == keep.end()) continue;
    AnnotatedImage copy;
    copy.image_id = img.image_id;
    copy.file_name = img.file_name;
    copy.image = img.image;
    auto idx = it->second;
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
    for (int i : idx) copy.instances.push_back(img.instances[i]);
    out.images.push_back(std::move(copy));
  }
  return out;
}

}  // namespace uofs
