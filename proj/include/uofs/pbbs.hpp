#pragma once

#include <algorithm>
#include <array>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "uofs/coco.hpp"
#include "uofs/datamodel.hpp"
#include "uofs/error.hpp"
#include "uofs/png_io.hpp"
#include "uofs/rng.hpp"

namespace uofs {

enum class BackgroundKind { kFixedGray, kNormalizedGray, kPool };

// Whether NORMALIZED_GRAY averages foreground over one image or the whole set.
enum class NormalizeScope { kImage, kDataset };

struct BackgroundSpec {
  BackgroundKind kind = BackgroundKind::kNormalizedGray;
  std::array<std::uint8_t, 3> fixed_rgb = {127, 127, 127};
  std::filesystem::path pool_dir;
  NormalizeScope scope = NormalizeScope::kImage;
};

// Pixels under an instance mask, cropped to the instance box in source coordinates.
struct MaskedPatch {
  int x0 = 0, y0 = 0;
  Mask mask;       // crop-sized
  RgbImage pixels;  // crop-sized, zero outside the mask

  std::size_t pixel_count() const { return mask.count(); }
};

// Produces a mask for `box` in `image`; used when an instance has no mask.
using Segmenter = std::function<Mask(const AnnotatedImage& image, const Box& box)>;

// Segmenter backed by an external program invoked as
//   <command> <image.png> <x1> <y1> <x2> <y2> <mask_out.png>
inline Segmenter external_command_segmenter(std::string command, std::filesystem::path scratch_dir) {
  return [command = std::move(command), scratch_dir = std::move(scratch_dir)](const AnnotatedImage& img,
                                                                             const Box& box) {
    std::filesystem::create_directories(scratch_dir);
    const auto in = scratch_dir / (img.image_id + "_in.png");
    const auto out = scratch_dir / (img.image_id + "_mask.png");
    write_png(in, img.image);
    const std::string cmd = command + " '" + in.string() + "' " + std::to_string(box.x1) + " " +
                            std::to_string(box.y1) + " " + std::to_string(box.x2) + " " +
                            std::to_string(box.y2) + " '" + out.string() + "'";
    if (std::system(cmd.c_str()) != 0) throw Error("segmenter command failed: " + cmd);
    Mask m = read_mask_png(out);
    if (m.width != img.width() || m.height != img.height())
      throw Error("segmenter returned a mask of the wrong size for " + img.image_id);
    return m;
  };
}

inline MaskedPatch extract_foreground(const AnnotatedImage& image, const Instance& instance,
                                      const Segmenter* segmenter = nullptr) {
  const Mask* mask = instance.mask ? &*instance.mask : nullptr;
  Mask segmented;
  if (!mask) {
    if (!segmenter || !*segmenter)
      throw Error("instance in " + image.image_id + " (class " + std::to_string(instance.class_id) +
                  ") has no mask and no segmenter is configured");
    segmented = (*segmenter)(image, instance.box);
    mask = &segmented;
  }
  // The mask may spill at most 2 px beyond the box.
  const int x0 = std::max(0, int(std::floor(instance.box.x1)) - 2);
  const int y0 = std::max(0, int(std::floor(instance.box.y1)) - 2);
  const int x1 = std::min(image.width(), int(std::ceil(instance.box.x2)) + 2);
  const int y1 = std::min(image.height(), int(std::ceil(instance.box.y2)) + 2);
  MaskedPatch p;
  p.x0 = x0;
  p.y0 = y0;
  p.mask = Mask(x1 - x0, y1 - y0);
  p.pixels = RgbImage(x1 - x0, y1 - y0);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x)
      if (mask->at(x, y)) {
        p.mask.at(x - x0, y - y0) = 1;
        for (int c = 0; c < 3; ++c) p.pixels.at(x - x0, y - y0, c) = image.image.at(x, y, c);
      }
  if (p.pixel_count() == 0)
    throw Error("empty mask for instance in " + image.image_id + " (class " +
                std::to_string(instance.class_id) + ")");
  // Trim the margin when the mask stays inside the box, so a full-box mask
  // yields exactly the box crop.
  const Box tight = p.mask.bounds();
  if (tight.x1 > 0 || tight.y1 > 0 || tight.x2 < p.mask.width || tight.y2 < p.mask.height) {
    MaskedPatch t;
    t.x0 = x0 + int(tight.x1);
    t.y0 = y0 + int(tight.y1);
    const int w = int(tight.width()), h = int(tight.height());
    t.mask = Mask(w, h);
    t.pixels = RgbImage(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        t.mask.at(x, y) = p.mask.at(x + int(tight.x1), y + int(tight.y1));
        for (int c = 0; c < 3; ++c) t.pixels.at(x, y, c) = p.pixels.at(x + int(tight.x1), y + int(tight.y1), c);
      }
    return t;
  }
  return p;
}

struct PbbsImage {
  std::string source_image_id;
  RgbImage image;
  std::vector<Instance> instances;
};

inline std::vector<RgbImage> load_background_pool(const std::filesystem::path& dir) {
  std::error_code ec;
  if (dir.empty() || !std::filesystem::is_directory(dir, ec))
    throw ConfigError("pbbs.pool_dir is not a readable directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ConfigError("pbbs.pool_dir holds no PNG images: " + dir.string());
  std::vector<RgbImage> pool;
  for (const auto& f : files) pool.push_back(read_png(f));
  return pool;
}

// Union-of-masks per-channel pixel sums over the labeled instances.
struct ForegroundStats {
  std::array<double, 3> sum = {0, 0, 0};
  std::size_t count = 0;

  std::optional<std::array<std::uint8_t, 3>> mean() const {
    if (count == 0) return std::nullopt;
    std::array<std::uint8_t, 3> m;
    for (int c = 0; c < 3; ++c) m[c] = static_cast<std::uint8_t>(std::lround(sum[c] / double(count)));
    return m;
  }
};

inline ForegroundStats foreground_stats(const AnnotatedImage& image, const std::vector<MaskedPatch>& patches) {
  Mask uni(image.width(), image.height());
  for (const auto& p : patches)
    for (int y = 0; y < p.mask.height; ++y)
      for (int x = 0; x < p.mask.width; ++x)
        if (p.mask.at(x, y)) uni.at(p.x0 + x, p.y0 + y) = 1;
  ForegroundStats s;
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      if (uni.at(x, y)) {
        ++s.count;
        for (int c = 0; c < 3; ++c) s.sum[c] += image.image.at(x, y, c);
      }
  return s;
}

struct ComposeContext {
  const std::vector<RgbImage>* pool = nullptr;
  std::optional<std::array<std::uint8_t, 3>> dataset_mean;  // for NormalizeScope::kDataset
  const Segmenter* segmenter = nullptr;
};

inline std::vector<MaskedPatch> labeled_patches(const AnnotatedImage& image, const Segmenter* seg) {
  std::vector<MaskedPatch> patches;
  for (const auto& inst : image.instances)
    if (inst.labeled()) patches.push_back(extract_foreground(image, inst, seg));
  return patches;
}

inline PbbsImage compose_pbbs(const AnnotatedImage& image, const BackgroundSpec& spec,
                              const ComposeContext& ctx = {}) {
  const auto patches = labeled_patches(image, ctx.segmenter);
  PbbsImage out;
  out.source_image_id = image.image_id;
  switch (spec.kind) {
    case BackgroundKind::kFixedGray:
      out.image = RgbImage(image.width(), image.height(), spec.fixed_rgb);
      break;
    case BackgroundKind::kNormalizedGray: {
      auto mean = spec.scope == NormalizeScope::kDataset && ctx.dataset_mean
                      ? ctx.dataset_mean
                      : foreground_stats(image, patches).mean();
      out.image = RgbImage(image.width(), image.height(), mean.value_or(spec.fixed_rgb));
      break;
    }
    case BackgroundKind::kPool: {
      if (!ctx.pool || ctx.pool->empty()) throw ConfigError("POOL background requires a loaded pool");
      const auto& bg = (*ctx.pool)[fnv1a(image.image_id) % ctx.pool->size()];
      out.image = resize_bilinear(bg, image.width(), image.height());
      break;
    }
  }
  for (const auto& p : patches)
    for (int y = 0; y < p.mask.height; ++y)
      for (int x = 0; x < p.mask.width; ++x)
        if (p.mask.at(x, y))
          for (int c = 0; c < 3; ++c) out.image.at(p.x0 + x, p.y0 + y, c) = p.pixels.at(x, y, c);
  for (const auto& inst : image.instances)
    if (inst.labeled()) out.instances.push_back(inst);
  return out;
}

struct PbbsBuildResult {
  Dataset dataset;
  std::vector<IngestError> failures;
  std::size_t error_count() const { return failures.size(); }
};

// Composes one PBBS image per source image and writes
//   <out_dir>/images/*.png, <out_dir>/annotations.json, <out_dir>/manifest.json
// Images whose extraction fails are logged and skipped.
inline PbbsBuildResult build_pbbs_dataset(const Dataset& dataset, const BackgroundSpec& spec,
                                          const std::filesystem::path& out_dir,
                                          const std::string& fingerprint = {},
                                          const Segmenter* segmenter = nullptr) {
  namespace fs = std::filesystem;
  std::vector<RgbImage> pool;
  if (spec.kind == BackgroundKind::kPool) pool = load_background_pool(spec.pool_dir);
  ComposeContext ctx{&pool, std::nullopt, segmenter};
  if (spec.kind == BackgroundKind::kNormalizedGray && spec.scope == NormalizeScope::kDataset) {
    ForegroundStats total;
    for (const auto& img : dataset.images) {
      try {
        const auto s = foreground_stats(img, labeled_patches(img, segmenter));
        for (int c = 0; c < 3; ++c) total.sum[c] += s.sum[c];
        total.count += s.count;
      } catch (const Error&) {
        // reported below, per image
      }
    }
    ctx.dataset_mean = total.mean();
  }

  PbbsBuildResult result;
  result.dataset.categories = dataset.categories;
  if (!out_dir.empty()) fs::create_directories(out_dir / "images");
  json manifest;
  manifest["fingerprint"] = fingerprint;
  manifest["images"] = json::object();
  for (const auto& img : dataset.images) {
    PbbsImage composed;
    try {
      composed = compose_pbbs(img, spec, ctx);
    } catch (const Error& e) {
      std::cerr << "pbbs: skipping " << img.image_id << ": " << e.what() << "\n";
      result.failures.push_back({img.image_id, e.what()});
      continue;
    }
    AnnotatedImage out;
    out.image_id = composed.source_image_id;
    out.file_name = img.file_name.empty() ? img.image_id + ".png" : img.file_name;
    out.image = std::move(composed.image);
    out.instances = std::move(composed.instances);
    if (!out_dir.empty()) {
      write_png(out_dir / "images" / out.file_name, out.image);
      manifest["images"][out.image_id] = "images/" + out.file_name;
    }
    result.dataset.images.push_back(std::move(out));
  }
  if (!out_dir.empty()) {
    export_coco(result.dataset, out_dir / "annotations.json");
    manifest["error_count"] = result.error_count();
    write_json(out_dir / "manifest.json", manifest, 1);
  }
  return result;
}

}  // namespace uofs
