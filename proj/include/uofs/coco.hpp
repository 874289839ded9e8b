#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "uofs/datamodel.hpp"
#include "uofs/error.hpp"
#include "uofs/png_io.hpp"

namespace uofs {

namespace fs = std::filesystem;
using nlohmann::json;

// Even-odd fill of one or more polygons ([x0,y0,x1,y1,...]) at pixel centers.
inline Mask rasterize_polygons(const std::vector<std::vector<double>>& polys, int width, int height) {
  Mask m(width, height);
  for (const auto& poly : polys) {
    const std::size_t n = poly.size() / 2;
    if (n < 3) continue;
    double minx = poly[0], maxx = poly[0], miny = poly[1], maxy = poly[1];
    for (std::size_t i = 0; i < n; ++i) {
      minx = std::min(minx, poly[2 * i]);
      maxx = std::max(maxx, poly[2 * i]);
      miny = std::min(miny, poly[2 * i + 1]);
      maxy = std::max(maxy, poly[2 * i + 1]);
    }
    const int y0 = std::max(0, int(std::floor(miny))), y1 = std::min(height - 1, int(std::ceil(maxy)));
    const int x0 = std::max(0, int(std::floor(minx))), x1 = std::min(width - 1, int(std::ceil(maxx)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        bool inside = false;
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
          const double xi = poly[2 * i], yi = poly[2 * i + 1];
          const double xj = poly[2 * j], yj = poly[2 * j + 1];
          if ((yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi) inside = !inside;
        }
        if (inside) m.at(x, y) ^= 1;
      }
  }
  return m;
}

// COCO run-length encoding: column-major runs, starting with a zero run.
inline std::vector<std::uint32_t> rle_encode(const Mask& m) {
  std::vector<std::uint32_t> counts;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (int x = 0; x < m.width; ++x)
    for (int y = 0; y < m.height; ++y) {
      const std::uint8_t v = m.at(x, y) ? 1 : 0;
      if (v != current) {
        counts.push_back(run);
        run = 0;
        current = v;
      }
      ++run;
    }
  counts.push_back(run);
  return counts;
}

inline Mask rle_decode(const std::vector<std::uint32_t>& counts, int width, int height) {
  Mask m(width, height);
  std::size_t pos = 0;
  const std::size_t total = std::size_t(width) * height;
  std::uint8_t v = 0;
  for (auto c : counts) {
    for (std::uint32_t i = 0; i < c && pos < total; ++i, ++pos) {
      const int x = int(pos / height), y = int(pos % height);
      m.at(x, y) = v;
    }
    v ^= 1;
  }
  return m;
}

// Decodes the compact string form used by pycocotools.
inline std::vector<std::uint32_t> rle_from_string(const std::string& s) {
  std::vector<std::uint32_t> counts;
  std::size_t p = 0;
  while (p < s.size()) {
    long long x = 0;
    int k = 0;
    bool more = true;
    while (more && p < s.size()) {
      const long long c = static_cast<long long>(s[p]) - 48;
      x |= (c & 0x1f) << (5 * k);
      more = (c & 0x20) != 0;
      ++p;
      ++k;
      if (!more && (c & 0x10)) x |= -1LL << (5 * k);
    }
    if (counts.size() > 2) x += counts[counts.size() - 2];
    counts.push_back(static_cast<std::uint32_t>(x));
  }
  return counts;
}

struct CocoOptions {
  // Accept category_id -1 / "unlabeled": true records as UNLABELED instances.
  bool allow_unlabeled = false;
  // Skip reading pixels (annotations only); images get zero-sized rasters.
  bool skip_pixels = false;
};

inline Dataset ingest_coco_json(const std::string& text, const fs::path& image_root,
                                const CocoOptions& opt = {}) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error("malformed COCO JSON at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("images"))
    throw Error("COCO JSON must be an object with an \"images\" array");

  Dataset ds;
  if (doc.contains("categories"))
    for (const auto& c : doc["categories"]) ds.categories.push_back({c.at("id").get<int>(), c.value("name", "")});

  auto key_of = [](const json& id) { return id.is_string() ? id.get<std::string>() : id.dump(); };
  std::map<std::string, std::size_t> by_coco_id;
  std::map<std::string, std::pair<int, int>> dims;
  for (const auto& im : doc["images"]) {
    AnnotatedImage img;
    const std::string coco_id = key_of(im.at("id"));
    img.image_id = im.contains("image_key") ? im["image_key"].get<std::string>() : coco_id;
    img.file_name = im.value("file_name", "");
    const int w = im.value("width", 0), h = im.value("height", 0);
    if (!opt.skip_pixels) {
      const fs::path path = image_root / img.file_name;
      if (!fs::exists(path)) {
        ds.errors.push_back({img.image_id, "missing image file " + path.string()});
        continue;
      }
      try {
        img.image = read_png(path);
      } catch (const Error& e) {
        ds.errors.push_back({img.image_id, e.what()});
        continue;
      }
    } else {
      img.image.width = w;
      img.image.height = h;
    }
    dims[coco_id] = {img.image.width, img.image.height};
    by_coco_id[coco_id] = ds.images.size();
    ds.images.push_back(std::move(img));
  }

  if (doc.contains("annotations"))
    for (const auto& a : doc["annotations"]) {
      const std::string coco_id = key_of(a.at("image_id"));
      auto it = by_coco_id.find(coco_id);
      if (it == by_coco_id.end()) continue;  // image failed to load or is absent
      auto& img = ds.images[it->second];
      const auto [w, h] = dims[coco_id];
      Instance inst;
      const auto& bb = a.at("bbox");
      inst.box = {bb[0].get<double>(), bb[1].get<double>(), bb[0].get<double>() + bb[2].get<double>(),
                  bb[1].get<double>() + bb[3].get<double>()};
      if (!inst.box.valid()) {
        ds.errors.push_back({img.image_id, "degenerate bbox skipped"});
        continue;
      }
      inst.class_id = a.at("category_id").get<int>();
      if (a.value("unlabeled", false) || inst.class_id == kUnlabeled) {
        if (!opt.allow_unlabeled) continue;
        inst.class_id = kUnlabeled;
      }
      if (a.contains("segmentation") && w > 0 && h > 0) {
        const auto& seg = a["segmentation"];
        if (seg.is_array() && !seg.empty()) {
          inst.mask = rasterize_polygons(seg.get<std::vector<std::vector<double>>>(), w, h);
        } else if (seg.is_object() && seg.contains("counts")) {
          const auto& counts = seg["counts"];
          inst.mask = counts.is_string()
                          ? rle_decode(rle_from_string(counts.get<std::string>()), w, h)
                          : rle_decode(counts.get<std::vector<std::uint32_t>>(), w, h);
        }
      }
      inst.area = a.contains("area") ? a["area"].get<double>() : inst.box.area();
      img.instances.push_back(std::move(inst));
    }
  return ds;
}

inline Dataset ingest_coco(const fs::path& annotation_file, const fs::path& image_root,
                           const CocoOptions& opt = {}) {
  std::ifstream in(annotation_file, std::ios::binary);
  if (!in) throw Error("cannot open annotation file " + annotation_file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ingest_coco_json(ss.str(), image_root, opt);
}

struct ExportOptions {
  bool include_unlabeled = false;
  bool include_masks = true;
};

inline json to_coco_json(const Dataset& ds, const ExportOptions& opt = {}) {
  json doc;
  doc["categories"] = json::array();
  for (const auto& c : ds.categories) doc["categories"].push_back({{"id", c.id}, {"name", c.name}});
  doc["images"] = json::array();
  doc["annotations"] = json::array();
  int ann_id = 1;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    const int coco_id = int(i) + 1;
    doc["images"].push_back({{"id", coco_id},
                             {"image_key", img.image_id},
                             {"file_name", img.file_name},
                             {"width", img.width()},
                             {"height", img.height()}});
    for (const auto& inst : img.instances) {
      if (!inst.labeled() && !opt.include_unlabeled) continue;
      json a{{"id", ann_id++},
             {"image_id", coco_id},
             {"category_id", inst.class_id},
             {"bbox", {inst.box.x1, inst.box.y1, inst.box.width(), inst.box.height()}},
             {"area", inst.area},
             {"iscrowd", 0}};
      if (!inst.labeled()) a["unlabeled"] = true;
      if (opt.include_masks && inst.mask)
        a["segmentation"] = {{"size", {inst.mask->height, inst.mask->width}},
                             {"counts", rle_encode(*inst.mask)}};
      doc["annotations"].push_back(std::move(a));
    }
  }
  return doc;
}

inline void write_json(const fs::path& path, const json& doc, int indent = -1) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << doc.dump(indent) << "\n";
}

inline json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(path.string() + ": malformed JSON at byte " + std::to_string(e.byte));
  }
}

inline void export_coco(const Dataset& ds, const fs::path& annotation_file, const ExportOptions& opt = {}) {
  write_json(annotation_file, to_coco_json(ds, opt));
}

// Writes images/<file_name> plus annotations.json (labeled only) and, when
// the dataset carries unlabeled ground truth, diagnostic_gt.json.
inline void write_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir / "images");
  for (const auto& img : ds.images) write_png(dir / "images" / img.file_name, img.image);
  export_coco(ds, dir / "annotations.json");
  if (ds.instance_count(true) != ds.instance_count(false))
    export_coco(ds, dir / "diagnostic_gt.json", {.include_unlabeled = true});
}

// Reads a directory written by write_dataset, preferring the diagnostic
// ground truth when `with_unlabeled` is set and it exists.
inline Dataset read_dataset(const fs::path& dir, bool with_unlabeled = false) {
  const fs::path diag = dir / "diagnostic_gt.json";
  if (with_unlabeled && fs::exists(diag))
    return ingest_coco(diag, dir / "images", {.allow_unlabeled = true});
  return ingest_coco(dir / "annotations.json", dir / "images");
}

}  // namespace uofs
