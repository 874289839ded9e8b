#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "uofs/datamodel.hpp"
#include "uofs/detector.hpp"
#include "uofs/diagnostics.hpp"
#include "uofs/error.hpp"
#include "uofs/evaluation.hpp"
#include "uofs/pbbs.hpp"
#include "uofs/rng.hpp"
#include "uofs/training.hpp"

namespace uofs {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Enum names

namespace detail {

template <class E, std::size_t N>
E parse_enum(const std::string& key, std::string v, const std::array<std::pair<E, const char*>, N>& names) {
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return char(std::tolower(c)); });
  for (const auto& [e, n] : names)
    if (v == n) return e;
  std::string options;
  for (const auto& [e, n] : names) options += std::string(options.empty() ? "" : ", ") + n;
  throw ConfigError(key + ": unknown value '" + v + "' (expected one of " + options + ")");
}

template <class E, std::size_t N>
std::string enum_name(E e, const std::array<std::pair<E, const char*>, N>& names) {
  for (const auto& [k, n] : names)
    if (k == e) return n;
  return "?";
}

inline constexpr std::array<std::pair<HeadKind, const char*>, 4> kHeadKinds = {
    {{HeadKind::kUofs, "uofs"}, {HeadKind::kOfs, "ofs"}, {HeadKind::kCosine, "cosine"},
     {HeadKind::kEuclidean, "euclidean"}}};
inline constexpr std::array<std::pair<Orientation, const char*>, 2> kOrientations = {
    {{Orientation::kOuter, "outer"}, {Orientation::kInner, "inner"}}};
inline constexpr std::array<std::pair<ObjSquash, const char*>, 2> kSquashes = {
    {{ObjSquash::kClamp, "clamp"}, {ObjSquash::kSigmoid, "sigmoid"}}};
inline constexpr std::array<std::pair<SadaMode, const char*>, 5> kSadaModes = {
    {{SadaMode::kNone, "none"}, {SadaMode::kUnified, "unified"}, {SadaMode::kSada1, "sada1"},
     {SadaMode::kSada2, "sada2"}, {SadaMode::kSada3, "sada3"}}};
inline constexpr std::array<std::pair<RegMode, const char*>, 2> kRegModes = {
    {{RegMode::kClassAgnostic, "agnostic"}, {RegMode::kClassSpecific, "specific"}}};
inline constexpr std::array<std::pair<BackgroundKind, const char*>, 3> kBackgrounds = {
    {{BackgroundKind::kFixedGray, "fixed_gray"}, {BackgroundKind::kNormalizedGray, "normalized_gray"},
     {BackgroundKind::kPool, "pool"}}};
inline constexpr std::array<std::pair<NormalizeScope, const char*>, 2> kScopes = {
    {{NormalizeScope::kImage, "image"}, {NormalizeScope::kDataset, "dataset"}}};

}  // namespace detail

inline std::string to_string(HeadKind v) { return detail::enum_name(v, detail::kHeadKinds); }
inline std::string to_string(Orientation v) { return detail::enum_name(v, detail::kOrientations); }
inline std::string to_string(ObjSquash v) { return detail::enum_name(v, detail::kSquashes); }
inline std::string to_string(SadaMode v) { return detail::enum_name(v, detail::kSadaModes); }
inline std::string to_string(RegMode v) { return detail::enum_name(v, detail::kRegModes); }
inline std::string to_string(BackgroundKind v) { return detail::enum_name(v, detail::kBackgrounds); }
inline std::string to_string(NormalizeScope v) { return detail::enum_name(v, detail::kScopes); }

inline HeadKind parse_head_kind(const std::string& s, const std::string& key = "head.kind") {
  return detail::parse_enum(key, s, detail::kHeadKinds);
}
inline SadaMode parse_sada_mode(const std::string& s, const std::string& key = "model.sada") {
  return detail::parse_enum(key, s, detail::kSadaModes);
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct DataConfig {
  std::string source = "synthetic";  // or "coco"
  SynthConfig synth;
  int n_train = 200;
  int n_test = 50;
  double test_distractor_novel_fraction = 0.0;
  int k = 2;
  std::uint64_t split_seed = 0;
  // COCO source
  std::string train_annotations, train_images, test_annotations, test_images;
  std::vector<int> novel_classes;
};

struct PbbsConfig {
  BackgroundSpec background;
  std::string segmenter_command;
};

struct ExperimentConfig {
  std::string name = "default";
  DataConfig data;
  PbbsConfig pbbs;
  ModelConfig model;
  TrainConfig train;
  int checkpoint_every = 0;  // periodic resumable state during base training, 0 disables
  EvalConfig eval;
  DiagConfig diag;
};

inline json to_json(const ExperimentConfig& c) {
  const auto& d = c.data;
  const auto& s = d.synth;
  const auto& b = c.model.backbone;
  const auto& t = c.train;
  const auto& e = c.eval;
  const auto& bg = c.pbbs.background;
  return {
      {"name", c.name},
      {"data",
       {{"source", d.source},
        {"n_train", d.n_train},
        {"n_test", d.n_test},
        {"n_base_classes", s.n_base_classes},
        {"n_novel_classes", s.n_novel_classes},
        {"image_size", s.image_size},
        {"min_instances", s.min_instances},
        {"max_instances", s.max_instances},
        {"min_size", s.min_size},
        {"max_size", s.max_size},
        {"distractor_rate", s.distractor_rate},
        {"distractor_novel_fraction", s.distractor_novel_fraction},
        {"test_distractor_novel_fraction", d.test_distractor_novel_fraction},
        {"seed", s.seed},
        {"k", d.k},
        {"split_seed", d.split_seed},
        {"train_annotations", d.train_annotations},
        {"train_images", d.train_images},
        {"test_annotations", d.test_annotations},
        {"test_images", d.test_images},
        {"novel_classes", d.novel_classes}}},
      {"pbbs",
       {{"background", to_string(bg.kind)},
        {"fixed_rgb", bg.fixed_rgb},
        {"pool_dir", bg.pool_dir.string()},
        {"normalize_scope", to_string(bg.scope)},
        {"segmenter_command", c.pbbs.segmenter_command}}},
      {"model",
       {{"channels", b.channels_per_stage},
        {"roi_grid", b.roi_grid},
        {"feat_dim", b.feat_dim},
        {"head_channels", b.head_channels},
        {"head_depth", b.head_depth},
        {"sada", to_string(c.model.sada)},
        {"reg_mode", to_string(c.model.reg_mode)},
        {"feat_init_gain", c.model.feat_init_gain}}},
      {"head",
       {{"kind", to_string(c.model.head_kind)},
        {"n_unknown", c.model.n_unknown},
        {"tau", c.model.tau},
        {"orientation", to_string(c.model.orientation)},
        {"obj_squash", to_string(c.model.obj_squash)},
        {"eps", c.model.eps}}},
      {"train",
       {{"alpha", t.alpha},
        {"batch_pairing", t.batch_pairing},
        {"iterations_base", t.iterations_base},
        {"iterations_finetune", t.iterations_finetune},
        {"lr", t.lr},
        {"finetune_lr", t.finetune_lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"warmup", t.warmup},
        {"flip_prob", t.flip_prob},
        {"paired", t.paired},
        {"lambda_reg", t.lambda_reg},
        {"grad_clip", t.grad_clip},
        {"obj_lr_scale", t.obj_lr_scale},
        {"unfreeze_head_stack", t.unfreeze_head_stack},
        {"seed", t.seed},
        {"checkpoint_every", c.checkpoint_every},
        {"sampler",
         {{"n_pos", t.sampler.n_pos},
          {"n_neg", t.sampler.n_neg},
          {"jitter", t.sampler.jitter},
          {"min_size", t.sampler.min_size},
          {"max_size", t.sampler.max_size},
          {"hard_negative_fraction", t.sampler.hard_negative_fraction}}}}},
      {"eval",
       {{"iou", e.iou},
        {"nms_iou", e.nms_iou},
        {"score_floor", e.score_floor},
        {"topk", e.topk},
        {"grid_scales", e.grid_scales},
        {"grid_step_frac", e.grid_step_frac},
        {"refine_boxes", e.refine_boxes},
        {"silhouette_raw", e.silhouette_raw},
        {"bg_boxes_per_image", c.diag.bg_boxes_per_image},
        {"heatmap_samples", c.diag.heatmap_samples},
        {"histogram_bins", c.diag.histogram_bins}}}};
}

namespace detail {

template <class V>
void get(const json& j, const std::string& section, const char* key, V& out) {
  try {
    j.at(section).at(key).get_to(out);
  } catch (const json::exception&) {
    throw ConfigError(section + "." + key + ": wrong type (got " + j.at(section).at(key).dump() + ")");
  }
}

inline std::string get_str(const json& j, const std::string& section, const char* key) {
  std::string s;
  get(j, section, key, s);
  return s;
}

}  // namespace detail

// Builds a config from a complete document (defaults merged in).
inline ExperimentConfig from_json(const json& j) {
  using detail::get;
  using detail::get_str;
  ExperimentConfig c;
  try {
    j.at("name").get_to(c.name);
  } catch (const json::exception&) {
    throw ConfigError("name: expected a string");
  }
  auto& d = c.data;
  auto& s = d.synth;
  get(j, "data", "source", d.source);
  if (d.source != "synthetic" && d.source != "coco")
    throw ConfigError("data.source: expected 'synthetic' or 'coco', got '" + d.source + "'");
  get(j, "data", "n_train", d.n_train);
  get(j, "data", "n_test", d.n_test);
  get(j, "data", "n_base_classes", s.n_base_classes);
  get(j, "data", "n_novel_classes", s.n_novel_classes);
  get(j, "data", "image_size", s.image_size);
  get(j, "data", "min_instances", s.min_instances);
  get(j, "data", "max_instances", s.max_instances);
  get(j, "data", "min_size", s.min_size);
  get(j, "data", "max_size", s.max_size);
  get(j, "data", "distractor_rate", s.distractor_rate);
  get(j, "data", "distractor_novel_fraction", s.distractor_novel_fraction);
  get(j, "data", "test_distractor_novel_fraction", d.test_distractor_novel_fraction);
  get(j, "data", "seed", s.seed);
  get(j, "data", "k", d.k);
  get(j, "data", "split_seed", d.split_seed);
  get(j, "data", "train_annotations", d.train_annotations);
  get(j, "data", "train_images", d.train_images);
  get(j, "data", "test_annotations", d.test_annotations);
  get(j, "data", "test_images", d.test_images);
  get(j, "data", "novel_classes", d.novel_classes);
  if (d.n_train < 1 || d.n_test < 1) throw ConfigError("data.n_train and data.n_test must be >= 1");
  if (d.k < 1) throw ConfigError("data.k must be >= 1");

  auto& bg = c.pbbs.background;
  bg.kind = detail::parse_enum("pbbs.background", get_str(j, "pbbs", "background"), detail::kBackgrounds);
  get(j, "pbbs", "fixed_rgb", bg.fixed_rgb);
  bg.pool_dir = get_str(j, "pbbs", "pool_dir");
  bg.scope = detail::parse_enum("pbbs.normalize_scope", get_str(j, "pbbs", "normalize_scope"), detail::kScopes);
  get(j, "pbbs", "segmenter_command", c.pbbs.segmenter_command);

  auto& m = c.model;
  auto& b = m.backbone;
  get(j, "model", "channels", b.channels_per_stage);
  b.stride = 1 << std::min<std::size_t>(b.channels_per_stage.size(), 20);
  get(j, "model", "roi_grid", b.roi_grid);
  get(j, "model", "feat_dim", b.feat_dim);
  get(j, "model", "head_channels", b.head_channels);
  get(j, "model", "head_depth", b.head_depth);
  m.sada = parse_sada_mode(get_str(j, "model", "sada"));
  m.reg_mode = detail::parse_enum("model.reg_mode", get_str(j, "model", "reg_mode"), detail::kRegModes);
  get(j, "model", "feat_init_gain", m.feat_init_gain);

  m.head_kind = parse_head_kind(get_str(j, "head", "kind"));
  get(j, "head", "n_unknown", m.n_unknown);
  get(j, "head", "tau", m.tau);
  m.orientation = detail::parse_enum("head.orientation", get_str(j, "head", "orientation"), detail::kOrientations);
  m.obj_squash = detail::parse_enum("head.obj_squash", get_str(j, "head", "obj_squash"), detail::kSquashes);
  get(j, "head", "eps", m.eps);

  auto& t = c.train;
  get(j, "train", "alpha", t.alpha);
  get(j, "train", "batch_pairing", t.batch_pairing);
  get(j, "train", "iterations_base", t.iterations_base);
  get(j, "train", "iterations_finetune", t.iterations_finetune);
  get(j, "train", "lr", t.lr);
  get(j, "train", "finetune_lr", t.finetune_lr);
  get(j, "train", "momentum", t.momentum);
  get(j, "train", "weight_decay", t.weight_decay);
  get(j, "train", "warmup", t.warmup);
  get(j, "train", "flip_prob", t.flip_prob);
  get(j, "train", "paired", t.paired);
  get(j, "train", "lambda_reg", t.lambda_reg);
  get(j, "train", "grad_clip", t.grad_clip);
  get(j, "train", "obj_lr_scale", t.obj_lr_scale);
  get(j, "train", "unfreeze_head_stack", t.unfreeze_head_stack);
  get(j, "train", "seed", t.seed);
  get(j, "train", "checkpoint_every", c.checkpoint_every);
  const json& sj = j.at("train").at("sampler");
  const json wrapped = {{"train.sampler", sj}};
  get(wrapped, "train.sampler", "n_pos", t.sampler.n_pos);
  get(wrapped, "train.sampler", "n_neg", t.sampler.n_neg);
  get(wrapped, "train.sampler", "jitter", t.sampler.jitter);
  get(wrapped, "train.sampler", "min_size", t.sampler.min_size);
  get(wrapped, "train.sampler", "max_size", t.sampler.max_size);
  get(wrapped, "train.sampler", "hard_negative_fraction", t.sampler.hard_negative_fraction);
  t.sampler.seed = t.seed;
  validate(t);

  auto& e = c.eval;
  get(j, "eval", "iou", e.iou);
  get(j, "eval", "nms_iou", e.nms_iou);
  get(j, "eval", "score_floor", e.score_floor);
  get(j, "eval", "topk", e.topk);
  get(j, "eval", "grid_scales", e.grid_scales);
  get(j, "eval", "grid_step_frac", e.grid_step_frac);
  get(j, "eval", "refine_boxes", e.refine_boxes);
  get(j, "eval", "silhouette_raw", e.silhouette_raw);
  get(j, "eval", "bg_boxes_per_image", c.diag.bg_boxes_per_image);
  get(j, "eval", "heatmap_samples", c.diag.heatmap_samples);
  get(j, "eval", "histogram_bins", c.diag.histogram_bins);
  if (e.grid_scales.empty() || !(e.grid_step_frac > 0)) throw ConfigError("eval grid must be non-empty");
  if (e.topk < 1) throw ConfigError("eval.topk must be >= 1");
  c.diag.seed = t.seed;
  return c;
}

namespace detail {

// Copies `src` into `dst`, rejecting keys that `dst` (the defaults) lacks.
inline void merge_known(json& dst, const json& src, const std::string& prefix) {
  if (!src.is_object()) throw ConfigError((prefix.empty() ? "config" : prefix) + ": expected an object");
  for (const auto& [k, v] : src.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (!dst.contains(k)) throw ConfigError("unknown config key '" + path + "'");
    if (dst[k].is_object())
      merge_known(dst[k], v, path);
    else
      dst[k] = v;
  }
}

// CLI values: JSON when they parse, bare strings otherwise.
inline json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

}  // namespace detail

// Applies "a.b.c=value" to a full document.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  const std::string key = assignment.substr(0, eq);
  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!node->is_object() || !node->contains(parts[i])) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[parts[i]];
  }
  if (node->is_object()) throw ConfigError("'" + key + "' is a section, not a value");
  json v = detail::parse_value(assignment.substr(eq + 1));
  if (node->is_string() && !v.is_string()) v = assignment.substr(eq + 1);
  if (node->is_number_float() && v.is_number()) v = v.get<double>();
  *node = std::move(v);
}

// Defaults, then the file (if any), then overrides.
inline json resolve_config_json(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  json doc = to_json(ExperimentConfig{});
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    json user;
    try {
      user = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + file.string() + " is not valid JSON at byte " + std::to_string(e.byte));
    }
    detail::merge_known(doc, user, "");
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return doc;
}

inline ExperimentConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  return from_json(resolve_config_json(file, overrides));
}

// ---------------------------------------------------------------------------
// Fingerprints

enum class Stage { kSynth, kPbbs, kTrainBase, kFinetune, kEvaluate, kDiagnose };

inline std::string stage_dir(Stage s) {
  switch (s) {
    case Stage::kSynth: return "synth";
    case Stage::kPbbs: return "pbbs";
    case Stage::kTrainBase: return "train-base";
    case Stage::kFinetune: return "finetune";
    case Stage::kEvaluate: return "evaluate";
    default: return "diagnose";
  }
}

inline std::string stage_command(Stage s) { return s == Stage::kSynth ? "synth-gen" : s == Stage::kPbbs ? "build-pbbs" : stage_dir(s); }

// The part of the config a stage's outputs depend on. Base training does not
// see the shot count or split seed; evaluation keys only matter downstream of
// fine-tuning.
inline json stage_view(const json& doc, Stage s) {
  json v = json::object();
  json data = doc.at("data");
  data.erase("k");
  data.erase("split_seed");
  v["data"] = data;
  if (s == Stage::kSynth) return v;
  v["pbbs"] = doc.at("pbbs");
  if (s == Stage::kPbbs) return v;
  v["model"] = doc.at("model");
  v["head"] = doc.at("head");
  json train = doc.at("train");
  if (s == Stage::kTrainBase) {
    for (const char* k : {"iterations_finetune", "finetune_lr", "unfreeze_head_stack", "checkpoint_every"}) train.erase(k);
    v["train"] = train;
    return v;
  }
  train.erase("checkpoint_every");
  v["train"] = train;
  v["data"] = doc.at("data");
  if (s == Stage::kFinetune) return v;
  v["eval"] = doc.at("eval");
  return v;
}

inline std::string hex64(std::uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) s[i] = digits[h & 15];
  return s;
}

inline std::string fingerprint(const json& doc, Stage s) { return hex64(fnv1a(stage_view(doc, s).dump())); }

}  // namespace uofs
