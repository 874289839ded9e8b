#pragma once

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "uofs/checkpoint.hpp"
#include "uofs/coco.hpp"
#include "uofs/config.hpp"
#include "uofs/datamodel.hpp"
#include "uofs/diagnostics.hpp"
#include "uofs/evaluation.hpp"
#include "uofs/pbbs.hpp"
#include "uofs/training.hpp"

namespace uofs {

namespace fs = std::filesystem;

// Resolved configuration plus where its run lives.
struct RunContext {
  fs::path runs_root = "runs";
  json doc;
  ExperimentConfig cfg;
  bool force = false;
  std::ostream* log = &std::cout;

  fs::path run_dir() const { return runs_root / cfg.name; }
  fs::path stage_path(Stage s) const { return run_dir() / stage_dir(s); }
};

inline fs::path default_runs_root() {
  if (const char* env = std::getenv("UOFS_RUNS_DIR"); env && *env) return env;
  return "runs";
}

inline RunContext make_context(const fs::path& config_file, const std::vector<std::string>& overrides,
                               fs::path runs_root = {}) {
  RunContext ctx;
  ctx.doc = resolve_config_json(config_file, overrides);
  ctx.cfg = from_json(ctx.doc);
  ctx.runs_root = runs_root.empty() ? default_runs_root() : runs_root;
  return ctx;
}

// ---------------------------------------------------------------------------
// Stage bookkeeping

inline std::optional<json> read_stage_record(const RunContext& ctx, Stage s) {
  const fs::path p = ctx.stage_path(s) / "stage.json";
  if (!fs::exists(p)) return std::nullopt;
  return read_json(p);
}

// Throws unless the stage finished under the current configuration.
inline json require_stage(const RunContext& ctx, Stage s) {
  const auto rec = read_stage_record(ctx, s);
  const std::string cmd = stage_command(s);
  if (!rec)
    throw DependencyError("missing " + stage_dir(s) + " output under " + ctx.run_dir().string() + "; run `uofs " +
                              cmd + "` first",
                          cmd);
  if (rec->at("fingerprint") != fingerprint(ctx.doc, s))
    throw DependencyError(stage_dir(s) + " output in " + ctx.stage_path(s).string() +
                              " was produced by a different configuration (fingerprint " +
                              rec->at("fingerprint").get<std::string>() + "); rerun `uofs " + cmd + "`",
                          cmd);
  return *rec;
}

// True when the stage should run. Writes the config snapshot.
inline bool begin_stage(const RunContext& ctx, Stage s) {
  const auto rec = read_stage_record(ctx, s);
  if (rec && !ctx.force && rec->at("fingerprint") == fingerprint(ctx.doc, s)) {
    *ctx.log << stage_dir(s) << ": up to date (" << ctx.stage_path(s).string() << ")\n";
    return false;
  }
  fs::create_directories(ctx.stage_path(s));
  fs::remove(ctx.stage_path(s) / "stage.json");
  write_json(ctx.stage_path(s) / "config.json", ctx.doc, 2);
  return true;
}

inline void finish_stage(const RunContext& ctx, Stage s, json extra = json::object()) {
  json rec = {{"stage", stage_dir(s)}, {"fingerprint", fingerprint(ctx.doc, s)}, {"outputs", std::move(extra)}};
  write_json(ctx.stage_path(s) / "stage.json", rec, 2);
}

inline std::set<int> novel_class_set(const ExperimentConfig& cfg) {
  if (cfg.data.source == "synthetic") return synth_novel_classes(cfg.data.synth);
  return {cfg.data.novel_classes.begin(), cfg.data.novel_classes.end()};
}

inline std::set<int> base_class_set(const Dataset& ds, const std::set<int>& novel) {
  std::set<int> out;
  for (const auto& c : ds.categories)
    if (!novel.contains(c.id)) out.insert(c.id);
  return out;
}

inline FewShotSplit novel_only_split(const std::set<int>& novel) {
  FewShotSplit s;
  s.novel_classes = novel;
  return s;
}

// ---------------------------------------------------------------------------
// Stages

inline void cmd_synth_gen(const RunContext& ctx) {
  if (!begin_stage(ctx, Stage::kSynth)) return;
  const auto& d = ctx.cfg.data;
  const fs::path dir = ctx.stage_path(Stage::kSynth);
  Dataset train, test;
  if (d.source == "synthetic") {
    validate(d.synth);
    train = generate_synthetic(d.synth, d.n_train, 0);
    SynthConfig tc = d.synth;
    tc.distractor_novel_fraction = d.test_distractor_novel_fraction;
    test = generate_synthetic(tc, d.n_test, 1000000);
  } else {
    if (d.novel_classes.empty()) throw ConfigError("data.novel_classes must list the novel class ids for COCO input");
    train = ingest_coco(d.train_annotations, d.train_images, {.allow_unlabeled = true});
    test = ingest_coco(d.test_annotations, d.test_images, {.allow_unlabeled = true});
    for (const auto& e : train.errors) *ctx.log << "ingest: " << e.image_id << ": " << e.message << "\n";
  }
  write_dataset(train, dir / "train");
  write_dataset(test, dir / "test");
  const auto novel = novel_class_set(ctx.cfg);
  finish_stage(ctx, Stage::kSynth,
               {{"train_images", train.images.size()},
                {"test_images", test.images.size()},
                {"train_instances", train.instance_count(true)},
                {"base_classes", base_class_set(train, novel)},
                {"novel_classes", novel}});
  *ctx.log << "synth-gen: " << train.images.size() << " train / " << test.images.size() << " test images in "
           << dir.string() << "\n";
}

inline Dataset load_train_set(const RunContext& ctx) {
  return read_dataset(ctx.stage_path(Stage::kSynth) / "train", true);
}

inline Dataset load_test_set(const RunContext& ctx, bool with_unlabeled) {
  return read_dataset(ctx.stage_path(Stage::kSynth) / "test", with_unlabeled);
}

// Textured backgrounds for POOL runs that name no pool directory.
inline void write_synthetic_pool(const fs::path& dir, int count, int size, std::uint64_t seed) {
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed({seed, std::uint64_t(i), 0x706f6f6cULL}));
    char name[32];
    std::snprintf(name, sizeof name, "bg_%03d.png", i);
    write_png(dir / name, detail::render_background(size, rng));
  }
}

inline void cmd_build_pbbs(const RunContext& ctx) {
  require_stage(ctx, Stage::kSynth);
  if (!begin_stage(ctx, Stage::kPbbs)) return;
  const fs::path dir = ctx.stage_path(Stage::kPbbs);
  const auto novel = novel_class_set(ctx.cfg);
  const Dataset base = base_view(load_train_set(ctx), novel_only_split(novel));
  BackgroundSpec spec = ctx.cfg.pbbs.background;
  if (spec.kind == BackgroundKind::kPool && spec.pool_dir.empty()) {
    spec.pool_dir = dir / "pool";
    write_synthetic_pool(spec.pool_dir, 16, ctx.cfg.data.synth.image_size, ctx.cfg.data.synth.seed);
  }
  std::optional<Segmenter> seg;
  if (!ctx.cfg.pbbs.segmenter_command.empty())
    seg = external_command_segmenter(ctx.cfg.pbbs.segmenter_command, dir / "scratch");
  const auto res = build_pbbs_dataset(base, spec, dir, fingerprint(ctx.doc, Stage::kPbbs), seg ? &*seg : nullptr);
  finish_stage(ctx, Stage::kPbbs, {{"images", res.dataset.images.size()}, {"error_count", res.error_count()}});
  *ctx.log << "build-pbbs: " << res.dataset.images.size() << " images, " << res.error_count() << " skipped\n";
}

inline void write_metrics(const fs::path& file, const std::vector<StepRecord>& history) {
  std::ofstream out(file);
  for (const auto& r : history)
    out << json{{"step", r.step}, {"L_BS", r.l_bs}, {"L_PBBS", r.l_pbbs}, {"L_det", r.l_det}, {"lr", r.lr}}.dump()
        << "\n";
}

// Loads the PBBS set and checks it was built from this base set.
inline Dataset load_pbbs(const RunContext& ctx, const Dataset& base) {
  const fs::path dir = ctx.stage_path(Stage::kPbbs);
  const json manifest = read_json(dir / "manifest.json");
  if (manifest.at("fingerprint") != fingerprint(ctx.doc, Stage::kPbbs))
    throw DependencyError("PBBS manifest fingerprint does not match the configuration; rerun `uofs build-pbbs`",
                          "build-pbbs");
  Dataset pbbs = read_dataset(dir);
  std::set<std::string> ids;
  for (const auto& img : base.images) ids.insert(img.image_id);
  for (const auto& img : pbbs.images)
    if (!ids.contains(img.image_id))
      throw Error("PBBS image " + img.image_id + " has no source image in the base set");
  return pbbs;
}

inline void cmd_train_base(const RunContext& ctx) {
  require_stage(ctx, Stage::kSynth);
  const bool uses_pbbs = ctx.cfg.model.head_kind == HeadKind::kUofs;
  if (uses_pbbs) require_stage(ctx, Stage::kPbbs);
  if (!begin_stage(ctx, Stage::kTrainBase)) return;
  const fs::path dir = ctx.stage_path(Stage::kTrainBase);
  const std::string fp = fingerprint(ctx.doc, Stage::kTrainBase);
  const auto novel = novel_class_set(ctx.cfg);
  const Dataset full = load_train_set(ctx);
  const Dataset base = base_view(full, novel_only_split(novel));
  Dataset pbbs;
  if (uses_pbbs) pbbs = load_pbbs(ctx, base);
  const auto base_classes = base_class_set(full, novel);
  const std::vector<int> classes(base_classes.begin(), base_classes.end());

  TrainState<float> state;
  const fs::path resume = dir / "state.ckpt";
  if (fs::exists(resume)) {
    auto loaded = load_checkpoint(resume);
    if (loaded.meta.fingerprint == fp) {
      state = std::move(loaded.state);
      *ctx.log << "train-base: resuming at step " << state.step << "\n";
    }
  }
  if (state.step == 0) state = init_state<float>(ctx.cfg.model, classes, base, ctx.cfg.train.seed);

  write_metrics(dir / "metrics.jsonl", state.history);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::app);
  const int every = ctx.cfg.checkpoint_every;
  const int total = ctx.cfg.train.iterations_base;
  train_base<float>(state, base, uses_pbbs ? &pbbs : nullptr, ctx.cfg.train, [&](const StepRecord& r) {
    metrics << json{{"step", r.step}, {"L_BS", r.l_bs}, {"L_PBBS", r.l_pbbs}, {"L_det", r.l_det}, {"lr", r.lr}}.dump()
            << "\n";
    if (every > 0 && (r.step + 1) % every == 0 && r.step + 1 < total) {
      metrics.flush();
      save_checkpoint(resume, state, {fp, {{"stage", "train-base"}}});
    }
    if ((r.step + 1) % 100 == 0)
      *ctx.log << "train-base: step " << r.step + 1 << "/" << total << " L_det=" << r.l_det << "\n";
  });
  metrics.close();
  save_checkpoint(dir / "model.ckpt", state, {fp, {{"stage", "train-base"}}});
  fs::remove(resume);

  const Dataset test = load_test_set(ctx, false);
  const EvalReport rep = evaluate(state.model, test, base_classes, {}, ctx.cfg.eval);
  json summary = to_json(rep);
  write_json(dir / "base_eval.json", summary, 2);
  finish_stage(ctx, Stage::kTrainBase, {{"steps", state.step}, {"bAP50", rep.bAP50}});
  *ctx.log << "train-base: done, base-class bAP50=" << rep.bAP50 << "\n";
}

inline void cmd_finetune(const RunContext& ctx) {
  require_stage(ctx, Stage::kSynth);
  require_stage(ctx, Stage::kTrainBase);
  if (!begin_stage(ctx, Stage::kFinetune)) return;
  const fs::path dir = ctx.stage_path(Stage::kFinetune);
  auto base_ckpt = load_checkpoint(ctx.stage_path(Stage::kTrainBase) / "model.ckpt");
  if (base_ckpt.meta.fingerprint != fingerprint(ctx.doc, Stage::kTrainBase))
    throw DependencyError("base checkpoint fingerprint does not match the configuration; rerun `uofs train-base`",
                          "train-base");
  const auto novel = novel_class_set(ctx.cfg);
  const Dataset full = load_train_set(ctx);
  const FewShotSplit split = make_split(full, novel, ctx.cfg.data.k, ctx.cfg.data.split_seed);
  const Dataset ft = finetune_view(full, split);
  const std::vector<int> novel_ids(novel.begin(), novel.end());

  std::ofstream metrics(dir / "metrics.jsonl");
  TrainState<float> state =
      finetune<float>(base_ckpt.state.model, ft, novel_ids, ctx.cfg.train, [&](const StepRecord& r) {
        metrics << json{{"step", r.step}, {"L_det", r.l_det}, {"lr", r.lr}}.dump() << "\n";
      });
  metrics.close();
  const std::string fp = fingerprint(ctx.doc, Stage::kFinetune);
  save_checkpoint(dir / "model.ckpt", state, {fp, {{"stage", "finetune"}}});
  json shots = json::object();
  for (const auto* m : {&split.novel_sample_ids, &split.base_sample_ids})
    for (const auto& [c, refs] : *m) {
      json arr = json::array();
      for (const auto& r : refs) arr.push_back({r.image_id, r.instance_index});
      shots[std::to_string(c)] = arr;
    }
  write_json(dir / "split.json", {{"k", split.k}, {"novel_classes", split.novel_classes}, {"shots", shots}}, 2);
  finish_stage(ctx, Stage::kFinetune, {{"steps", state.step}, {"finetune_images", ft.images.size()}});
  *ctx.log << "finetune: done on " << ft.images.size() << " images\n";
}

inline void cmd_evaluate(const RunContext& ctx) {
  require_stage(ctx, Stage::kSynth);
  require_stage(ctx, Stage::kTrainBase);
  require_stage(ctx, Stage::kFinetune);
  if (!begin_stage(ctx, Stage::kEvaluate)) return;
  const fs::path dir = ctx.stage_path(Stage::kEvaluate);
  const auto ckpt = load_checkpoint(ctx.stage_path(Stage::kFinetune) / "model.ckpt");
  if (ckpt.meta.fingerprint != fingerprint(ctx.doc, Stage::kFinetune))
    throw DependencyError("fine-tuned checkpoint does not match the configuration; rerun `uofs finetune`",
                          "finetune");
  const auto novel = novel_class_set(ctx.cfg);
  const Dataset test = load_test_set(ctx, false);
  const auto base = base_class_set(test, novel);
  std::vector<DetectionResult> dets;
  const EvalReport rep = evaluate(ckpt.state.model, test, base, novel, ctx.cfg.eval, &dets);
  json jd = json::array();
  for (const auto& d : dets) jd.push_back(to_json(d));
  write_json(dir / "detections.json", jd);
  write_json(dir / "report.json", to_json(rep), 2);
  finish_stage(ctx, Stage::kEvaluate, {{"nAP50", rep.nAP50}, {"bAP50", rep.bAP50}});
  *ctx.log << "evaluate: nAP50=" << rep.nAP50 << " bAP50=" << rep.bAP50 << "\n";
}

// Diagnostics on the test set for the base (default) or fine-tuned checkpoint.
inline void cmd_diagnose(const RunContext& ctx, bool use_finetuned = false) {
  require_stage(ctx, Stage::kSynth);
  require_stage(ctx, Stage::kTrainBase);
  if (use_finetuned) require_stage(ctx, Stage::kFinetune);
  if (!begin_stage(ctx, Stage::kDiagnose)) return;
  const fs::path dir = ctx.stage_path(Stage::kDiagnose);
  const Stage src = use_finetuned ? Stage::kFinetune : Stage::kTrainBase;
  const auto ckpt = load_checkpoint(ctx.stage_path(src) / "model.ckpt");
  if (ckpt.meta.fingerprint != fingerprint(ctx.doc, src))
    throw DependencyError("checkpoint does not match the configuration; rerun `uofs " + stage_command(src) + "`",
                          stage_command(src));
  const auto novel = novel_class_set(ctx.cfg);
  const Dataset test = load_test_set(ctx, true);
  const DiagReport rep = diagnose(ckpt.state.model, test, novel, ctx.cfg.diag);
  write_diagnostics(ckpt.state.model, test, rep, ctx.cfg.diag, dir);
  json summary = json::object();
  for (const auto& [g, s] : rep.groups) summary[group_name(g)] = s.mean_norm();
  finish_stage(ctx, Stage::kDiagnose, {{"checkpoint", stage_dir(src)}, {"mean_norm", summary}});
  *ctx.log << "diagnose: wrote " << (dir / "report.json").string() << "\n";
}

inline void run_pipeline(const RunContext& ctx) {
  cmd_synth_gen(ctx);
  if (ctx.cfg.model.head_kind == HeadKind::kUofs) cmd_build_pbbs(ctx);
  cmd_train_base(ctx);
  cmd_finetune(ctx);
  cmd_evaluate(ctx);
}

// ---------------------------------------------------------------------------
// Ablation

struct AblationVariant {
  std::string label;
  std::vector<std::string> overrides;
};

inline std::vector<AblationVariant> ablation_variants(const std::string& axis) {
  if (axis == "feature_space")
    return {{"EFS (euclidean)", {"head.kind=euclidean"}},
            {"EFS (cosine)", {"head.kind=cosine"}},
            {"OFS", {"head.kind=ofs"}},
            {"UOFS", {"head.kind=uofs"}}};
  if (axis == "background")
    return {{"fixed gray", {"pbbs.background=fixed_gray"}},
            {"normalized gray", {"pbbs.background=normalized_gray"}},
            {"image pool", {"pbbs.background=pool"}}};
  if (axis == "n_unknown")
    return {{"1", {"head.n_unknown=1"}}, {"3", {"head.n_unknown=3"}}, {"5", {"head.n_unknown=5"}},
            {"10", {"head.n_unknown=10"}}};
  if (axis == "orientation")
    return {{"outer", {"head.orientation=outer"}}, {"inner", {"head.orientation=inner"}}};
  if (axis == "reg_mode")
    return {{"class-specific", {"model.reg_mode=specific"}}, {"class-agnostic", {"model.reg_mode=agnostic"}}};
  if (axis == "sada_mode")
    return {{"none", {"model.sada=none"}},   {"unified", {"model.sada=unified"}}, {"SADA-1", {"model.sada=sada1"}},
            {"SADA-2", {"model.sada=sada2"}}, {"SADA-3", {"model.sada=sada3"}}};
  throw ConfigError("unknown ablation axis '" + axis +
                    "' (expected feature_space, background, n_unknown, orientation, reg_mode or sada_mode)");
}

struct AblationCell {
  std::vector<double> nap50;
  std::vector<std::string> failures;
  double mean() const {
    double s = 0;
    for (double v : nap50) s += v;
    return nap50.empty() ? std::nan("") : s / nap50.size();
  }
  // Sample standard deviation; zero for a single seed.
  double stddev() const {
    if (nap50.size() < 2) return nap50.empty() ? std::nan("") : 0.0;
    const double m = mean();
    double s = 0;
    for (double v : nap50) s += (v - m) * (v - m);
    return std::sqrt(s / (nap50.size() - 1));
  }
};

struct AblationTable {
  std::string axis;
  std::vector<std::string> rows;
  std::vector<AblationCell> cells;
};

inline std::string format_markdown(const AblationTable& t) {
  std::ostringstream os;
  os << "| " << t.axis << " | nAP50 mean | nAP50 std | seeds | failures |\n|---|---|---|---|---|\n";
  char buf[128];
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& c = t.cells[i];
    std::snprintf(buf, sizeof buf, "| %s | %.4f | %.4f | %zu | %zu |\n", t.rows[i].c_str(), c.mean(), c.stddev(),
                  c.nap50.size(), c.failures.size());
    os << buf;
  }
  return os.str();
}

inline json to_json(const AblationTable& t) {
  json rows = json::array();
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& c = t.cells[i];
    const double m = c.mean(), s = c.stddev();
    rows.push_back({{"variant", t.rows[i]},
                    {"nAP50", c.nap50},
                    {"mean", std::isnan(m) ? json(nullptr) : json(m)},
                    {"std", std::isnan(s) ? json(nullptr) : json(s)},
                    {"failures", c.failures}});
  }
  return {{"axis", t.axis}, {"rows", rows}};
}

// Runs every variant for seeds 0..seeds-1 (train.seed and data.split_seed
// offset from the base config), `jobs` pipelines at a time.
inline AblationTable cmd_ablate(const fs::path& config_file, const std::vector<std::string>& overrides,
                                const std::string& axis, int seeds, int jobs, const fs::path& runs_root, bool force,
                                std::ostream& log = std::cout) {
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  const auto variants = ablation_variants(axis);
  const RunContext base_ctx = make_context(config_file, overrides, runs_root);
  const fs::path out_dir = base_ctx.run_dir() / "ablate" / axis;
  fs::create_directories(out_dir);

  struct Job {
    int row, seed;
  };
  std::vector<Job> queue;
  for (int r = 0; r < int(variants.size()); ++r)
    for (int s = 0; s < seeds; ++s) queue.push_back({r, s});
  AblationTable table{axis, {}, std::vector<AblationCell>(variants.size())};
  for (const auto& v : variants) table.rows.push_back(v.label);
  std::vector<std::optional<double>> results(queue.size());
  std::vector<std::string> errors(queue.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mu;

  auto worker = [&] {
    for (std::size_t i = next++; i < queue.size(); i = next++) {
      const auto& job = queue[i];
      const auto& v = variants[job.row];
      std::vector<std::string> ov = overrides;
      ov.insert(ov.end(), v.overrides.begin(), v.overrides.end());
      const std::string cell = "v" + std::to_string(job.row) + "/seed" + std::to_string(job.seed);
      ov.push_back("name=" + (fs::path(base_ctx.cfg.name) / "ablate" / axis / cell).generic_string());
      ov.push_back("train.seed=" + std::to_string(base_ctx.cfg.train.seed + job.seed));
      ov.push_back("data.split_seed=" + std::to_string(base_ctx.cfg.data.split_seed + job.seed));
      try {
        RunContext ctx = make_context(config_file, ov, base_ctx.runs_root);
        ctx.force = force;
        fs::create_directories(ctx.run_dir());
        std::ofstream cell_log(ctx.run_dir() / "log.txt", std::ios::app);
        ctx.log = &cell_log;
        run_pipeline(ctx);
        results[i] = read_json(ctx.stage_path(Stage::kEvaluate) / "report.json").at("nAP50").get<double>();
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
      std::lock_guard lock(log_mu);
      log << "ablate " << axis << ": " << v.label << " seed " << job.seed << ": "
          << (results[i] ? "nAP50=" + std::to_string(*results[i]) : "FAILED: " + errors[i]) << "\n";
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, int(queue.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (std::size_t i = 0; i < queue.size(); ++i) {
    auto& cell = table.cells[queue[i].row];
    if (results[i])
      cell.nap50.push_back(*results[i]);
    else
      cell.failures.push_back("seed " + std::to_string(queue[i].seed) + ": " + errors[i]);
  }
  std::ofstream(out_dir / "table.md") << format_markdown(table);
  write_json(out_dir / "table.json", to_json(table), 2);
  log << format_markdown(table);
  return table;
}

}  // namespace uofs
