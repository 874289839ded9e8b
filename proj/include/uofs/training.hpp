#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "uofs/datamodel.hpp"
#include "uofs/detector.hpp"
#include "uofs/error.hpp"
#include "uofs/heads.hpp"
#include "uofs/proposals.hpp"
#include "uofs/rng.hpp"

namespace uofs {

struct TrainConfig {
  double alpha = 0.5;      // weight of the base-set loss against the PBBS loss
  int batch_pairing = 2;   // images per side per step
  int iterations_base = 3000;
  int iterations_finetune = 300;
  double lr = 0.005;
  double finetune_lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int warmup = 50;         // linear warmup steps
  double flip_prob = 0.5;
  bool paired = true;      // PBBS image i is the counterpart of base image i
  double lambda_reg = 1.0;
  double grad_clip = 10.0;  // global gradient-norm cap, 0 disables
  double obj_lr_scale = 0.1;  // lr multiplier for head.W_obj and head.b
  bool unfreeze_head_stack = false;
  std::uint64_t seed = 0;
  SamplerConfig sampler;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.alpha < 0 || cfg.alpha > 1) throw ConfigError("train.alpha must lie in [0, 1]");
  if (cfg.batch_pairing < 1) throw ConfigError("train.batch_pairing must be >= 1");
  if (cfg.iterations_base < 0 || cfg.iterations_finetune < 0) throw ConfigError("iteration counts must be >= 0");
  if (!(cfg.lr > 0) || !(cfg.finetune_lr > 0)) throw ConfigError("learning rates must be positive");
  if (cfg.flip_prob < 0 || cfg.flip_prob > 1) throw ConfigError("train.flip_prob must lie in [0, 1]");
  if (cfg.obj_lr_scale < 0) throw ConfigError("train.obj_lr_scale must be >= 0");
}

struct StepRecord {
  int step = 0;
  double l_bs = 0;
  double l_pbbs = 0;
  double l_det = 0;
  double lr = 0;

  friend bool operator==(const StepRecord&, const StepRecord&) = default;
};

// SGD with momentum and decoupled-from-nothing (classic L2) weight decay.
template <class T>
struct Sgd {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::map<std::string, Vec<T>> velocity;
  std::map<std::string, double> lr_scale;  // per-parameter multipliers, default 1

  void step(std::vector<ParamSlot<T>>& params, double lr, const std::function<bool(const std::string&)>& frozen,
            double grad_clip) {
    double scale = 1.0;
    if (grad_clip > 0) {
      double sq = 0;
      for (const auto& p : params) {
        if (frozen && frozen(p.name)) continue;
        for (Eigen::Index i = 0; i < p.size; ++i) sq += double(p.grad[i]) * double(p.grad[i]);
      }
      const double norm = std::sqrt(sq);
      if (norm > grad_clip) scale = grad_clip / norm;
    }
    for (auto& p : params) {
      if (frozen && frozen(p.name)) continue;
      auto it = velocity.find(p.name);
      if (it == velocity.end() || it->second.size() != p.size)
        it = velocity.insert_or_assign(p.name, Vec<T>::Zero(p.size)).first;
      Vec<T>& v = it->second;
      const auto ls = lr_scale.find(p.name);
      const double plr = ls == lr_scale.end() ? lr : lr * ls->second;
      for (Eigen::Index i = 0; i < p.size; ++i) {
        T g = p.grad[i];
        if (scale != 1.0) g *= T(scale);
        if (p.decay) g += T(weight_decay) * p.value[i];
        v[i] = T(momentum) * v[i] + g;
        p.value[i] -= T(plr) * v[i];
      }
    }
  }
};

template <class T>
struct TrainState {
  int step = 0;
  Detector<T> model;
  Sgd<T> optimizer;
  std::vector<StepRecord> history;
};

// One image of a batch with its augmentation and proposal stream.
struct BatchItem {
  const AnnotatedImage* image = nullptr;
  bool flip = false;
  std::uint64_t stream = 0;
};

inline AnnotatedImage flipped_copy(const AnnotatedImage& img) {
  AnnotatedImage out;
  out.image_id = img.image_id;
  out.file_name = img.file_name;
  out.image = flip_horizontal(img.image);
  for (const auto& inst : img.instances) {
    Instance f;
    f.box = inst.box.flipped(img.width());
    f.class_id = inst.class_id;
    f.area = inst.area;
    out.instances.push_back(std::move(f));
  }
  return out;
}

inline ProbForm base_form(HeadKind kind) {
  switch (kind) {
    case HeadKind::kUofs: return ProbForm::kJointBase;
    case HeadKind::kOfs: return ProbForm::kJointPbbs;
    default: return ProbForm::kEntangled;
  }
}

inline ProbForm pbbs_form(HeadKind kind) {
  return is_orthogonal(kind) ? ProbForm::kJointPbbs : ProbForm::kEntangled;
}

struct ImageLoss {
  double loss = 0;  // mean classification + lambda * mean regression
  double cls = 0;
  double reg = 0;
  int proposals = 0;
  int positives = 0;
};

// Forward + backward for one image; gradients are accumulated with `weight`.
// A precomputed feature map skips the backbone entirely.
template <class T>
ImageLoss image_loss_backward(Detector<T>& model, const AnnotatedImage& image, std::span<const Proposal> proposals,
                              ProbForm form, T weight, double lambda_reg, bool backbone_trainable,
                              const FeatureBatch<T>* cached_fmap = nullptr) {
  ImageLoss out;
  if (proposals.empty()) return out;
  BackboneCache<T> bcache;
  FeatureBatch<T> fmap = cached_fmap
                             ? *cached_fmap
                             : model.extract_feature_map(model.to_input(image.image),
                                                         backbone_trainable ? &bcache : nullptr);
  std::vector<Box> boxes;
  boxes.reserve(proposals.size());
  for (const auto& p : proposals) boxes.push_back(p.box);
  RoiPass<T> pass = model.roi_forward(fmap, boxes, true);

  const int R = int(proposals.size());
  const int D = model.config.backbone.feat_dim;
  Mat<T> d_spe = Mat<T>::Zero(D, R), d_agn = Mat<T>::Zero(D, R);
  Mat<T> d_reg = Mat<T>::Zero(pass.reg.rows(), R);
  int positives = 0;
  for (const auto& p : proposals) positives += p.positive && model.class_index(p.class_id) >= 0;
  const T w_cls = weight / T(R);
  const T w_reg = positives > 0 ? weight * T(lambda_reg) / T(positives) : T(0);
  Vec<T> dc(D), da(D);
  for (int r = 0; r < R; ++r) {
    const auto& p = proposals[r];
    const int cls = p.positive ? model.class_index(p.class_id) : -1;
    const int target = cls >= 0 ? cls : kBackground;
    dc.setZero();
    da.setZero();
    const Vec<T> fs = pass.f_spe().col(r), fa = pass.f_agn().col(r);
    out.cls += double(head_loss_backward<T>(form, fs, fa, target, model.head, w_cls, model.head_grad, dc, da));
    d_spe.col(r) += dc;
    d_agn.col(r) += da;
    if (cls >= 0) {
      const Box& gt = image.instances[*p.matched_gt].box;
      const BoxDelta t = encode_box(gt, p.box);
      const int off = model.config.reg_mode == RegMode::kClassAgnostic ? 0 : 4 * cls;
      for (int k = 0; k < 4; ++k) {
        const T diff = pass.reg(off + k, r) - T(t[k]);
        out.reg += double(smooth_l1(diff, kSmoothL1Beta));
        d_reg(off + k, r) = w_reg * smooth_l1_grad(diff, kSmoothL1Beta);
      }
    }
  }
  out.proposals = R;
  out.positives = positives;
  out.cls /= R;
  if (positives > 0) out.reg /= positives;
  out.loss = out.cls + lambda_reg * out.reg;

  FeatureBatch<T> dmap = model.roi_backward(pass, d_spe, d_agn, d_reg);
  if (backbone_trainable && !cached_fmap) model.backbone_backward(std::move(dmap), bcache);
  return out;
}

template <class T>
ImageLoss item_loss_backward(Detector<T>& model, const BatchItem& item, const SamplerConfig& sampler, ProbForm form,
                             T weight, double lambda_reg, bool backbone_trainable) {
  const AnnotatedImage flipped = item.flip ? flipped_copy(*item.image) : AnnotatedImage{};
  const AnnotatedImage& img = item.flip ? flipped : *item.image;
  const auto proposals = sample_proposals(img, sampler, item.stream);
  return image_loss_backward<T>(model, img, proposals, form, weight, lambda_reg, backbone_trainable);
}

struct StepLosses {
  double l_bs = 0, l_pbbs = 0, l_det = 0;
};

// Gradients of alpha * L_BS + (1 - alpha) * L_PBBS accumulated into the model.
template <class T>
StepLosses hbo_gradients(Detector<T>& model, std::span<const BatchItem> base, std::span<const BatchItem> pbbs,
                         const TrainConfig& cfg, bool backbone_trainable = true) {
  const ProbForm bform = base_form(model.head.kind);
  StepLosses out;
  for (const auto& item : base)
    out.l_bs += item_loss_backward<T>(model, item, cfg.sampler, bform, T(cfg.alpha) / T(base.size()),
                                      cfg.lambda_reg, backbone_trainable)
                    .loss;
  if (!base.empty()) out.l_bs /= double(base.size());
  for (const auto& item : pbbs)
    out.l_pbbs += item_loss_backward<T>(model, item, cfg.sampler, ProbForm::kJointPbbs,
                                        T(1.0 - cfg.alpha) / T(pbbs.size()), cfg.lambda_reg, backbone_trainable)
                      .loss;
  if (!pbbs.empty()) out.l_pbbs /= double(pbbs.size());
  out.l_det = pbbs.empty() ? out.l_bs : cfg.alpha * out.l_bs + (1.0 - cfg.alpha) * out.l_pbbs;
  return out;
}

inline double learning_rate(const TrainConfig& cfg, double base_lr, int step) {
  if (cfg.warmup > 0 && step < cfg.warmup) return base_lr * double(step + 1) / double(cfg.warmup + 1);
  return base_lr;
}

// One optimizer step on the blended loss. Models without PBBS training pass
// an empty PBBS batch and get the base-set loss alone.
template <class T>
StepRecord hbo_step(TrainState<T>& state, std::span<const BatchItem> base, std::span<const BatchItem> pbbs,
                    const TrainConfig& cfg) {
  state.model.zero_grad();
  const StepLosses l = hbo_gradients<T>(state.model, base, pbbs, cfg);
  if (!std::isfinite(l.l_det))
    throw Error("non-finite loss at step " + std::to_string(state.step) + " (L_BS=" + std::to_string(l.l_bs) +
                ", L_PBBS=" + std::to_string(l.l_pbbs) + ")");
  const double lr = learning_rate(cfg, cfg.lr, state.step);
  auto params = state.model.parameters();
  state.optimizer.momentum = cfg.momentum;
  state.optimizer.weight_decay = cfg.weight_decay;
  state.optimizer.lr_scale = {{"head.W_obj", cfg.obj_lr_scale}, {"head.b", cfg.obj_lr_scale}};
  state.optimizer.step(params, lr, nullptr, cfg.grad_clip);
  StepRecord rec{state.step, l.l_bs, l.l_pbbs, l.l_det, lr};
  state.history.push_back(rec);
  ++state.step;
  return rec;
}

// Image order for a step: an epoch-wise permutation seeded by (seed, epoch),
// so a step's batch depends on nothing but the step number.
inline std::vector<int> step_indices(std::uint64_t seed, int step, int batch, int n_images) {
  std::vector<int> out;
  std::vector<int> perm;
  long long cached_epoch = -1;
  for (int j = 0; j < batch; ++j) {
    const long long pos = static_cast<long long>(step) * batch + j;
    const long long epoch = pos / n_images;
    if (epoch != cached_epoch) {
      perm.resize(n_images);
      for (int i = 0; i < n_images; ++i) perm[i] = i;
      Rng rng(mix_seed({seed, static_cast<std::uint64_t>(epoch), 0x65706f6368ULL}));
      rng.shuffle(perm.begin(), perm.end());
      cached_epoch = epoch;
    }
    out.push_back(perm[pos % n_images]);
  }
  return out;
}

struct StepPlan {
  std::vector<BatchItem> base, pbbs;
};

// Batches for one base-training step. When PBBS is in use and pairing is on,
// the PBBS side holds the counterparts of the base images with the same flips.
inline StepPlan plan_step(const TrainConfig& cfg, int step, const Dataset& base, const Dataset* pbbs,
                          const std::map<std::string, int>* pbbs_index) {
  StepPlan plan;
  const int B = cfg.batch_pairing;
  const auto idx = step_indices(cfg.seed, step, B, int(base.images.size()));
  for (int j = 0; j < B; ++j) {
    Rng rng(mix_seed({cfg.seed, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(j), 0x666cULL}));
    const bool flip = rng.bernoulli(cfg.flip_prob);
    plan.base.push_back({&base.images[idx[j]], flip, mix_seed({cfg.seed, std::uint64_t(step), std::uint64_t(j), 1})});
    if (!pbbs) continue;
    const AnnotatedImage* counterpart = nullptr;
    bool pflip = flip;
    if (cfg.paired) {
      counterpart = &pbbs->images[pbbs_index->at(base.images[idx[j]].image_id)];
    } else {
      const auto pidx = step_indices(cfg.seed ^ 0x70626273ULL, step, B, int(pbbs->images.size()));
      counterpart = &pbbs->images[pidx[j]];
      pflip = rng.bernoulli(cfg.flip_prob);
    }
    plan.pbbs.push_back({counterpart, pflip, mix_seed({cfg.seed, std::uint64_t(step), std::uint64_t(j), 2})});
  }
  return plan;
}

// Per-channel pixel statistics of a dataset, for input normalization.
inline std::pair<std::array<double, 3>, std::array<double, 3>> pixel_statistics(const Dataset& ds) {
  std::array<double, 3> sum{}, sq{};
  double n = 0;
  for (const auto& img : ds.images) {
    for (std::size_t i = 0; i < img.image.pixels.size(); i += 3)
      for (int c = 0; c < 3; ++c) {
        const double v = img.image.pixels[i + c] / 255.0;
        sum[c] += v;
        sq[c] += v * v;
      }
    n += double(img.image.pixels.size() / 3);
  }
  std::array<double, 3> mean{0.5, 0.5, 0.5}, std{0.25, 0.25, 0.25};
  if (n > 0)
    for (int c = 0; c < 3; ++c) {
      mean[c] = sum[c] / n;
      std[c] = std::max(1e-3, std::sqrt(std::max(0.0, sq[c] / n - mean[c] * mean[c])));
    }
  return {mean, std};
}

inline std::map<std::string, int> index_by_id(const Dataset& ds) {
  std::map<std::string, int> m;
  for (int i = 0; i < int(ds.images.size()); ++i) m[ds.images[i].image_id] = i;
  return m;
}

using StepCallback = std::function<void(const StepRecord&)>;

// Runs base training from `state` up to cfg.iterations_base steps. UOFS
// heads train on paired base/PBBS batches; other heads on the base set alone.
template <class T>
void train_base(TrainState<T>& state, const Dataset& base, const Dataset* pbbs, const TrainConfig& cfg,
                const StepCallback& on_step = {}) {
  validate(cfg);
  if (base.images.empty()) throw Error("train_base: empty base dataset");
  const bool use_pbbs = state.model.head.kind == HeadKind::kUofs;
  std::map<std::string, int> pidx;
  if (use_pbbs) {
    if (!pbbs || pbbs->images.empty()) throw Error("train_base: UOFS training needs a PBBS dataset");
    pidx = index_by_id(*pbbs);
    if (cfg.paired)
      for (const auto& img : base.images)
        if (!pidx.contains(img.image_id))
          throw Error("PBBS set does not match the base set: no counterpart for " + img.image_id);
  }
  while (state.step < cfg.iterations_base) {
    const StepPlan plan = plan_step(cfg, state.step, base, use_pbbs ? pbbs : nullptr, use_pbbs ? &pidx : nullptr);
    const StepRecord rec = hbo_step<T>(state, plan.base, plan.pbbs, cfg);
    if (on_step) on_step(rec);
  }
}

template <class T>
TrainState<T> init_state(const ModelConfig& mcfg, const std::vector<int>& classes, const Dataset& stats_source,
                         std::uint64_t seed) {
  TrainState<T> s;
  s.model = Detector<T>(mcfg, classes, seed);
  const auto [mean, std] = pixel_statistics(stats_source);
  s.model.pixel_mean = mean;
  s.model.pixel_std = std;
  return s;
}

// Parameters held fixed while fine-tuning.
inline bool frozen_in_finetune(const std::string& name, bool unfreeze_head_stack) {
  if (name.rfind("backbone.", 0) == 0) return true;
  if (name == "head.W_unk") return true;
  if (!unfreeze_head_stack && name.rfind("head_stack.", 0) == 0) return true;
  return false;
}

// Mean f_spe over ground-truth boxes of each requested class.
template <class T>
Mat<T> support_prototypes(const Detector<T>& model, const Dataset& support, const std::vector<int>& classes) {
  const int D = model.config.backbone.feat_dim;
  Mat<T> cols = Mat<T>::Zero(D, classes.size());
  std::vector<int> counts(classes.size(), 0);
  for (const auto& img : support.images) {
    std::vector<Box> boxes;
    std::vector<int> which;
    for (const auto& inst : img.instances)
      for (std::size_t k = 0; k < classes.size(); ++k)
        if (inst.class_id == classes[k]) {
          boxes.push_back(inst.box);
          which.push_back(int(k));
        }
    if (boxes.empty()) continue;
    const auto fmap = model.extract_feature_map(model.to_input(img.image));
    const auto pass = model.roi_forward(fmap, boxes, false);
    for (std::size_t r = 0; r < boxes.size(); ++r) {
      cols.col(which[r]) += pass.f_spe().col(r);
      ++counts[which[r]];
    }
  }
  for (std::size_t k = 0; k < classes.size(); ++k)
    if (counts[k] == 0) throw Error("no support instance for class " + std::to_string(classes[k]));
  for (std::size_t k = 0; k < classes.size(); ++k) cols.col(k) /= T(counts[k]);
  return cols;
}

// Expands the classifier with novel prototypes initialized from the support
// mean, then trains the unfrozen parameters on the fine-tune set.
template <class T>
TrainState<T> finetune(const Detector<T>& base_model, const Dataset& finetune_set, const std::vector<int>& novel_classes,
                       const TrainConfig& cfg, const StepCallback& on_step = {}) {
  validate(cfg);
  for (int c : novel_classes)
    if (base_model.class_index(c) >= 0)
      throw Error("fine-tune class " + std::to_string(c) + " overlaps the base classes");
  if (finetune_set.images.empty()) throw Error("finetune: empty fine-tune set");
  TrainState<T> state;
  state.model = base_model;
  Mat<T> init = support_prototypes(state.model, finetune_set, novel_classes);
  if (state.model.head.kind != HeadKind::kEuclidean) {
    T mean_norm = 0;
    const int nc = state.model.n_classes();
    for (int c = 0; c < nc; ++c) mean_norm += state.model.head.W_cls.col(c).norm();
    mean_norm /= T(nc);
    for (Eigen::Index k = 0; k < init.cols(); ++k)
      if (init.col(k).norm() > T(0)) init.col(k) *= mean_norm / init.col(k).norm();
  }
  state.model.add_classes(novel_classes, init);

  const ProbForm form = pbbs_form(state.model.head.kind);
  const bool backbone_trainable = false;
  auto frozen = [&](const std::string& n) { return frozen_in_finetune(n, cfg.unfreeze_head_stack); };
  // The backbone is frozen: feature maps are computed once per (image, flip).
  std::map<std::pair<int, bool>, FeatureBatch<T>> fmaps;
  std::map<std::pair<int, bool>, AnnotatedImage> flipped;
  const int B = cfg.batch_pairing;
  const int n = int(finetune_set.images.size());
  state.optimizer.momentum = cfg.momentum;
  state.optimizer.weight_decay = cfg.weight_decay;
  while (state.step < cfg.iterations_finetune) {
    const int step = state.step;
    state.model.zero_grad();
    const auto idx = step_indices(cfg.seed ^ 0x66696e65ULL, step, B, n);
    double loss = 0;
    for (int j = 0; j < B; ++j) {
      Rng rng(mix_seed({cfg.seed, std::uint64_t(step), std::uint64_t(j), 0x6674ULL}));
      const bool flip = rng.bernoulli(cfg.flip_prob);
      const auto key = std::make_pair(idx[j], flip);
      if (!fmaps.contains(key)) {
        flipped[key] = flip ? flipped_copy(finetune_set.images[idx[j]]) : finetune_set.images[idx[j]];
        fmaps[key] = state.model.extract_feature_map(state.model.to_input(flipped[key].image));
      }
      const auto& img = flipped[key];
      const auto props = sample_proposals(img, cfg.sampler, mix_seed({cfg.seed, std::uint64_t(step), std::uint64_t(j), 3}));
      loss += image_loss_backward<T>(state.model, img, props, form, T(1) / T(B), cfg.lambda_reg, backbone_trainable,
                                     &fmaps[key])
                  .loss;
    }
    loss /= B;
    if (!std::isfinite(loss)) throw Error("non-finite fine-tune loss at step " + std::to_string(step));
    const double lr = learning_rate(cfg, cfg.finetune_lr, step);
    auto params = state.model.parameters();
    state.optimizer.lr_scale = {{"head.W_obj", cfg.obj_lr_scale}, {"head.b", cfg.obj_lr_scale}};
    state.optimizer.step(params, lr, frozen, cfg.grad_clip);
    StepRecord rec{step, loss, 0.0, loss, lr};
    state.history.push_back(rec);
    ++state.step;
    if (on_step) on_step(rec);
  }
  return state;
}

}  // namespace uofs
