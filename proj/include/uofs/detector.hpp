#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "uofs/box.hpp"
#include "uofs/error.hpp"
#include "uofs/heads.hpp"
#include "uofs/image.hpp"
#include "uofs/nn.hpp"
#include "uofs/rng.hpp"

namespace uofs {

struct BackboneConfig {
  // One stride-2 3x3 conv + ReLU per stage; output stride is 2^stages.
  std::vector<int> channels_per_stage = {16, 32, 48};
  int stride = 8;
  int roi_grid = 5;
  int feat_dim = 256;
  int head_channels = 64;
  int head_depth = 1;  // 3x3 conv blocks before the 1x1 projection to feat_dim
};

// Attention wiring between the ROI crop and the head stack.
//   NONE     one unmasked branch for every task
//   UNIFIED  one masked branch shared by every task
//   SADA1    {cls, obj} share a mask, reg has its own
//   SADA2    cls, obj, reg each have their own
//   SADA3    cls has its own, {obj, reg} share a mask
enum class SadaMode { kNone, kUnified, kSada1, kSada2, kSada3 };

enum class RegMode { kClassAgnostic, kClassSpecific };

struct ModelConfig {
  BackboneConfig backbone;
  SadaMode sada = SadaMode::kSada3;
  RegMode reg_mode = RegMode::kClassAgnostic;
  HeadKind head_kind = HeadKind::kUofs;
  int n_unknown = 5;
  double tau = 20.0;
  Orientation orientation = Orientation::kOuter;
  ObjSquash obj_squash = ObjSquash::kClamp;
  double eps = 1e-4;
  // Gain on the final projection's init; sets the initial feature magnitude.
  double feat_init_gain = 0.035;
};

struct BranchLayout {
  int branches = 1;
  bool masked = false;
  int cls = 0, obj = 0, reg = 0;
};

inline BranchLayout branch_layout(SadaMode mode) {
  switch (mode) {
    case SadaMode::kNone: return {1, false, 0, 0, 0};
    case SadaMode::kUnified: return {1, true, 0, 0, 0};
    case SadaMode::kSada1: return {2, true, 0, 0, 1};
    case SadaMode::kSada2: return {3, true, 0, 1, 2};
    case SadaMode::kSada3: return {2, true, 0, 1, 1};
  }
  return {};
}

inline void validate(const ModelConfig& cfg, int n_classes) {
  const auto& b = cfg.backbone;
  if (b.channels_per_stage.empty()) throw ConfigError("backbone needs at least one stage");
  for (int c : b.channels_per_stage)
    if (c <= 0) throw ConfigError("backbone channels must be positive");
  if (b.stride != (1 << b.channels_per_stage.size()))
    throw ConfigError("model.stride must equal 2^(number of stages) = " +
                      std::to_string(1 << b.channels_per_stage.size()));
  if (b.roi_grid < 1 || b.feat_dim < 1 || b.head_channels < 1 || b.head_depth < 0)
    throw ConfigError("model dimensions must be positive");
  const int needed = n_classes + (cfg.head_kind == HeadKind::kUofs ? cfg.n_unknown : 1);
  if (b.feat_dim < needed)
    throw ConfigError("model.feat_dim must be at least classes + unknown prototypes (" + std::to_string(needed) + ")");
  if (cfg.head_kind == HeadKind::kUofs && cfg.n_unknown < 1) throw ConfigError("head.n_unknown must be >= 1");
  if (!(cfg.tau > 0)) throw ConfigError("head.tau must be positive");
}

// Named view of one parameter array, for optimizers and checkpoints.
template <class T>
struct ParamSlot {
  std::string name;
  T* value;
  T* grad;
  Eigen::Index size;
  std::vector<Eigen::Index> shape;
  bool decay;  // receives weight decay
};

template <class T>
struct MaskConv {
  Vec<T> weight, bias;  // 1x1 conv: C -> 1
  Vec<T> weight_grad, bias_grad;

  explicit MaskConv(int channels = 0)
      : weight(Vec<T>::Zero(channels)), bias(Vec<T>::Zero(1)), weight_grad(Vec<T>::Zero(channels)),
        bias_grad(Vec<T>::Zero(1)) {}
  void zero_grad() {
    weight_grad.setZero();
    bias_grad.setZero();
  }
};

template <class T>
struct BranchPass {
  RowVec<T> mask;  // sigmoid attention per ROI position, empty when unmasked
  FeatureBatch<T> attended;
  std::vector<typename Conv2d<T>::Cache> caches;
  std::vector<FeatureBatch<T>> activations;  // post-ReLU outputs of the 3x3 blocks
  int out_h = 0, out_w = 0;
  Mat<T> f;  // feat_dim x R
};

template <class T>
struct RoiPass {
  FeatureBatch<T> F4;
  RoiAlignCache align;
  std::vector<BranchPass<T>> branches;
  Mat<T> reg;  // 4 x R or 4*N_c x R
  BranchLayout layout;

  int size() const { return F4.count; }
  const Mat<T>& f_spe() const { return branches[layout.cls].f; }
  const Mat<T>& f_agn() const { return branches[layout.obj].f; }
  const Mat<T>& f_reg() const { return branches[layout.reg].f; }
};

template <class T>
struct BackboneCache {
  std::vector<typename Conv2d<T>::Cache> convs;
  std::vector<FeatureBatch<T>> outputs;
};

template <class T>
class Detector {
 public:
  ModelConfig config;
  std::vector<Conv2d<T>> backbone;
  std::vector<MaskConv<T>> masks;
  std::vector<Conv2d<T>> head_stack;
  Linear<T> reg;
  HeadParams<T> head;
  HeadGrads<T> head_grad;
  std::vector<int> class_ids;  // W_cls column -> dataset class id
  std::array<double, 3> pixel_mean = {0.5, 0.5, 0.5};
  std::array<double, 3> pixel_std = {0.25, 0.25, 0.25};

  Detector() = default;

  Detector(const ModelConfig& cfg, std::vector<int> classes, std::uint64_t seed)
      : config(cfg), class_ids(std::move(classes)) {
    validate(cfg, int(class_ids.size()));
    Rng rng(mix_seed({seed, 0x6d6f64656cULL}));
    const auto& b = cfg.backbone;
    int in = 3;
    for (int c : b.channels_per_stage) {
      backbone.emplace_back(ConvShape{in, c, 3, 2, 1});
      backbone.back().init(rng);
      in = c;
    }
    const int d4 = in;
    const auto layout = branch_layout(cfg.sada);
    if (layout.masked)
      for (int i = 0; i < layout.branches; ++i) masks.emplace_back(d4);
    int hin = d4;
    for (int i = 0; i < b.head_depth; ++i) {
      head_stack.emplace_back(ConvShape{hin, b.head_channels, 3, 1, 1});
      head_stack.back().init(rng);
      hin = b.head_channels;
    }
    head_stack.emplace_back(ConvShape{hin, b.feat_dim, 1, 1, 0});
    head_stack.back().init(rng, cfg.feat_init_gain);
    reg = Linear<T>(b.feat_dim, reg_outputs());
    reg.init(rng, 1e-3);

    head.kind = cfg.head_kind;
    head.tau = cfg.tau;
    head.orientation = cfg.orientation;
    head.squash = cfg.obj_squash;
    head.eps = cfg.eps;
    const int protos = int(class_ids.size()) + (is_orthogonal(cfg.head_kind) ? 0 : 1);
    head.W_cls = random_prototypes(b.feat_dim, protos, rng);
    head.W_unk = cfg.head_kind == HeadKind::kUofs ? random_prototypes(b.feat_dim, cfg.n_unknown, rng)
                                                  : Mat<T>(b.feat_dim, 0);
    head.W_obj = T(0.5);
    head.b = T(1.0);
    zero_grad();
  }

  int n_classes() const { return int(class_ids.size()); }
  int reg_outputs() const { return config.reg_mode == RegMode::kClassAgnostic ? 4 : 4 * n_classes(); }
  BranchLayout layout() const { return branch_layout(config.sada); }

  int class_index(int class_id) const {
    for (int i = 0; i < n_classes(); ++i)
      if (class_ids[i] == class_id) return i;
    return -1;
  }

  static Mat<T> random_prototypes(int dim, int n, Rng& rng) {
    Mat<T> W(dim, n);
    for (int j = 0; j < n; ++j) {
      for (int i = 0; i < dim; ++i) W(i, j) = T(rng.normal());
      W.col(j).normalize();
    }
    return W;
  }

  void zero_grad() {
    for (auto& c : backbone) c.zero_grad();
    for (auto& m : masks) m.zero_grad();
    for (auto& c : head_stack) c.zero_grad();
    reg.zero_grad();
    head_grad.reset(head);
  }

  // Normalized CHW input for one image.
  FeatureBatch<T> to_input(const RgbImage& img) const {
    FeatureBatch<T> x(3, img.height, img.width, 1);
    for (int y = 0; y < img.height; ++y)
      for (int xx = 0; xx < img.width; ++xx)
        for (int c = 0; c < 3; ++c)
          x.at(c, 0, y, xx) = T((img.at(xx, y, c) / 255.0 - pixel_mean[c]) / pixel_std[c]);
    return x;
  }

  FeatureBatch<T> extract_feature_map(const FeatureBatch<T>& input, BackboneCache<T>* cache = nullptr) const {
    const auto& b = config.backbone;
    if (input.height < b.stride * b.roi_grid || input.width < b.stride * b.roi_grid)
      throw Error("image smaller than stride x roi_grid (" + std::to_string(b.stride * b.roi_grid) + " px)");
    if (cache) {
      cache->convs.assign(backbone.size(), {});
      cache->outputs.clear();
    }
    FeatureBatch<T> x = input;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      x = backbone[i].forward(x, cache ? &cache->convs[i] : nullptr);
      relu_inplace(x);
      if (cache) cache->outputs.push_back(x);
    }
    return x;
  }

  void backbone_backward(FeatureBatch<T> grad, BackboneCache<T>& cache) {
    for (std::size_t i = backbone.size(); i-- > 0;) {
      relu_backward_inplace(grad, cache.outputs[i]);
      grad = backbone[i].backward(grad, cache.convs[i], i > 0);
    }
  }

  // ROI crop, attention branches, head stack and box regression.
  RoiPass<T> roi_forward(const FeatureBatch<T>& fmap, std::span<const Box> boxes, bool keep_cache = true) const {
    const auto& b = config.backbone;
    RoiPass<T> pass;
    pass.layout = layout();
    pass.F4 = roi_align(fmap, boxes, b.stride, b.roi_grid, &pass.align);
    pass.branches.resize(pass.layout.branches);
    for (int br = 0; br < pass.layout.branches; ++br) {
      auto& bp = pass.branches[br];
      FeatureBatch<T> x = pass.F4;
      if (pass.layout.masked) {
        const auto& m = masks[br];
        RowVec<T> logits = m.weight.transpose() * pass.F4.data;
        logits.array() += m.bias[0];
        bp.mask = logits.unaryExpr([](T v) { return sigmoid(v); });
        x.data.array().rowwise() *= (bp.mask.array() + T(1));
      }
      if (keep_cache) {
        bp.attended = x;
        bp.caches.assign(head_stack.size(), {});
      }
      for (std::size_t i = 0; i < head_stack.size(); ++i) {
        x = head_stack[i].forward(x, keep_cache ? &bp.caches[i] : nullptr);
        if (i + 1 < head_stack.size()) {
          relu_inplace(x);
          if (keep_cache) bp.activations.push_back(x);
        }
      }
      bp.out_h = x.height;
      bp.out_w = x.width;
      bp.f = global_average(x);
    }
    pass.reg = reg.forward(pass.f_reg());
    return pass;
  }

  // Gradients w.r.t. f_spe, f_agn and the regression outputs; returns the
  // gradient on the feature map.
  FeatureBatch<T> roi_backward(RoiPass<T>& pass, const Mat<T>& d_spe, const Mat<T>& d_agn, const Mat<T>& d_reg,
                               const Mat<T>* d_reg_branch = nullptr) {
    const auto& L = pass.layout;
    const int R = pass.size();
    std::vector<Mat<T>> d_branch(L.branches, Mat<T>::Zero(config.backbone.feat_dim, R));
    d_branch[L.cls] += d_spe;
    d_branch[L.obj] += d_agn;
    if (d_reg.size() > 0) d_branch[L.reg] += reg.backward(pass.f_reg(), d_reg);
    if (d_reg_branch) d_branch[L.reg] += *d_reg_branch;

    FeatureBatch<T> dF4(pass.F4.channels, pass.F4.height, pass.F4.width, R);
    for (int br = 0; br < L.branches; ++br) {
      auto& bp = pass.branches[br];
      FeatureBatch<T> g = global_average_backward(d_branch[br], bp.out_h, bp.out_w);
      for (std::size_t i = head_stack.size(); i-- > 0;) {
        if (i + 1 < head_stack.size()) relu_backward_inplace(g, bp.activations[i]);
        g = head_stack[i].backward(g, bp.caches[i], true);
      }
      if (L.masked) {
        auto& m = masks[br];
        // attended = F4 * (1 + M), M = sigmoid(w . F4 + b)
        const RowVec<T> dM = (g.data.array() * pass.F4.data.array()).colwise().sum();
        const RowVec<T> dlogit = dM.array() * bp.mask.array() * (T(1) - bp.mask.array());
        m.weight_grad.noalias() += pass.F4.data * dlogit.transpose();
        m.bias_grad[0] += dlogit.sum();
        g.data.array().rowwise() *= (bp.mask.array() + T(1));
        g.data.noalias() += m.weight * dlogit;
      }
      dF4.data += g.data;
    }
    return roi_align_backward(dF4, pass.align);
  }

  std::vector<ParamSlot<T>> parameters() {
    std::vector<ParamSlot<T>> out;
    auto add = [&](std::string name, auto& value, auto& grad, bool decay) {
      out.push_back({std::move(name), value.data(), grad.data(), value.size(),
                     {value.rows(), value.cols()}, decay});
    };
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      add("backbone." + std::to_string(i) + ".weight", backbone[i].weight, backbone[i].weight_grad, true);
      add("backbone." + std::to_string(i) + ".bias", backbone[i].bias, backbone[i].bias_grad, false);
    }
    for (std::size_t i = 0; i < masks.size(); ++i) {
      add("sada.mask" + std::to_string(i) + ".weight", masks[i].weight, masks[i].weight_grad, true);
      add("sada.mask" + std::to_string(i) + ".bias", masks[i].bias, masks[i].bias_grad, false);
    }
    for (std::size_t i = 0; i < head_stack.size(); ++i) {
      add("head_stack." + std::to_string(i) + ".weight", head_stack[i].weight, head_stack[i].weight_grad, true);
      add("head_stack." + std::to_string(i) + ".bias", head_stack[i].bias, head_stack[i].bias_grad, false);
    }
    add("reg.weight", reg.weight, reg.weight_grad, true);
    add("reg.bias", reg.bias, reg.bias_grad, false);
    add("head.W_cls", head.W_cls, head_grad.W_cls, false);
    if (head.W_unk.size() > 0) add("head.W_unk", head.W_unk, head_grad.W_unk, false);
    out.push_back({"head.W_obj", &head.W_obj, &head_grad.W_obj, 1, {1, 1}, false});
    out.push_back({"head.b", &head.b, &head_grad.b, 1, {1, 1}, false});
    return out;
  }

  // Appends classes with the given initial prototype columns (feat_dim x n).
  // Entangled heads keep background as the last prototype.
  void add_classes(const std::vector<int>& new_ids, const Mat<T>& columns) {
    const int D = config.backbone.feat_dim;
    const int nc = n_classes();
    const int n_new = int(new_ids.size());
    const bool ortho = is_orthogonal(head.kind);
    Mat<T> W(D, head.W_cls.cols() + n_new);
    W.leftCols(nc) = head.W_cls.leftCols(nc);
    W.middleCols(nc, n_new) = columns;
    if (!ortho) W.col(nc + n_new) = head.W_cls.col(nc);
    head.W_cls = std::move(W);
    class_ids.insert(class_ids.end(), new_ids.begin(), new_ids.end());
    if (config.reg_mode == RegMode::kClassSpecific) {
      Linear<T> grown(D, reg_outputs());
      grown.weight.topRows(4 * nc) = reg.weight;
      grown.bias.head(4 * nc) = reg.bias;
      // new classes start from the mean of the existing regressors
      for (int k = 0; k < n_new; ++k)
        for (int j = 0; j < 4; ++j) {
          Vec<T> w = Vec<T>::Zero(D);
          T bsum = 0;
          for (int c = 0; c < nc; ++c) {
            w += reg.weight.row(4 * c + j).transpose();
            bsum += reg.bias[4 * c + j];
          }
          grown.weight.row(4 * (nc + k) + j) = (w / T(nc)).transpose();
          grown.bias[4 * (nc + k) + j] = bsum / T(nc);
        }
      reg = std::move(grown);
    }
    zero_grad();
  }

  // Regression deltas for proposal r; class-specific mode selects class column `cls`.
  BoxDelta deltas(const RoiPass<T>& pass, int r, int cls) const {
    const int off = config.reg_mode == RegMode::kClassAgnostic ? 0 : 4 * std::max(cls, 0);
    return {double(pass.reg(off, r)), double(pass.reg(off + 1, r)), double(pass.reg(off + 2, r)),
            double(pass.reg(off + 3, r))};
  }

  // Casts every parameter and buffer to another scalar type.
  template <class U>
  Detector<U> cast() const {
    Detector<U> d;
    d.config = config;
    for (const auto& c : backbone) {
      Conv2d<U> u(c.shape);
      u.weight = c.weight.template cast<U>();
      u.bias = c.bias.template cast<U>();
      d.backbone.push_back(std::move(u));
    }
    for (const auto& m : masks) {
      MaskConv<U> u(int(m.weight.size()));
      u.weight = m.weight.template cast<U>();
      u.bias = m.bias.template cast<U>();
      d.masks.push_back(std::move(u));
    }
    for (const auto& c : head_stack) {
      Conv2d<U> u(c.shape);
      u.weight = c.weight.template cast<U>();
      u.bias = c.bias.template cast<U>();
      d.head_stack.push_back(std::move(u));
    }
    d.reg = Linear<U>(int(reg.weight.cols()), int(reg.weight.rows()));
    d.reg.weight = reg.weight.template cast<U>();
    d.reg.bias = reg.bias.template cast<U>();
    d.head.kind = head.kind;
    d.head.W_cls = head.W_cls.template cast<U>();
    d.head.W_unk = head.W_unk.template cast<U>();
    d.head.W_obj = U(head.W_obj);
    d.head.b = U(head.b);
    d.head.tau = head.tau;
    d.head.orientation = head.orientation;
    d.head.squash = head.squash;
    d.head.eps = head.eps;
    d.class_ids = class_ids;
    d.pixel_mean = pixel_mean;
    d.pixel_std = pixel_std;
    d.zero_grad();
    return d;
  }
};

}  // namespace uofs
