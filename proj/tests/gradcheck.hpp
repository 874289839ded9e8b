// Central finite-difference checks shared by the unit tests and the
// acceptance runner. Instances are drawn at random; coordinates whose +-h
// perturbation flips a ReLU, an objectness clamp or the unknown-prototype
// argmax are not differentiable there and are redrawn.
#pragma once

#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "uofs/detector.hpp"
#include "uofs/heads.hpp"
#include "uofs/rng.hpp"
#include "uofs/training.hpp"

namespace gradcheck {

using namespace uofs;

inline constexpr double kStep = 1e-3;
inline constexpr double kRelTol = 1e-3;
inline constexpr double kNegligible = 1e-7;  // both sides below this count as zero

struct Stats {
  int instances = 0;
  int checked = 0;
  int redrawn = 0;
  int redrawn_instances = 0;
  int failures = 0;
  double worst = 0;
  std::string first_failure;
};

inline bool close(double analytic, double numeric, double* rel) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  *rel = scale < kNegligible ? 0.0 : std::abs(analytic - numeric) / scale;
  return *rel <= kRelTol;
}

// Thrown when every tried coordinate of an array sits on a kink; the whole
// instance is then redrawn.
struct NonDifferentiable {};

// Loss plus a signature of every discrete choice made while computing it.
struct Eval {
  double loss;
  std::string signature;
};

// Checks `coords` random entries of `value` (size n) whose analytic gradient is `grad`.
inline void check_array(Stats& st, const std::string& name, double* value, const double* grad, Eigen::Index n,
                        int coords, Rng& rng, const std::function<Eval()>& eval) {
  const Eval base = eval();
  for (int k = 0; k < coords && n > 0; ++k) {
    int attempts = 0;
    for (;;) {
      const Eigen::Index i = Eigen::Index(rng.uniform_int(0, int(n) - 1));
      const double saved = value[i];
      value[i] = saved + kStep;
      const Eval plus = eval();
      value[i] = saved - kStep;
      const Eval minus = eval();
      value[i] = saved;
      if (plus.signature != base.signature || minus.signature != base.signature) {
        ++st.redrawn;
        if (++attempts < 20) continue;
        throw NonDifferentiable{};
      }
      const double numeric = (plus.loss - minus.loss) / (2 * kStep);
      double rel;
      ++st.checked;
      if (!close(grad[i], numeric, &rel)) {
        ++st.failures;
        if (st.first_failure.empty()) {
          std::ostringstream os;
          os << name << "[" << i << "]: analytic " << grad[i] << " numeric " << numeric;
          st.first_failure = os.str();
        }
      }
      st.worst = std::max(st.worst, rel);
      break;
    }
  }
}

inline std::string relu_signature(const Mat<double>& m) {
  std::string s;
  s.reserve(std::size_t(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) s.push_back(m.data()[i] > 0 ? '1' : '0');
  return s;
}

inline Vec<double> random_vec(int n, Rng& rng, double scale = 1.0) {
  Vec<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

inline Mat<double> random_mat(int r, int c, Rng& rng, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// ---------------------------------------------------------------------------
// Head: every probability form, random targets, objectness kept off the clamp.

inline void head_instance(Stats& st, Rng& rng) {
  const int D = 8, nc = 3 + rng.uniform_int(0, 2), nu = 1 + rng.uniform_int(0, 3);
  const ProbForm forms[] = {ProbForm::kJointBase, ProbForm::kJointPbbs, ProbForm::kEntangled, ProbForm::kEntangled};
  const int pick = rng.uniform_int(0, 3);
  const ProbForm form = forms[pick];
  HeadParams<double> p;
  p.kind = form == ProbForm::kEntangled ? (pick == 2 ? HeadKind::kCosine : HeadKind::kEuclidean) : HeadKind::kUofs;
  p.tau = rng.uniform(1.0, 20.0);
  p.orientation = rng.bernoulli(0.5) ? Orientation::kOuter : Orientation::kInner;
  p.squash = rng.bernoulli(0.5) ? ObjSquash::kClamp : ObjSquash::kSigmoid;
  const int protos = nc + (form == ProbForm::kEntangled ? 1 : 0);
  p.W_cls = random_mat(D, protos, rng, form == ProbForm::kEntangled && pick == 3 ? 0.3 : 1.0);
  p.W_unk = random_mat(D, nu, rng);
  Vec<double> f_cls = random_vec(D, rng), f_obj = random_vec(D, rng);
  p.W_obj = rng.uniform(0.1, 0.6) * (rng.bernoulli(0.5) ? 1 : -1);
  // place z in the open interval (0.2, 0.8)
  const double sgn = p.orientation == Orientation::kOuter ? -1 : 1;
  p.b = rng.uniform(0.2, 0.8) - sgn * std::abs(p.W_obj) * f_obj.norm();
  if (p.squash == ObjSquash::kSigmoid) p.b += rng.uniform(-1.0, 1.0);
  const int target = rng.bernoulli(0.4) ? kBackground : rng.uniform_int(0, nc - 1);
  const double weight = rng.uniform(0.5, 2.0);

  HeadGrads<double> g;
  g.reset(p);
  Vec<double> d_cls = Vec<double>::Zero(D), d_obj = Vec<double>::Zero(D);
  head_loss_backward<double>(form, f_cls, f_obj, target, p, weight, g, d_cls, d_obj);

  auto eval = [&]() -> Eval {
    HeadGrads<double> scratch;
    scratch.reset(p);
    Vec<double> a = Vec<double>::Zero(D), b = Vec<double>::Zero(D);
    const double loss = weight * head_loss_backward<double>(form, f_cls, f_obj, target, p, 1.0, scratch, a, b);
    std::string sig;
    if (form == ProbForm::kJointBase) sig += std::to_string(match_unknown(f_cls, p).index);
    if (form != ProbForm::kEntangled) sig += objectness_terms(f_obj, p).dp_dz == 0 ? "c" : "o";
    return {loss, sig};
  };
  check_array(st, "f_cls", f_cls.data(), d_cls.data(), D, 4, rng, eval);
  if (form != ProbForm::kEntangled) check_array(st, "f_obj", f_obj.data(), d_obj.data(), D, 4, rng, eval);
  check_array(st, "W_cls", p.W_cls.data(), g.W_cls.data(), p.W_cls.size(), 6, rng, eval);
  if (form == ProbForm::kJointBase) check_array(st, "W_unk", p.W_unk.data(), g.W_unk.data(), p.W_unk.size(), 6, rng, eval);
  if (form != ProbForm::kEntangled) {
    check_array(st, "W_obj", &p.W_obj, &g.W_obj, 1, 1, rng, eval);
    check_array(st, "b", &p.b, &g.b, 1, 1, rng, eval);
  }
  ++st.instances;
}

// ---------------------------------------------------------------------------
// Small detectors

inline ModelConfig tiny_config(SadaMode sada, HeadKind kind, RegMode reg) {
  ModelConfig c;
  c.backbone.channels_per_stage = {3, 4, 5};
  c.backbone.stride = 8;
  c.backbone.roi_grid = 3;
  c.backbone.feat_dim = 10;
  c.backbone.head_channels = 4;
  c.backbone.head_depth = 1;
  c.sada = sada;
  c.head_kind = kind;
  c.reg_mode = reg;
  c.n_unknown = 2;
  c.feat_init_gain = 1.0;
  return c;
}

inline void randomize_masks(Detector<double>& d, Rng& rng) {
  for (auto& m : d.masks) {
    for (Eigen::Index i = 0; i < m.weight.size(); ++i) m.weight[i] = 0.5 * rng.normal();
    m.bias[0] = 0.3 * rng.normal();
  }
}

inline std::vector<Box> random_boxes(int n, double size, Rng& rng) {
  std::vector<Box> boxes;
  for (int i = 0; i < n; ++i) {
    const double w = rng.uniform(6.0, size * 0.7), h = rng.uniform(6.0, size * 0.7);
    const double x = rng.uniform(0.0, size - w), y = rng.uniform(0.0, size - h);
    boxes.push_back({x, y, x + w, y + h});
  }
  return boxes;
}

inline std::string pass_signature(const RoiPass<double>& pass) {
  std::string s;
  for (const auto& b : pass.branches)
    for (const auto& a : b.activations) s += relu_signature(a.data);
  return s;
}

// ROI path: attention masks, head stack, regression and the feature-map input
// under a random linear readout of f_spe, f_agn and the regression outputs.
inline void sada_instance(Stats& st, Rng& rng) {
  const SadaMode modes[] = {SadaMode::kNone, SadaMode::kUnified, SadaMode::kSada1, SadaMode::kSada2, SadaMode::kSada3};
  const SadaMode mode = modes[rng.uniform_int(0, 4)];
  const RegMode reg = rng.bernoulli(0.5) ? RegMode::kClassAgnostic : RegMode::kClassSpecific;
  Detector<double> d(tiny_config(mode, HeadKind::kUofs, reg), {1, 2, 3}, rng.uniform_int(0, 1 << 30));
  randomize_masks(d, rng);
  for (Eigen::Index i = 0; i < d.reg.weight.size(); ++i) d.reg.weight.data()[i] = 0.3 * rng.normal();
  for (auto& c : d.head_stack)
    for (Eigen::Index i = 0; i < c.bias.size(); ++i) c.bias[i] = 0.1 * rng.normal();
  FeatureBatch<double> fmap(5, 4, 4, 1);
  fmap.data = random_mat(5, 16, rng).cwiseAbs();
  const auto boxes = random_boxes(3, 32.0, rng);
  const int R = int(boxes.size());
  const Mat<double> A = random_mat(10, R, rng), B = random_mat(10, R, rng), C = random_mat(d.reg_outputs(), R, rng);

  d.zero_grad();
  RoiPass<double> pass = d.roi_forward(fmap, boxes, true);
  FeatureBatch<double> dmap = d.roi_backward(pass, A, B, C);
  auto eval = [&]() -> Eval {
    const RoiPass<double> p = d.roi_forward(fmap, boxes, true);
    const double loss = (A.array() * p.f_spe().array()).sum() + (B.array() * p.f_agn().array()).sum() +
                        (C.array() * p.reg.array()).sum();
    return {loss, pass_signature(p)};
  };
  for (auto& slot : d.parameters()) {
    if (slot.name.rfind("backbone.", 0) == 0 || slot.name.rfind("head.", 0) == 0) continue;
    check_array(st, slot.name, slot.value, slot.grad, slot.size, 3, rng, eval);
  }
  check_array(st, "feature_map", fmap.data.data(), dmap.data.data(), fmap.data.size(), 4, rng, eval);
  ++st.instances;
}

// Backbone convolutions under a random linear readout of the feature map.
inline void backbone_instance(Stats& st, Rng& rng) {
  Detector<double> d(tiny_config(SadaMode::kNone, HeadKind::kUofs, RegMode::kClassAgnostic), {1, 2},
                     rng.uniform_int(0, 1 << 30));
  for (auto& c : d.backbone)
    for (Eigen::Index i = 0; i < c.bias.size(); ++i) c.bias[i] = 0.1 * rng.normal();
  FeatureBatch<double> x(3, 32, 32, 1);
  x.data = random_mat(3, 32 * 32, rng);
  BackboneCache<double> cache;
  const auto fmap = d.extract_feature_map(x, &cache);
  const Mat<double> A = random_mat(fmap.channels, fmap.data.cols(), rng);
  d.zero_grad();
  FeatureBatch<double> g = fmap;
  g.data = A;
  d.backbone_backward(g, cache);
  auto eval = [&]() -> Eval {
    BackboneCache<double> c;
    const auto f = d.extract_feature_map(x, &c);
    std::string sig;
    for (const auto& o : c.outputs) sig += relu_signature(o.data);
    return {(A.array() * f.data.array()).sum(), sig};
  };
  for (auto& slot : d.parameters())
    if (slot.name.rfind("backbone.", 0) == 0) check_array(st, slot.name, slot.value, slot.grad, slot.size, 4, rng, eval);
  ++st.instances;
}

// Full detection loss of one image through every parameter.
inline void loss_instance(Stats& st, Rng& rng) {
  const HeadKind kinds[] = {HeadKind::kUofs, HeadKind::kOfs, HeadKind::kCosine, HeadKind::kEuclidean};
  const HeadKind kind = kinds[rng.uniform_int(0, 3)];
  const SadaMode modes[] = {SadaMode::kNone, SadaMode::kUnified, SadaMode::kSada1, SadaMode::kSada2, SadaMode::kSada3};
  ModelConfig cfg = tiny_config(modes[rng.uniform_int(0, 4)], kind,
                                rng.bernoulli(0.5) ? RegMode::kClassAgnostic : RegMode::kClassSpecific);
  cfg.obj_squash = rng.bernoulli(0.5) ? ObjSquash::kClamp : ObjSquash::kSigmoid;
  cfg.tau = rng.uniform(2.0, 10.0);
  Detector<double> d(cfg, {1, 2, 3}, rng.uniform_int(0, 1 << 30));
  randomize_masks(d, rng);
  for (Eigen::Index i = 0; i < d.reg.weight.size(); ++i) d.reg.weight.data()[i] = 0.3 * rng.normal();
  if (kind == HeadKind::kEuclidean) d.head.W_cls *= 0.3;

  AnnotatedImage img;
  img.image_id = "g";
  img.image = RgbImage(32, 32);
  for (auto& px : img.image.pixels) px = std::uint8_t(rng.uniform_int(0, 255));
  const auto gts = random_boxes(2, 32.0, rng);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    Instance inst;
    inst.box = gts[i];
    inst.class_id = 1 + int(i % 3);
    img.instances.push_back(inst);
  }
  std::vector<Proposal> props;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    Proposal p;
    p.box = gts[i];
    p.positive = true;
    p.class_id = img.instances[i].class_id;
    p.matched_gt = int(i);
    props.push_back(p);
  }
  for (const Box& b : random_boxes(2, 32.0, rng)) {
    Proposal p;
    p.box = b;
    props.push_back(p);
  }
  // keep objectness inside the clamp for every proposal
  {
    const auto pass = d.roi_forward(d.extract_feature_map(d.to_input(img.image)), [&] {
      std::vector<Box> b;
      for (auto& p : props) b.push_back(p.box);
      return b;
    }());
    double mean = 0;
    for (int r = 0; r < pass.size(); ++r) mean += pass.f_agn().col(r).norm();
    mean /= pass.size();
    d.head.W_obj = 0.2 / std::max(mean, 1e-3);
    const double sgn = cfg.orientation == Orientation::kOuter ? -1 : 1;
    d.head.b = 0.5 - sgn * 0.2;
  }
  const ProbForm form = kind == HeadKind::kUofs && rng.bernoulli(0.5) ? ProbForm::kJointBase
                        : is_orthogonal(kind)                         ? ProbForm::kJointPbbs
                                                                      : ProbForm::kEntangled;
  const double lambda = rng.uniform(0.5, 2.0);
  d.zero_grad();
  image_loss_backward<double>(d, img, props, form, 1.0, lambda, true);
  Detector<double> probe = d;
  auto eval = [&]() -> Eval {
    probe.zero_grad();
    BackboneCache<double> c;
    const auto fmap = probe.extract_feature_map(probe.to_input(img.image), &c);
    std::vector<Box> b;
    for (auto& p : props) b.push_back(p.box);
    const auto pass = probe.roi_forward(fmap, b, true);
    std::string sig = pass_signature(pass);
    for (const auto& o : c.outputs) sig += relu_signature(o.data);
    for (int r = 0; r < pass.size(); ++r) {
      const Vec<double> fa = pass.f_agn().col(r), fs = pass.f_spe().col(r);
      if (is_orthogonal(kind)) sig += objectness_terms(fa, probe.head).dp_dz == 0 ? "c" : "o";
      if (form == ProbForm::kJointBase) sig += std::to_string(match_unknown(fs, probe.head).index);
    }
    const double loss = image_loss_backward<double>(probe, img, props, form, 1.0, lambda, false).loss;
    return {loss, sig};
  };
  auto dparams = d.parameters();
  auto pparams = probe.parameters();
  for (std::size_t i = 0; i < dparams.size(); ++i)
    check_array(st, dparams[i].name, pparams[i].value, dparams[i].grad, dparams[i].size, 2, rng, eval);
  ++st.instances;
}

inline Stats run(const std::function<void(Stats&, Rng&)>& instance, int instances, std::uint64_t seed) {
  Stats st;
  std::uint64_t draw = 0;
  while (st.instances < instances) {
    Rng rng(mix_seed({seed, draw++}));
    Stats trial = st;
    try {
      instance(trial, rng);
      st = trial;
    } catch (const NonDifferentiable&) {
      st.redrawn = trial.redrawn;
      ++st.redrawn_instances;
    }
  }
  return st;
}

}  // namespace gradcheck
