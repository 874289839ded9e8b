#include <gtest/gtest.h>

#include <cmath>

#include "uofs/heads.hpp"
#include "uofs/rng.hpp"

using namespace uofs;
using V = Vec<double>;
using M = Mat<double>;

namespace {

V vec(std::initializer_list<double> v) {
  V out(Eigen::Index(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

V random_vec(Rng& rng, int n) {
  V v(n);
  for (int i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

M random_mat(Rng& rng, int r, int c) {
  M m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

HeadParams<double> random_head(Rng& rng, HeadKind kind, int d, int nc, int nu) {
  HeadParams<double> p;
  p.kind = kind;
  p.W_cls = random_mat(rng, d, nc);
  p.W_unk = random_mat(rng, d, nu);
  p.W_obj = 0.3;
  p.b = 0.9;
  return p;
}

// Plain scalar softmax in long double, the arithmetic oracle for the heads.
std::vector<long double> scalar_softmax(std::vector<long double> z) {
  long double s = 0;
  for (auto& v : z) s += std::exp(v);
  for (auto& v : z) v = std::exp(v) / s;
  return z;
}

}  // namespace

TEST(Objectness, AffineAtZero) {
  HeadParams<double> p;
  p.b = 0.9;
  EXPECT_DOUBLE_EQ(objectness<double>(V::Zero(4), p), 0.9);
}

TEST(Objectness, ClampFloorForHugeMagnitude) {
  HeadParams<double> p;
  EXPECT_DOUBLE_EQ(objectness<double>(V::Constant(4, 1e6), p), 1e-4);
  p.orientation = Orientation::kInner;
  EXPECT_DOUBLE_EQ(objectness<double>(V::Constant(4, 1e6), p), 1 - 1e-4);
}

TEST(Objectness, ScalarArithmeticCase) {
  HeadParams<double> p;
  p.W_obj = 0.1;
  p.b = 0.8;
  EXPECT_NEAR(objectness<double>(vec({3, 0, 0}), p), 0.5, 1e-15);
  // The sign of W_obj does not matter, only its magnitude.
  p.W_obj = -0.1;
  EXPECT_NEAR(objectness<double>(vec({0, 0, 3}), p), 0.5, 1e-15);
}

TEST(Objectness, NonFiniteFeatureIsError) {
  HeadParams<double> p;
  EXPECT_THROW(objectness<double>(vec({1, std::nan(""), 0}), p), Error);
}

TEST(Objectness, MonotoneAndOrientationFlip) {
  HeadParams<double> p;
  p.W_obj = 0.2;
  p.b = 0.7;
  HeadParams<double> q = p;
  q.orientation = Orientation::kInner;
  q.b = 0.3;
  const V dir = vec({0.6, 0.8});
  double prev_out = 2, prev_in = -1;
  for (double n = 0.1; n < 1.5; n += 0.1) {
    const double po = objectness<double>(n * dir, p), pi = objectness<double>(n * dir, q);
    EXPECT_LT(po, prev_out);
    EXPECT_GT(pi, prev_in);
    prev_out = po;
    prev_in = pi;
    // On the open interval dp/d|f| is -|W| (OUTER) and +|W| (INNER).
    const double h = 1e-6;
    EXPECT_NEAR((objectness<double>((n + h) * dir, p) - po) / h, -0.2, 1e-6);
    EXPECT_NEAR((objectness<double>((n + h) * dir, q) - pi) / h, 0.2, 1e-6);
  }
}

TEST(Objectness, SigmoidVariantStaysInBounds) {
  HeadParams<double> p;
  p.squash = ObjSquash::kSigmoid;
  EXPECT_NEAR(objectness<double>(V::Zero(3), p), 1 / (1 + std::exp(-1.0)), 1e-15);
  const double hi = objectness<double>(V::Constant(3, 1e5), p);
  EXPECT_GE(hi, 1e-4);
}

TEST(ClassProbs, EquiangularIsUniform) {
  HeadParams<double> p;
  p.W_cls = M::Identity(3, 3);
  const auto cp = class_probs<double>(vec({1, 1, 1}), p);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(cp.p[i], 1.0 / 3, 1e-15);
  EXPECT_FALSE(cp.degenerate);
}

TEST(ClassProbs, ScaleInvariant) {
  Rng rng(1);
  auto p = random_head(rng, HeadKind::kUofs, 8, 4, 2);
  for (int t = 0; t < 20; ++t) {
    const V f = random_vec(rng, 8);
    const double c = std::exp(rng.uniform(-3, 3));
    EXPECT_TRUE(class_probs<double>(f, p).p.isApprox(class_probs<double>(c * f, p).p, 1e-12));
  }
}

TEST(ClassProbs, TwoClassSoftmaxOracle) {
  HeadParams<double> p;
  p.W_cls = M::Identity(2, 2);
  const auto cp = class_probs<double>(vec({2.5, 0}), p);
  const auto o = scalar_softmax({20.0L, 0.0L});
  EXPECT_NEAR(cp.p[1], double(o[1]), 1e-20);
  EXPECT_NEAR(cp.p[1], 2.06e-9, 0.005e-9);
  EXPECT_NEAR(cp.p[0], 1 - double(o[1]), 1e-15);
}

TEST(ClassProbs, ZeroFeatureIsDegenerateUniform) {
  HeadParams<double> p;
  p.W_cls = M::Identity(4, 4);
  const auto cp = class_probs<double>(V::Zero(4), p);
  EXPECT_TRUE(cp.degenerate);
  EXPECT_NEAR(cp.p[2], 0.25, 1e-15);
}

TEST(JointPbbs, ComplementAtSaturation) {
  HeadParams<double> p;
  p.W_cls = M::Identity(2, 2);
  p.b = 5;  // clamps to 1 - eps
  const auto j = joint_pbbs<double>(vec({1, 0.2}), p);
  EXPECT_NEAR(j.p[2], 1e-4, 1e-16);
}

TEST(JointPbbs, ArithmeticCase) {
  // p_cls = (0.7, 0.3) from logits with a known log-ratio; p_obj = 0.5.
  HeadParams<double> p;
  p.tau = 1.0;
  const double a = std::log(0.7 / 0.3);  // cos difference needed at tau = 1
  // f = e1; prototypes at cosines c1 and c1 - a.
  const double c1 = 0.95, c2 = c1 - a;
  p.W_cls = M(2, 2);
  p.W_cls << c1, c2, std::sqrt(1 - c1 * c1), std::sqrt(1 - c2 * c2);
  p.W_obj = 0.5;
  p.b = 1.0;
  const auto j = joint_pbbs<double>(vec({1, 0}), p);
  EXPECT_NEAR(j.p[0], 0.35, 1e-12);
  EXPECT_NEAR(j.p[1], 0.15, 1e-12);
  EXPECT_NEAR(j.p[2], 0.5, 1e-12);
}

TEST(MatchUnknown, SingletonAndSelfMatch) {
  Rng rng(2);
  HeadParams<double> p = random_head(rng, HeadKind::kUofs, 6, 2, 1);
  for (int t = 0; t < 10; ++t) EXPECT_EQ(match_unknown<double>(random_vec(rng, 6), p).index, 0);
  p.W_unk = random_mat(rng, 6, 5);
  EXPECT_EQ(match_unknown<double>(V(p.W_unk.col(3)), p).index, 3);
  // Ties go to the lowest index.
  p.W_unk.col(4) = p.W_unk.col(1);
  EXPECT_EQ(match_unknown<double>(V(p.W_unk.col(1)), p).index, 1);
}

TEST(MatchUnknown, BruteForceArgmax) {
  Rng rng(3);
  for (int t = 0; t < 500; ++t) {
    HeadParams<double> p = random_head(rng, HeadKind::kUofs, 7, 2, 5);
    const V f = random_vec(rng, 7);
    int best = 0;
    double best_cos = -2;
    for (int u = 0; u < 5; ++u) {
      double dot = 0, nf = 0, nw = 0;
      for (int i = 0; i < 7; ++i) {
        dot += f[i] * p.W_unk(i, u);
        nf += f[i] * f[i];
        nw += p.W_unk(i, u) * p.W_unk(i, u);
      }
      const double c = dot / std::sqrt(nf * nw);
      if (c > best_cos) {
        best_cos = c;
        best = u;
      }
    }
    EXPECT_EQ(match_unknown<double>(f, p).index, best);
  }
}

TEST(JointBase, BackgroundDominatesAtObjectnessFloor) {
  Rng rng(4);
  HeadParams<double> p = random_head(rng, HeadKind::kUofs, 5, 3, 2);
  p.b = -1;
  const auto j = joint_base<double>(random_vec(rng, 5), p);
  EXPECT_NEAR(j.p[3], 1.0, 1e-4);
  for (int i = 0; i < 3; ++i) EXPECT_LE(j.p[i], 1e-4);
}

TEST(JointBase, ScalarPipelineOracle) {
  HeadParams<double> p;
  auto unit = [](double c, int axis) {
    V w = V::Zero(5);
    w[0] = c;
    w[axis] = std::sqrt(1 - c * c);
    return w;
  };
  p.W_cls = M(5, 2);
  p.W_cls.col(0) = unit(0.9, 1);
  p.W_cls.col(1) = unit(0.1, 2);
  p.W_unk = M(5, 3);
  p.W_unk.col(0) = unit(-0.2, 3);
  p.W_unk.col(1) = unit(0.5, 4);
  p.W_unk.col(2) = unit(0.3, 3);
  p.W_obj = 0.4;
  p.b = 1.0;  // |f| = 1 gives p_obj = 0.6
  const auto j = joint_base<double>(vec({1, 0, 0, 0, 0}), p);
  const auto q = scalar_softmax({20 * 0.9L, 20 * 0.1L, 20 * 0.5L});
  const long double po = 0.6L;
  EXPECT_NEAR(j.p[0], double(q[0] * po), 1e-9);
  EXPECT_NEAR(j.p[1], double(q[1] * po), 1e-9);
  EXPECT_NEAR(j.p[2], double(1 - po + q[2] * po), 1e-9);
  EXPECT_NEAR(j.p_obj, 0.6, 1e-12);
}

TEST(JointProbs, NormalizationForRandomInputs) {
  Rng rng(5);
  for (int t = 0; t < 1000; ++t) {
    HeadParams<double> p = random_head(rng, HeadKind::kUofs, 6, 3, 4);
    p.W_obj = rng.uniform(-1, 1);
    p.b = rng.uniform(-0.5, 1.5);
    p.orientation = rng.bernoulli(0.5) ? Orientation::kOuter : Orientation::kInner;
    const V f = random_vec(rng, 6) * std::exp(rng.uniform(-4, 4));
    for (const auto& j : {joint_pbbs<double>(f, p), joint_base<double>(f, p)}) {
      EXPECT_NEAR(j.p.sum(), 1.0, 1e-6);
      EXPECT_GE(j.p.minCoeff(), 0.0);
      EXPECT_GE(j.p_obj, 1e-4);
      EXPECT_LE(j.p_obj, 1 - 1e-4);
    }
  }
}

TEST(Entangled, CosineBackgroundSelfSimilarity) {
  Rng rng(6);
  const M W = random_mat(rng, 6, 4);
  const V p = entangled_probs<double>(2.0 * W.col(3), W, HeadKind::kCosine, 20);
  Eigen::Index arg;
  p.maxCoeff(&arg);
  EXPECT_EQ(arg, 3);
}

TEST(Entangled, EuclideanScalingKeepsArgmax) {
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const M W = random_mat(rng, 5, 4);
    const V f = random_vec(rng, 5);
    const V a = entangled_probs<double>(f, W, HeadKind::kEuclidean, 20);
    const V b = entangled_probs<double>(2.0 * f, W, HeadKind::kEuclidean, 20);
    Eigen::Index ia, ib;
    a.maxCoeff(&ia);
    b.maxCoeff(&ib);
    EXPECT_EQ(ia, ib);
    EXPECT_GE(b[ib], a[ia] - 1e-15);
  }
}

TEST(Entangled, ThreePrototypeHandCase) {
  M W(2, 3);
  W << 1, 0, -1, 0, 2, 1;
  const V f = vec({3, 4});
  // Euclidean logits: 3, 8, 1. Cosines: 0.6, 0.8, 1/(5*sqrt2).
  const auto e = scalar_softmax({3.0L, 8.0L, 1.0L});
  const V pe = entangled_probs<double>(f, W, HeadKind::kEuclidean, 20);
  const auto c = scalar_softmax({20 * 0.6L, 20 * 0.8L, 20 / (5 * std::sqrt(2.0L))});
  const V pc = entangled_probs<double>(f, W, HeadKind::kCosine, 20);
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(pe[i], double(e[i]), 1e-14);
    EXPECT_NEAR(pc[i], double(c[i]), 1e-14);
  }
  EXPECT_THROW(entangled_probs<double>(f, W, HeadKind::kUofs, 20), ConfigError);
}

TEST(Loss, ClassificationCases) {
  EXPECT_DOUBLE_EQ(classification_loss<double>(vec({0, 1, 0}), 1).loss, 0.0);
  EXPECT_NEAR(classification_loss<double>(V::Constant(3, 1.0 / 3), kBackground).loss, 1.0986122886681098, 1e-12);
  const auto sat = classification_loss<double>(vec({1, 0}), 1);
  EXPECT_TRUE(sat.saturated);
  EXPECT_NEAR(sat.loss, -std::log(1e-12), 1e-9);
  EXPECT_THROW(classification_loss<double>(vec({1, 0}), 5), std::out_of_range);
}

TEST(Loss, BatchOfFourMatchesScalarMean) {
  std::vector<ProposalTerm<double>> terms(4);
  terms[0].probs = vec({0.2, 0.5, 0.3});
  terms[0].target = 0;
  terms[1].probs = vec({0.1, 0.1, 0.8});
  terms[1].target = kBackground;
  terms[2].probs = vec({0.6, 0.3, 0.1});
  terms[2].target = 1;
  terms[3].probs = vec({0.25, 0.25, 0.5});
  terms[3].target = kBackground;
  const double expect = (-std::log(0.2) - std::log(0.8) - std::log(0.3) - std::log(0.5)) / 4;
  EXPECT_NEAR(detection_loss<double>(terms, 0.0), expect, 1e-14);
}

TEST(Loss, DetectionLossCases) {
  ProposalTerm<double> neg;
  neg.probs = vec({0.25, 0.25, 0.5});
  EXPECT_NEAR(detection_loss<double>(std::span(&neg, 1)), std::log(2.0), 1e-15);

  ProposalTerm<double> perfect;
  perfect.probs = vec({1, 0, 0});
  perfect.target = 0;
  perfect.reg_pred = perfect.reg_target = {0.1, -0.2, 0.3, 0.0};
  EXPECT_DOUBLE_EQ(detection_loss<double>(std::span(&perfect, 1)), 0.0);

  // Mixed batch: element-wise recomputation with smooth-L1 at beta = 1/9.
  std::vector<ProposalTerm<double>> terms{neg, perfect};
  terms[1].reg_pred = {0.5, 0.0, 0.05, -1.0};
  terms[1].reg_target = {0.0, 0.0, 0.0, 0.0};
  const double b = 1.0 / 9;
  const double reg = (0.5 - b / 2) + 0 + 0.5 * 0.05 * 0.05 / b + (1.0 - b / 2);
  const double cls = (std::log(2.0) + 0) / 2;
  EXPECT_NEAR(detection_loss<double>(terms, 1.0), cls + reg, 1e-14);
  EXPECT_NEAR(detection_loss<double>(terms, 2.5), cls + 2.5 * reg, 1e-14);
}

// The log-space loss used for training equals -log of the forward probabilities.
// It is not clipped, so past saturation it can only exceed the clipped value.
void expect_same_loss(double log_space, const LossValue<double>& forward) {
  if (forward.saturated)
    EXPECT_GE(log_space, forward.loss - 1e-9);
  else
    EXPECT_NEAR(log_space, forward.loss, 1e-9);
}

TEST(Loss, LogSpaceLossMatchesForwardProbabilities) {
  Rng rng(8);
  for (int t = 0; t < 300; ++t) {
    const int nc = 3;
    HeadParams<double> p = random_head(rng, HeadKind::kUofs, 6, nc, 4);
    p.b = rng.uniform(0.2, 1.2);
    p.W_obj = rng.uniform(0.05, 0.5);
    const V f = random_vec(rng, 6) * rng.uniform(0.1, 2);
    const int target = int(rng.uniform_int(-1, nc - 1));
    HeadGrads<double> g;
    g.reset(p);
    V dfc = V::Zero(6), dfo = V::Zero(6);
    for (auto form : {ProbForm::kJointBase, ProbForm::kJointPbbs}) {
      const auto j = form == ProbForm::kJointBase ? joint_base<double>(f, p) : joint_pbbs<double>(f, p);
      const double l = head_loss_backward<double>(form, f, f, target, p, 1.0, g, dfc, dfo);
      expect_same_loss(l, classification_loss<double>(j.p, target));
    }
    HeadParams<double> e = p;
    e.kind = rng.bernoulli(0.5) ? HeadKind::kCosine : HeadKind::kEuclidean;
    e.W_cls = random_mat(rng, 6, nc + 1) * 0.3;
    g.reset(e);
    const double l = head_loss_backward<double>(ProbForm::kEntangled, f, f, target, e, 1.0, g, dfc, dfo);
    expect_same_loss(l, classification_loss<double>(entangled_probs<double>(f, e.W_cls, e.kind, e.tau), target));
  }
}
