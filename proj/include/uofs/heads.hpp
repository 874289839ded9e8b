#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "uofs/error.hpp"
#include "uofs/nn.hpp"

namespace uofs {

// UOFS: orthogonal space with unknown prototypes and hybrid background
// optimization. OFS: orthogonal space trained on the base set alone.
// COSINE / EUCLIDEAN: entangled heads with background as an extra prototype.
enum class HeadKind { kUofs, kOfs, kCosine, kEuclidean };

// OUTER: background lives at large magnitude; INNER flips the sign.
enum class Orientation { kOuter, kInner };

enum class ObjSquash { kClamp, kSigmoid };

inline bool is_orthogonal(HeadKind k) { return k == HeadKind::kUofs || k == HeadKind::kOfs; }

// Target index meaning "background" (maps to the last probability entry).
inline constexpr int kBackground = -1;

template <class T>
struct HeadParams {
  HeadKind kind = HeadKind::kUofs;
  // feat_dim x N_c class prototypes; entangled heads append the background
  // prototype as the last column.
  Mat<T> W_cls;
  Mat<T> W_unk;  // feat_dim x N_u
  T W_obj = T(0.5);
  T b = T(1.0);
  double tau = 20.0;
  Orientation orientation = Orientation::kOuter;
  ObjSquash squash = ObjSquash::kClamp;
  double eps = 1e-4;

  int n_foreground() const {
    return int(W_cls.cols()) - (is_orthogonal(kind) ? 0 : 1);
  }
};

template <class T>
struct HeadGrads {
  Mat<T> W_cls, W_unk;
  T W_obj = 0, b = 0;

  void reset(const HeadParams<T>& p) {
    W_cls = Mat<T>::Zero(p.W_cls.rows(), p.W_cls.cols());
    W_unk = Mat<T>::Zero(p.W_unk.rows(), p.W_unk.cols());
    W_obj = 0;
    b = 0;
  }
};

namespace detail {

template <class T>
void require_finite(const Vec<T>& f) {
  if (!f.allFinite()) throw Error("head: non-finite feature vector");
}

template <class T>
Vec<T> softmax(const Vec<T>& logits) {
  const T m = logits.maxCoeff();
  Vec<T> e = (logits.array() - m).exp();
  return e / e.sum();
}

template <class T>
Vec<T> log_softmax(const Vec<T>& logits) {
  const T m = logits.maxCoeff();
  const T lse = m + std::log((logits.array() - m).exp().sum());
  return logits.array() - lse;
}

// Cosine of f against each column of W.
template <class T>
Vec<T> cosines(const Vec<T>& f, const Mat<T>& W) {
  const T fn = f.norm();
  Vec<T> c(W.cols());
  for (Eigen::Index i = 0; i < W.cols(); ++i) c[i] = W.col(i).dot(f) / (fn * W.col(i).norm());
  return c;
}

// Backprop of logits l_i = tau * cos(f, W_i) with upstream g = dL/dl.
template <class T>
void cosine_logits_backward(const Vec<T>& f, const Mat<T>& W, std::span<const int> columns, const Vec<T>& g,
                            double tau, Vec<T>* df, Mat<T>* dW) {
  const T fn = f.norm();
  if (!(fn > T(0))) return;
  const Vec<T> fu = f / fn;
  for (std::size_t k = 0; k < columns.size(); ++k) {
    if (g[k] == T(0)) continue;
    const auto w = W.col(columns[k]);
    const T wn = w.norm();
    const Vec<T> wu = w / wn;
    const T c = wu.dot(fu);
    const T s = T(tau) * g[k];
    if (df) *df += s / fn * (wu - c * fu);
    if (dW) dW->col(columns[k]) += s / wn * (fu - c * wu);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Objectness from magnitude

template <class T>
struct ObjectnessTerms {
  T p_obj;
  T z;       // pre-squash affine value
  T dp_dz;   // zero on the clamped plateau
  T norm;
};

template <class T>
ObjectnessTerms<T> objectness_terms(const Vec<T>& f, const HeadParams<T>& p) {
  detail::require_finite(f);
  const T n = f.norm();
  const T sgn = p.orientation == Orientation::kOuter ? T(-1) : T(1);
  const T z = sgn * std::abs(p.W_obj) * n + p.b;
  const T lo = T(p.eps), hi = T(1) - T(p.eps);
  ObjectnessTerms<T> t{};
  t.z = z;
  t.norm = n;
  if (p.squash == ObjSquash::kClamp) {
    t.p_obj = std::clamp(z, lo, hi);
    t.dp_dz = (z > lo && z < hi) ? T(1) : T(0);
  } else {
    const T s = sigmoid(z);
    t.p_obj = std::clamp(s, lo, hi);
    t.dp_dz = (s > lo && s < hi) ? s * (T(1) - s) : T(0);
  }
  return t;
}

template <class T>
T objectness(const Vec<T>& f, const HeadParams<T>& p) {
  return objectness_terms(f, p).p_obj;
}

// ---------------------------------------------------------------------------
// Class probabilities from angle

template <class T>
struct ClassProbs {
  Vec<T> p;
  bool degenerate = false;  // zero-norm feature, uniform returned
};

template <class T>
ClassProbs<T> class_probs(const Vec<T>& f, const HeadParams<T>& p) {
  detail::require_finite(f);
  const int nc = int(p.W_cls.cols());
  if (!(f.norm() > T(0))) return {Vec<T>::Constant(nc, T(1) / T(nc)), true};
  return {detail::softmax<T>(T(p.tau) * detail::cosines(f, p.W_cls)), false};
}

// Probabilities over N_c foreground classes followed by background.
template <class T>
struct JointProbs {
  Vec<T> p;
  T p_obj = 0;
  Vec<T> p_cls;  // class simplex used for the foreground entries
  bool degenerate = false;
};

// [p_cls * p_obj, 1 - p_obj]; objectness may come from a separate feature.
template <class T>
JointProbs<T> joint_pbbs(const Vec<T>& f_cls, const Vec<T>& f_obj, const HeadParams<T>& params) {
  const auto cls = class_probs(f_cls, params);
  const T po = objectness(f_obj, params);
  JointProbs<T> out;
  out.p.resize(cls.p.size() + 1);
  out.p.head(cls.p.size()) = cls.p * po;
  out.p[cls.p.size()] = T(1) - po;
  out.p_obj = po;
  out.p_cls = cls.p;
  out.degenerate = cls.degenerate;
  return out;
}

template <class T>
JointProbs<T> joint_pbbs(const Vec<T>& f, const HeadParams<T>& params) {
  return joint_pbbs(f, f, params);
}

template <class T>
struct UnknownMatch {
  int index = 0;
  Vec<T> prototype;
};

// Most cosine-similar unknown prototype; ties go to the lowest index.
template <class T>
UnknownMatch<T> match_unknown(const Vec<T>& f, const HeadParams<T>& params) {
  if (params.W_unk.cols() < 1) throw ConfigError("match_unknown: no unknown prototypes");
  const Vec<T> c = detail::cosines(f, params.W_unk);
  int best = 0;
  for (int u = 1; u < int(c.size()); ++u)
    if (c[u] > c[best]) best = u;
  return {best, params.W_unk.col(best)};
}

// Softmax over [W_cls, W_unk_m] of tau * cosine.
template <class T>
Vec<T> class_unknown_probs(const Vec<T>& f, const HeadParams<T>& params, int m) {
  const int nc = int(params.W_cls.cols());
  Mat<T> W(params.W_cls.rows(), nc + 1);
  W.leftCols(nc) = params.W_cls;
  W.col(nc) = params.W_unk.col(m);
  return detail::softmax<T>(T(params.tau) * detail::cosines(f, W));
}

// [q[:N_c] * p_obj, 1 - p_obj + q[N_c] * p_obj], q from class_unknown_probs.
template <class T>
JointProbs<T> joint_base(const Vec<T>& f_cls, const Vec<T>& f_obj, const HeadParams<T>& params) {
  detail::require_finite(f_cls);
  const T po = objectness(f_obj, params);
  const int nc = int(params.W_cls.cols());
  JointProbs<T> out;
  out.p_obj = po;
  if (!(f_cls.norm() > T(0))) {
    out.degenerate = true;
    out.p_cls = Vec<T>::Constant(nc + 1, T(1) / T(nc + 1));
  } else {
    out.p_cls = class_unknown_probs(f_cls, params, match_unknown(f_cls, params).index);
  }
  out.p.resize(nc + 1);
  out.p.head(nc) = out.p_cls.head(nc) * po;
  out.p[nc] = T(1) - po + out.p_cls[nc] * po;
  return out;
}

template <class T>
JointProbs<T> joint_base(const Vec<T>& f, const HeadParams<T>& params) {
  return joint_base(f, f, params);
}

// Entangled probabilities over all prototypes (background included):
// cosine uses tau * cos(f, W_i), Euclidean uses the dot product f . W_i.
template <class T>
Vec<T> entangled_probs(const Vec<T>& f, const Mat<T>& prototypes, HeadKind kind, double tau) {
  detail::require_finite(f);
  if (kind == HeadKind::kCosine) {
    if (!(f.norm() > T(0))) return Vec<T>::Constant(prototypes.cols(), T(1) / T(prototypes.cols()));
    return detail::softmax<T>(T(tau) * detail::cosines(f, prototypes));
  }
  if (kind == HeadKind::kEuclidean) return detail::softmax<T>(prototypes.transpose() * f);
  throw ConfigError("entangled_probs: kind must be COSINE or EUCLIDEAN");
}

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kMinProb = 1e-12;

template <class T>
struct LossValue {
  T loss = 0;
  bool saturated = false;  // p[target] fell below kMinProb and was clipped
};

// -log p[target]; kBackground selects the last entry.
template <class T>
LossValue<T> classification_loss(const Vec<T>& probs, int target) {
  const Eigen::Index idx = target == kBackground ? probs.size() - 1 : target;
  if (idx < 0 || idx >= probs.size()) throw std::out_of_range("classification_loss: target out of range");
  const T p = probs[idx];
  if (p < T(kMinProb)) return {-std::log(T(kMinProb)), true};
  return {-std::log(p), false};
}

template <class T>
T smooth_l1(T x, double beta) {
  const T a = std::abs(x);
  return a < T(beta) ? T(0.5) * x * x / T(beta) : a - T(0.5 * beta);
}

template <class T>
T smooth_l1_grad(T x, double beta) {
  const T a = std::abs(x);
  if (a < T(beta)) return x / T(beta);
  return x > 0 ? T(1) : T(-1);
}

inline constexpr double kSmoothL1Beta = 1.0 / 9.0;

// One proposal's contribution to a detection loss.
template <class T>
struct ProposalTerm {
  Vec<T> probs;   // simplex, background last
  int target = kBackground;
  std::array<T, 4> reg_pred{};    // used for positives
  std::array<T, 4> reg_target{};
};

// Mean classification loss over all proposals plus lambda_reg times the mean
// smooth-L1 over positives (zero when there are none).
template <class T>
T detection_loss(std::span<const ProposalTerm<T>> terms, double lambda_reg = 1.0) {
  if (terms.empty()) return T(0);
  T cls = 0, reg = 0;
  int positives = 0;
  for (const auto& t : terms) {
    cls += classification_loss(t.probs, t.target).loss;
    if (t.target != kBackground) {
      ++positives;
      for (int k = 0; k < 4; ++k) reg += smooth_l1(t.reg_pred[k] - t.reg_target[k], kSmoothL1Beta);
    }
  }
  cls /= T(terms.size());
  if (positives > 0) reg /= T(positives);
  return cls + T(lambda_reg) * reg;
}

// Which probability assembly a training phase uses.
enum class ProbForm {
  kJointBase,  // orthogonal head, base-set images (unknown prototypes)
  kJointPbbs,  // orthogonal head, PBBS and fine-tune images
  kEntangled,  // cosine / Euclidean heads
};

// Loss for one proposal in log space (numerically stable form of
// -log p[target]); accumulates weight * gradients into `grads`, d_f_cls and
// d_f_obj. Returns the unweighted loss.
template <class T>
T head_loss_backward(ProbForm form, const Vec<T>& f_cls, const Vec<T>& f_obj, int target,
                     const HeadParams<T>& params, T weight, HeadGrads<T>& grads, Vec<T>& d_f_cls,
                     Vec<T>& d_f_obj) {
  detail::require_finite(f_cls);
  if (form == ProbForm::kEntangled) {
    const Mat<T>& W = params.W_cls;
    const int K = int(W.cols());
    const int t = target == kBackground ? K - 1 : target;
    Vec<T> logits;
    const bool cosine = params.kind == HeadKind::kCosine;
    if (cosine) {
      if (!(f_cls.norm() > T(0))) return std::log(T(K));
      logits = T(params.tau) * detail::cosines(f_cls, W);
    } else {
      logits = W.transpose() * f_cls;
    }
    const Vec<T> logp = detail::log_softmax(logits);
    Vec<T> g = logp.array().exp();
    g[t] -= T(1);
    g *= weight;
    if (cosine) {
      std::vector<int> cols(K);
      for (int i = 0; i < K; ++i) cols[i] = i;
      detail::cosine_logits_backward<T>(f_cls, W, cols, g, params.tau, &d_f_cls, &grads.W_cls);
    } else {
      d_f_cls += W * g;
      grads.W_cls.noalias() += f_cls * g.transpose();
    }
    return -logp[t];
  }

  const auto obj = objectness_terms(f_obj, params);
  const T po = obj.p_obj;
  const int nc = int(params.W_cls.cols());
  const bool with_unknown = form == ProbForm::kJointBase;
  int m = 0;
  std::vector<int> cols(nc);
  for (int i = 0; i < nc; ++i) cols[i] = i;
  Vec<T> logits;
  const bool dir_ok = f_cls.norm() > T(0);
  if (dir_ok) {
    if (with_unknown) {
      m = match_unknown(f_cls, params).index;
      Mat<T> W(params.W_cls.rows(), nc + 1);
      W.leftCols(nc) = params.W_cls;
      W.col(nc) = params.W_unk.col(m);
      logits = T(params.tau) * detail::cosines(f_cls, W);
    } else {
      logits = T(params.tau) * detail::cosines(f_cls, params.W_cls);
    }
  } else {
    logits = Vec<T>::Zero(with_unknown ? nc + 1 : nc);
  }
  const Vec<T> logq = detail::log_softmax(logits);
  const Vec<T> q = logq.array().exp();

  T loss, dL_dp;
  Vec<T> g = Vec<T>::Zero(logits.size());
  if (target != kBackground) {
    loss = -logq[target] - std::log(po);
    g = q;
    g[target] -= T(1);
    dL_dp = -T(1) / po;
  } else if (!with_unknown) {
    loss = -std::log(T(1) - po);
    dL_dp = T(1) / (T(1) - po);
  } else {
    const T qn = q[nc];
    const T P = T(1) - po * (T(1) - qn);
    loss = -std::log(P);
    dL_dp = (T(1) - qn) / P;
    // dL/dq_N = -po / P, chained through the softmax.
    Vec<T> e = -q;
    e[nc] += T(1);
    g = (-po / P * qn) * e;
  }

  if (dir_ok) {
    g *= weight;
    // class columns
    detail::cosine_logits_backward<T>(f_cls, params.W_cls, cols, g.head(nc), params.tau, &d_f_cls, &grads.W_cls);
    if (with_unknown) {
      const int one[1] = {m};
      Vec<T> gu(1);
      gu[0] = g[nc];
      detail::cosine_logits_backward<T>(f_cls, params.W_unk, one, gu, params.tau, &d_f_cls, &grads.W_unk);
    }
  }

  const T dz = weight * dL_dp * obj.dp_dz;
  if (dz != T(0)) {
    const T sgn = params.orientation == Orientation::kOuter ? T(-1) : T(1);
    const T a = std::abs(params.W_obj);
    const T sign_w = params.W_obj > 0 ? T(1) : (params.W_obj < 0 ? T(-1) : T(0));
    grads.b += dz;
    grads.W_obj += dz * sgn * obj.norm * sign_w;
    if (obj.norm > T(0)) d_f_obj += (dz * sgn * a / obj.norm) * f_obj;
  }
  return loss;
}

}  // namespace uofs
