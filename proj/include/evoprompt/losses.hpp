#pragma once

#include <span>
#include <vector>

#include "evoprompt/tape.hpp"

namespace evoprompt {

struct LossWeights {
  double gamma = 25.0;  // feature geometric regularization
  double eta = 0.5;     // knowledge constancy
  double tau = 0.01;    // softmax temperature

  void validate() const {
    if (gamma < 0.0 || eta < 0.0) throw ParameterError("loss weights must be nonnegative");
    if (!(tau > 0.0)) throw ParameterError("temperature must be positive");
  }
};

/// Temperature-scaled cross-entropy over cosine similarities, averaged
/// over the rows of f_v (B x d) against class_feats (C x d).
inline Var info_nce(const Var& f_v, const Var& class_feats, std::span<const int> labels, double tau) {
  if (!(tau > 0.0)) throw ParameterError("info_nce: tau must be positive");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= class_feats.rows()) {
      throw InputError("info_nce: label " + std::to_string(y) + " outside " + std::to_string(class_feats.rows()) +
                       " classes");
    }
  }
  Var s = matmul_nt(row_normalize(f_v), row_normalize(class_feats));
  return nll(log_softmax_rows(scale(s, 1.0 / tau)), labels);
}

/// 1/2 tr(cov(F_v) cov(F_t)).
inline Var fgr(const Var& f_v, const Var& f_t) {
  if (f_v.rows() != f_t.rows() || f_v.cols() != f_t.cols()) throw DimensionError("fgr: batch shapes differ");
  return scale(trace(matmul(batch_covariance(f_v), batch_covariance(f_t))), 0.5);
}

/// Batch mean of 1/2 [(1 - cos(f_v, f_v0)) + (1 - cos(f_t, f_t0))]. The
/// frozen pair enters as constants.
inline Var kcl(const Var& f_v, const Var& f_t, const Tensor& f_v0, const Tensor& f_t0) {
  Tape& t = f_v.tape();
  if (f_v.rows() != f_v0.rows() || f_t.rows() != f_t0.rows() || f_v.rows() != f_t.rows()) {
    throw DimensionError("kcl: batch sizes differ");
  }
  // Cosines are clamped so rounding cannot push the loss outside [0, 2].
  Var cv = clamp(row_dot(row_normalize(f_v), row_normalize(t.constant(f_v0))), -1.0, 1.0);
  Var ct = clamp(row_dot(row_normalize(f_t), row_normalize(t.constant(f_t0))), -1.0, 1.0);
  // mean_b 1/2 (2 - cv_b - ct_b)
  return add_const(scale(mean(add(cv, ct)), -0.5), 1.0);
}

/// Prompted features of one batch plus the frozen-encoder counterparts.
/// Row b of text_feats is the text feature of the class of sample b.
struct FeatureBatch {
  Var image_feats;            // B x d
  Var text_feats;             // B x d
  std::vector<int> labels;    // indices into the class feature rows
  Tensor frozen_image_feats;  // B x d
  Tensor frozen_text_feats;   // B x d
};

struct LossTerms {
  Var total;
  double nce = 0.0;
  double fgr = 0.0;  // 0 when the term is disabled
  double kcl = 0.0;  // 0 when the term is disabled
};

/// InfoNCE + gamma * FGR + eta * KCL. Terms with zero weight are skipped.
inline LossTerms total_loss(const FeatureBatch& batch, const Var& class_feats, const LossWeights& w) {
  w.validate();
  const std::size_t b = batch.image_feats.rows();
  if (batch.text_feats.rows() != b || batch.labels.size() != b || batch.frozen_image_feats.rows() != b ||
      batch.frozen_text_feats.rows() != b) {
    throw DimensionError("total_loss: batch members disagree on B");
  }
  LossTerms out;
  Var nce = info_nce(batch.image_feats, class_feats, batch.labels, w.tau);
  out.nce = nce.item();
  out.total = nce;
  if (w.gamma > 0.0) {
    Var g = fgr(batch.image_feats, batch.text_feats);
    out.fgr = g.item();
    out.total = add(out.total, scale(g, w.gamma));
  }
  if (w.eta > 0.0) {
    Var k = kcl(batch.image_feats, batch.text_feats, batch.frozen_image_feats, batch.frozen_text_feats);
    out.kcl = k.item();
    out.total = add(out.total, scale(k, w.eta));
  }
  return out;
}

/// Scalar combination of already evaluated components.
inline double combine_losses(double nce, double fgr_value, double kcl_value, const LossWeights& w) {
  return nce + w.gamma * fgr_value + w.eta * kcl_value;
}

// Value-only conveniences.

inline double info_nce(const Tensor& f_v, const Tensor& class_feats, std::span<const int> labels, double tau) {
  Tape t;
  return info_nce(t.constant_ref(f_v), t.constant_ref(class_feats), labels, tau).item();
}

inline double fgr(const Tensor& f_v, const Tensor& f_t) {
  Tape t;
  return fgr(t.constant_ref(f_v), t.constant_ref(f_t)).item();
}

inline double kcl(const Tensor& f_v, const Tensor& f_t, const Tensor& f_v0, const Tensor& f_t0) {
  Tape t;
  return kcl(t.constant_ref(f_v), t.constant_ref(f_t), f_v0, f_t0).item();
}

}  // namespace evoprompt
