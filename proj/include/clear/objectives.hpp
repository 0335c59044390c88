#pragma once

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "clear/common.hpp"

namespace clear {

struct LossConfig {
  double margin = 1.0;
  double lambda_cl = 1.0;
  double lambda_mlm = 0.1;

  void validate() const {
    if (!(margin > 0.0)) throw ValidationError("loss config: margin must be > 0");
    if (lambda_cl < 0.0 || lambda_mlm < 0.0)
      throw ValidationError("loss config: loss weights must be >= 0");
  }
};

struct LossReport {
  double loss_mlm = 0.0;
  double loss_cl = 0.0;
  double loss_total = 0.0;
  double loss_cla = 0.0;
};

// Mean negative log-likelihood of the true token at each masked position.
// logits: one row per masked position, one column per vocabulary entry.
inline double mlm_loss(const Eigen::MatrixXd& mlm_logits, const std::vector<int>& targets) {
  if (mlm_logits.rows() == 0 || targets.empty())
    throw ValidationError("mlm_loss: empty mask set");
  if (mlm_logits.rows() != long(targets.size()))
    throw ValidationError("mlm_loss: logit rows must match target count");
  double total = 0.0;
  for (long r = 0; r < mlm_logits.rows(); ++r) {
    const int tgt = targets[std::size_t(r)];
    if (tgt < 0 || tgt >= mlm_logits.cols())
      throw ValidationError("mlm_loss: target id out of vocabulary range");
    const double mx = mlm_logits.row(r).maxCoeff();
    double lse = 0.0;
    for (long c = 0; c < mlm_logits.cols(); ++c) lse += std::exp(mlm_logits(r, c) - mx);
    total += std::log(lse) + mx - mlm_logits(r, tgt);
  }
  return total / double(mlm_logits.rows());
}

// Margin loss over a pair of projected vectors:
//   L·d^2 + (1-L)·max(0, M-d)^2 with d the Euclidean distance.
inline double contrastive_loss(const Eigen::RowVectorXd& v_a, const Eigen::RowVectorXd& v_b,
                               int label, double margin) {
  if (v_a.size() != v_b.size())
    throw ValidationError("contrastive_loss: vector widths differ");
  if (label != 0 && label != 1)
    throw ValidationError("contrastive_loss: label must be 0 or 1");
  const double d = (v_a - v_b).norm();
  if (label == 1) return d * d;
  const double gap = margin - d;
  return gap > 0.0 ? gap * gap : 0.0;
}

inline double total_cl_loss(double loss_cl, double loss_mlm, const LossConfig& cfg) {
  return cfg.lambda_cl * loss_cl + cfg.lambda_mlm * loss_mlm;
}

// Binary cross-entropy on one prediction. Callers clamp p into
// [1e-7, 1-1e-7] before the boundary; outside (0,1) is a caller bug.
inline double classification_loss(double p, int y) {
  if (!(p > 0.0 && p < 1.0))
    throw ValidationError("classification_loss: probability must lie in (0,1)");
  if (y != 0 && y != 1) throw ValidationError("classification_loss: label must be 0 or 1");
  return y == 1 ? -std::log(p) : -std::log(1.0 - p);
}

inline double clamp_probability(double p, double eps = 1e-7) {
  if (p < eps) return eps;
  if (p > 1.0 - eps) return 1.0 - eps;
  return p;
}

}  // namespace clear
