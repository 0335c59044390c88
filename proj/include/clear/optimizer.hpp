#pragma once

#include <cmath>
#include <vector>

#include "clear/autodiff.hpp"
#include "clear/common.hpp"

namespace clear {

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; skipped for no_decay parameters
};

// Adam with decoupled weight decay. Moment buffers live on the parameters.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {
    if (cfg_.learning_rate < 0.0) throw ValidationError("optimizer: negative learning rate");
    if (cfg_.weight_decay < 0.0) throw ValidationError("optimizer: negative weight decay");
  }

  void step(const std::vector<Parameter*>& params) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (Parameter* p : params) {
      p->ensure_grad();
      if (p->m.size() == 0) {
        p->m = Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols());
        p->v = Eigen::MatrixXd::Zero(p->value.rows(), p->value.cols());
      }
      p->m = cfg_.beta1 * p->m + (1.0 - cfg_.beta1) * p->grad;
      p->v = (cfg_.beta2 * p->v.array() + (1.0 - cfg_.beta2) * p->grad.array().square()).matrix();
      if (cfg_.learning_rate == 0.0) continue;  // keep values bitwise untouched
      if (!p->no_decay && cfg_.weight_decay > 0.0)
        p->value -= cfg_.learning_rate * cfg_.weight_decay * p->value;
      const Eigen::ArrayXXd mhat = p->m.array() / bc1;
      const Eigen::ArrayXXd vhat = p->v.array() / bc2;
      p->value -= (cfg_.learning_rate * mhat / (vhat.sqrt() + cfg_.eps)).matrix();
    }
  }

  long steps() const { return step_; }

 private:
  OptimizerConfig cfg_;
  long step_ = 0;
};

}  // namespace clear
