#pragma once

#include "kkl/types.hpp"

namespace kkl {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  VectorXd m;
  VectorXd v;
  long step = 0;

  AdamState() = default;
  explicit AdamState(Eigen::Index n) : m(VectorXd::Zero(n)), v(VectorXd::Zero(n)) {}
};

/// One bias-corrected Adam update of `params` in place. Throws NumericError on
/// a non-finite gradient and DimensionError on shape mismatch.
void adam_step(VectorXd& params, const VectorXd& gradient, AdamState& state, const AdamConfig& config);

}  // namespace kkl
