#include "kkl/adam.hpp"

#include <cmath>

#include "kkl/errors.hpp"

namespace kkl {

void adam_step(VectorXd& params, const VectorXd& gradient, AdamState& state, const AdamConfig& config) {
  if (gradient.size() != params.size()) throw DimensionError("adam_step: gradient and parameters differ in length");
  if (state.m.size() == 0 && state.step == 0) state = AdamState(params.size());
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw DimensionError("adam_step: optimizer state does not match the parameters");
  if (!gradient.allFinite()) throw NumericError("adam_step: non-finite gradient entry");

  ++state.step;
  state.m = config.beta1 * state.m + (1.0 - config.beta1) * gradient;
  state.v = config.beta2 * state.v + (1.0 - config.beta2) * gradient.cwiseAbs2();
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  params.array() -=
      config.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + config.epsilon);
}

}  // namespace kkl
