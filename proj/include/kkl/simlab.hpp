#pragma once

// Fixed-step simulation of plants and observers, noise injection, and error metrics.

#include <cstdint>
#include <functional>
#include <vector>

#include "kkl/dynamics.hpp"
#include "kkl/observer.hpp"
#include "kkl/types.hpp"

namespace kkl {

using VectorField = std::function<VectorXd(const VectorXd&)>;

/// Classical RK4 on x' = field(x) + w_k with w_k held over step k. Returns
/// steps + 1 states starting with x0. `disturbance` is empty or has `steps`
/// entries. Throws NumericError naming the step on a non-finite state.
std::vector<VectorXd> integrate_rk4(const VectorField& field, const VectorXd& x0, double dt, int steps,
                                    const std::vector<VectorXd>& disturbance = {});

struct NoiseSpec {
  double sigma_w = 0.0;  // process noise, per component
  double sigma_v = 0.0;  // measurement noise, per component
  std::uint64_t seed = 0;

  void validate() const;
};

struct Trajectory {
  double dt = 0.0;
  std::vector<double> times;        // steps + 1
  std::vector<VectorXd> states;     // steps + 1
  std::vector<VectorXd> outputs;    // steps + 1, y_k = h(x_k) + v_k
  std::vector<VectorXd> process;    // steps, w_k
  std::vector<VectorXd> measurement;  // steps + 1, v_k
  NoiseSpec noise;
};

/// w and v come from separate streams derived from the seed, and the
/// standard normal draws do not depend on the sigmas, so runs that differ
/// only in noise level share the underlying realization.
Trajectory simulate_plant(const DynamicalSystem& system, const VectorXd& x0, double dt, int steps,
                          const NoiseSpec& noise);

struct EstimateTrajectory {
  std::vector<VectorXd> latent;     // z_k, one per output sample
  std::vector<VectorXd> estimates;  // tau(z_k)
};

enum class InputHold {
  Zero,    // y_k over [t_k, t_k+1)
  Linear,  // straight line from y_k to y_k+1
};

/// Integrates z' = phi(z, y) with y reconstructed from the samples by `hold`.
EstimateTrajectory rollout_observer(const ObserverBundle& bundle, const std::vector<VectorXd>& outputs,
                                    const VectorXd& z0, double dt, InputHold hold = InputHold::Zero);

struct MetricsReport {
  VectorXd rmse_per_state;
  double rmse_total = 0.0;   // sqrt of the mean squared error norm
  double output_rmse = 0.0;  // rms of |y - h(xhat)|; 0 when no outputs given
  std::size_t samples = 0;
};

/// RMS errors over t >= transient_cut. `outputs` may be empty, in which case
/// output_rmse stays 0 and `system` is unused.
MetricsReport metrics(const std::vector<double>& times, const std::vector<VectorXd>& states,
                      const std::vector<VectorXd>& estimates, double transient_cut,
                      const DynamicalSystem* system = nullptr, const std::vector<VectorXd>& outputs = {});

}  // namespace kkl
