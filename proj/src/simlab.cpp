#include "kkl/simlab.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "kkl/errors.hpp"

namespace kkl {

std::vector<VectorXd> integrate_rk4(const VectorField& field, const VectorXd& x0, double dt, int steps,
                                    const std::vector<VectorXd>& disturbance) {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("integrate_rk4: dt must be > 0");
  if (steps < 1) throw std::invalid_argument("integrate_rk4: steps must be >= 1");
  if (!disturbance.empty() && disturbance.size() != static_cast<std::size_t>(steps))
    throw DimensionError("integrate_rk4: disturbance needs one entry per step");

  std::vector<VectorXd> xs;
  xs.reserve(static_cast<std::size_t>(steps) + 1);
  xs.push_back(x0);
  VectorXd x = x0;
  for (int k = 0; k < steps; ++k) {
    const bool noisy = !disturbance.empty();
    auto rhs = [&](const VectorXd& s) -> VectorXd {
      return noisy ? VectorXd(field(s) + disturbance[static_cast<std::size_t>(k)]) : field(s);
    };
    const VectorXd k1 = rhs(x);
    const VectorXd k2 = rhs(x + 0.5 * dt * k1);
    const VectorXd k3 = rhs(x + 0.5 * dt * k2);
    const VectorXd k4 = rhs(x + dt * k3);
    x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!x.allFinite()) {
      std::ostringstream msg;
      msg << "integrate_rk4: non-finite state at step " << k + 1;
      throw NumericError(msg.str());
    }
    xs.push_back(x);
  }
  return xs;
}

void NoiseSpec::validate() const {
  if (!(sigma_w >= 0.0) || !(sigma_v >= 0.0) || !std::isfinite(sigma_w) || !std::isfinite(sigma_v))
    throw ConfigError("noise standard deviations must be finite and >= 0");
}

Trajectory simulate_plant(const DynamicalSystem& system, const VectorXd& x0, double dt, int steps,
                          const NoiseSpec& noise) {
  noise.validate();
  if (x0.size() != system.nx()) throw DimensionError("simulate_plant: x0 has the wrong dimension");
  if (!system.domain().contains(x0)) throw std::invalid_argument("simulate_plant: x0 outside the system domain");

  Trajectory tr;
  tr.dt = dt;
  tr.noise = noise;
  std::seed_seq w_seq{static_cast<std::uint32_t>(noise.seed), static_cast<std::uint32_t>(noise.seed >> 32), 1u};
  std::seed_seq v_seq{static_cast<std::uint32_t>(noise.seed), static_cast<std::uint32_t>(noise.seed >> 32), 2u};
  std::mt19937_64 w_rng(w_seq);
  std::mt19937_64 v_rng(v_seq);
  std::normal_distribution<double> gauss(0.0, 1.0);

  if (steps >= 1) tr.process.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    VectorXd w(system.nx());
    for (Eigen::Index i = 0; i < w.size(); ++i) w(i) = noise.sigma_w * gauss(w_rng);
    tr.process.push_back(w);
  }
  tr.states = integrate_rk4([&](const VectorXd& x) { return system.f(x); }, x0, dt, steps, tr.process);

  tr.times.reserve(tr.states.size());
  for (std::size_t k = 0; k < tr.states.size(); ++k) {
    tr.times.push_back(static_cast<double>(k) * dt);
    VectorXd v(system.ny());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = noise.sigma_v * gauss(v_rng);
    tr.measurement.push_back(v);
    tr.outputs.push_back(system.h(tr.states[k]) + v);
  }
  return tr;
}

EstimateTrajectory rollout_observer(const ObserverBundle& bundle, const std::vector<VectorXd>& outputs,
                                    const VectorXd& z0, double dt, InputHold hold) {
  if (outputs.empty()) throw std::invalid_argument("rollout_observer: empty output sequence");
  if (!(dt > 0.0) || !std::isfinite(dt)) throw std::invalid_argument("rollout_observer: dt must be > 0");
  if (z0.size() != bundle.nz()) throw DimensionError("rollout_observer: z0 has the wrong dimension");
  for (const auto& y : outputs)
    if (y.size() != bundle.ny) throw DimensionError("rollout_observer: output has the wrong dimension");
  EstimateTrajectory est;
  est.latent.reserve(outputs.size());
  est.estimates.reserve(outputs.size());
  VectorXd z = z0;
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    est.latent.push_back(z);
    est.estimates.push_back(bundle.reconstruct(z));
    if (k + 1 == outputs.size()) break;
    const VectorXd& y0 = outputs[k];
    const VectorXd y1 = hold == InputHold::Linear ? outputs[k + 1] : y0;
    const VectorXd ym = 0.5 * (y0 + y1);
    const VectorXd k1 = bundle.latent_field(z, y0);
    const VectorXd k2 = bundle.latent_field(z + 0.5 * dt * k1, ym);
    const VectorXd k3 = bundle.latent_field(z + 0.5 * dt * k2, ym);
    const VectorXd k4 = bundle.latent_field(z + dt * k3, y1);
    z += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!z.allFinite()) {
      std::ostringstream msg;
      msg << "rollout_observer: non-finite latent state at step " << k + 1;
      throw NumericError(msg.str());
    }
  }
  return est;
}

MetricsReport metrics(const std::vector<double>& times, const std::vector<VectorXd>& states,
                      const std::vector<VectorXd>& estimates, double transient_cut, const DynamicalSystem* system,
                      const std::vector<VectorXd>& outputs) {
  if (times.size() != states.size() || states.size() != estimates.size())
    throw DimensionError("metrics: trajectories must share the time grid");
  if (!outputs.empty() && (outputs.size() != states.size() || system == nullptr))
    throw DimensionError("metrics: outputs need the same grid and a system");
  if (states.empty()) throw std::invalid_argument("metrics: empty trajectory");

  MetricsReport rep;
  rep.rmse_per_state = VectorXd::Zero(states.front().size());
  double out_sq = 0.0;
  for (std::size_t k = 0; k < times.size(); ++k) {
    if (times[k] < transient_cut) continue;
    rep.rmse_per_state += (states[k] - estimates[k]).cwiseAbs2();
    if (!outputs.empty()) out_sq += (outputs[k] - system->h(estimates[k])).squaredNorm();
    ++rep.samples;
  }
  if (rep.samples == 0) throw std::invalid_argument("metrics: no samples after the transient cut");
  const auto n = static_cast<double>(rep.samples);
  rep.rmse_total = std::sqrt(rep.rmse_per_state.sum() / n);
  rep.rmse_per_state = (rep.rmse_per_state / n).cwiseSqrt();
  rep.output_rmse = std::sqrt(out_sq / n);
  return rep;
}

}  // namespace kkl
