#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "kkl/errors.hpp"
#include "kkl/simlab.hpp"
#include "oracles.hpp"

using namespace kkl;

namespace {

double sample_sd(const std::vector<VectorXd>& xs, int comp) {
  double m = 0;
  for (const auto& x : xs) m += x(comp);
  m /= static_cast<double>(xs.size());
  double s = 0;
  for (const auto& x : xs) s += (x(comp) - m) * (x(comp) - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

struct MatchedCase {
  LinearSystem lin = fixture::plant_2d();
  CostWeights w = fixture::identity_weights(2, 1);
  MatrixXd T;
  ObserverBundle bundle;
  SystemPtr sys;

  MatchedCase() {
    T.resize(2, 2);
    T << 1.0, 0.3, -0.2, 0.8;
    bundle = matched_linear_bundle(lin, w, T);
    sys = make_linear(lin, fixture::unit_box(2, 3.0));
  }
};

}  // namespace

TEST_CASE("rk4 on closed forms") {
  const auto traj = integrate_rk4([](const VectorXd& x) { return VectorXd(-x); }, VectorXd::Ones(1), 0.1, 10);
  REQUIRE(traj.size() == 11);
  CHECK(traj.front()(0) == 1.0);
  CHECK(std::abs(traj.back()(0) - std::exp(-1.0)) <= 1e-5);

  std::mt19937_64 rng(1);
  std::vector<VectorXd> w;
  for (int i = 0; i < 50; ++i) w.push_back(oracle::random_vector(3, rng));
  const VectorXd x0 = VectorXd::LinSpaced(3, 1, 3);
  const auto acc = integrate_rk4([](const VectorXd& x) { return VectorXd(VectorXd::Zero(x.size())); }, x0, 0.05, 50, w);
  VectorXd expect = x0;
  for (int k = 0; k < 50; ++k) {
    expect += 0.05 * w[static_cast<std::size_t>(k)];
    CHECK(oracle::close(acc[static_cast<std::size_t>(k + 1)], expect, 1e-13, 1e-14));
  }
}

TEST_CASE("rk4 convergence on van der pol") {
  const auto vdp = make_vdp();
  const VectorField f = [&](const VectorXd& x) { return vdp->f(x); };
  const VectorXd x0 = Eigen::Vector2d(1.0, -0.5);
  const auto coarse = integrate_rk4(f, x0, 1e-2, 1000);
  const auto fine = integrate_rk4(f, x0, 5e-3, 2000);
  CHECK((coarse.back() - fine.back()).norm() <= 1e-6);
}

TEST_CASE("rk4 errors") {
  const VectorField blowup = [](const VectorXd& x) { return VectorXd(x.cwiseProduct(x)); };
  try {
    integrate_rk4(blowup, VectorXd::Ones(1), 0.01, 1000);
    FAIL("expected a numeric failure");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
  const VectorField id = [](const VectorXd& x) { return x; };
  CHECK_THROWS_AS(integrate_rk4(id, VectorXd::Ones(1), 0.0, 10), std::invalid_argument);
  CHECK_THROWS_AS(integrate_rk4(id, VectorXd::Ones(1), 0.1, 0), std::invalid_argument);
  CHECK_THROWS_AS(integrate_rk4(id, VectorXd::Ones(1), 0.1, 3, {VectorXd::Zero(1)}), DimensionError);
}

TEST_CASE("plant simulation") {
  const auto vdp = make_vdp();
  const VectorXd x0 = Eigen::Vector2d(1.0, 0.5);
  SUBCASE("noise free") {
    const auto t = simulate_plant(*vdp, x0, 1e-2, 500, {});
    REQUIRE(t.states.size() == 501);
    REQUIRE(t.outputs.size() == 501);
    REQUIRE(t.times.size() == 501);
    CHECK(t.process.size() == 500);
    CHECK(t.measurement.size() == 501);
    for (std::size_t k = 0; k < t.states.size(); ++k) CHECK(t.outputs[k] == vdp->h(t.states[k]));
    for (std::size_t k = 1; k < t.times.size(); ++k) CHECK(t.times[k] == doctest::Approx(k * 1e-2).epsilon(1e-12));
  }
  SUBCASE("measurement noise statistics") {
    const int n = 20000;
    const auto t = simulate_plant(*vdp, x0, 1e-2, n, {0.0, 0.5, 9});
    const double se = 0.5 / std::sqrt(2.0 * n);
    CHECK(std::abs(sample_sd(t.measurement, 0) - 0.5) <= 3 * se);
    for (const auto& w : t.process) CHECK(w.isZero());
  }
  SUBCASE("process noise statistics") {
    const auto t = simulate_plant(*vdp, x0, 1e-2, 20000, {0.25, 0.0, 9});
    CHECK(std::abs(sample_sd(t.process, 0) - 0.25) <= 3 * 0.25 / std::sqrt(40000.0));
    CHECK(std::abs(sample_sd(t.process, 1) - 0.25) <= 3 * 0.25 / std::sqrt(40000.0));
  }
  SUBCASE("determinism and shared draws") {
    const auto a = simulate_plant(*vdp, x0, 1e-2, 300, {0.25, 0.5, 4});
    const auto b = simulate_plant(*vdp, x0, 1e-2, 300, {0.25, 0.5, 4});
    CHECK(a.states == b.states);
    CHECK(a.outputs == b.outputs);
    const auto c = simulate_plant(*vdp, x0, 1e-2, 300, {0.25, 0.1, 4});
    for (std::size_t k = 0; k < c.measurement.size(); ++k)
      CHECK(oracle::close(c.measurement[k] * 5.0, a.measurement[k], 1e-14, 1e-15));
    CHECK(c.process == a.process);
    const auto d = simulate_plant(*vdp, x0, 1e-2, 300, {0.25, 0.5, 5});
    CHECK(d.process != a.process);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(simulate_plant(*vdp, Eigen::Vector2d(3.0, 0.0), 1e-2, 10, {}), std::invalid_argument);
    CHECK_THROWS_AS(simulate_plant(*vdp, VectorXd::Zero(3), 1e-2, 10, {}), DimensionError);
    CHECK_THROWS_AS(simulate_plant(*vdp, x0, 1e-2, 10, {-0.1, 0.0, 0}), ConfigError);
  }
}

TEST_CASE("matched linear rollout tracks the plant") {
  MatchedCase mc;
  const VectorXd x0 = Eigen::Vector2d(1.2, -0.7);
  for (const double dt : {1e-2, 1e-3}) {
    const int steps = static_cast<int>(std::lround(10.0 / dt));
    const auto plant = simulate_plant(*mc.sys, x0, dt, steps, {});
    const auto est = rollout_observer(mc.bundle, plant.outputs, mc.T * x0, dt, InputHold::Linear);
    double worst = 0;
    for (std::size_t k = 0; k < plant.states.size(); ++k)
      worst = std::max(worst, (est.estimates[k] - plant.states[k]).norm());
    CHECK(worst <= (dt < 5e-3 ? 1e-6 : 1e-5));

    // a zero-order hold lags the input: first order in dt
    const auto zoh = rollout_observer(mc.bundle, plant.outputs, mc.T * x0, dt, InputHold::Zero);
    double worst_zoh = 0;
    for (std::size_t k = 0; k < plant.states.size(); ++k)
      worst_zoh = std::max(worst_zoh, (zoh.estimates[k] - plant.states[k]).norm());
    CHECK(worst_zoh <= 0.5 * dt);
    CHECK(worst_zoh > 10 * worst);
  }
}

TEST_CASE("matched linear estimate follows A xhat + Psi (x - xhat)") {
  MatchedCase mc;
  const auto og = optimal_gain(mc.lin, mc.w);
  const double dt = 1e-4;
  const int steps = 50000;
  const VectorXd x0 = Eigen::Vector2d(0.8, 0.4);
  const VectorXd xh0 = Eigen::Vector2d(-1.0, 1.5);
  const auto plant = simulate_plant(*mc.sys, x0, dt, steps, {});
  const auto est = rollout_observer(mc.bundle, plant.outputs, mc.T * xh0, dt, InputHold::Linear);
  // the same error dynamics integrated directly in x coordinates
  const VectorField joint = [&](const VectorXd& s) {
    const VectorXd x = s.head(2), xh = s.tail(2);
    VectorXd ds(4);
    ds.head(2) = mc.lin.A_mat * x;
    ds.tail(2) = mc.lin.A_mat * xh + og.Psi * (x - xh);
    return ds;
  };
  VectorXd s0(4);
  s0 << x0, xh0;
  const auto ref = integrate_rk4(joint, s0, dt, steps);
  double worst = 0;
  for (std::size_t k = 0; k < ref.size(); ++k) worst = std::max(worst, (est.estimates[k] - ref[k].tail(2)).norm());
  CHECK(worst <= 1e-8);
}

TEST_CASE("latent trajectories contract within the certified envelope") {
  auto b = ObserverBundle::create(2, 1, {5, 10, 1}, 0.5, {8}, {8}, 3);
  const auto rep = certify(b.phi);
  const auto vdp = make_vdp();
  const double dt = 1e-3;
  const auto plant = simulate_plant(*vdp, Eigen::Vector2d(1, 1), dt, 8000, {0.0, 0.1, 2});
  std::mt19937_64 rng(4);
  const VectorXd za = oracle::random_vector(5, rng, -4, 4), zb = oracle::random_vector(5, rng, -4, 4);
  const auto ra = rollout_observer(b, plant.outputs, za, dt);
  const auto rb = rollout_observer(b, plant.outputs, zb, dt);
  auto pnorm = [&](const VectorXd& d) { return std::sqrt(d.dot(b.phi.P * d)); };
  const double d0 = pnorm(za - zb);
  for (std::size_t k = 0; k < ra.latent.size(); k += 50) {
    const double t = static_cast<double>(k) * dt;
    CHECK(pnorm(ra.latent[k] - rb.latent[k]) <= d0 * std::exp(-rep.decay_rate * t) * (1 + 1e-6) + 1e-12);
  }
}

TEST_CASE("equilibrium rollout") {
  auto b = ObserverBundle::create(2, 1, {4, 8, 1}, 0.5, {8}, {8}, 3);
  b.latent.bw.setZero();
  b.latent.bz.setZero();
  b.refresh();
  const std::vector<VectorXd> y(200, VectorXd::Zero(1));
  const auto r = rollout_observer(b, y, VectorXd::Zero(4), 1e-2);
  for (const auto& z : r.latent) CHECK(z.isZero());
  CHECK(r.estimates.size() == 200);
  CHECK(r.estimates[7] == b.reconstruct(VectorXd::Zero(4)));

  CHECK_THROWS_AS(rollout_observer(b, {}, VectorXd::Zero(4), 1e-2), std::invalid_argument);
  CHECK_THROWS_AS(rollout_observer(b, y, VectorXd::Zero(3), 1e-2), DimensionError);
}

TEST_CASE("metrics") {
  std::vector<double> t;
  std::vector<VectorXd> x, same, shifted;
  const Eigen::Vector2d c(0.3, -2.0);
  for (int k = 0; k <= 100; ++k) {
    t.push_back(0.1 * k);
    x.push_back(Eigen::Vector2d(std::sin(0.1 * k), std::cos(0.1 * k)));
    same.push_back(x.back());
    shifted.push_back(x.back() + c);
  }
  const auto m0 = metrics(t, x, same, 5.0);
  CHECK(m0.rmse_total == 0.0);
  CHECK(m0.rmse_per_state.isZero());
  CHECK(m0.samples == 51);

  const auto m1 = metrics(t, x, shifted, 5.0);
  CHECK(m1.rmse_per_state(0) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(m1.rmse_per_state(1) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(m1.rmse_total == doctest::Approx(c.norm()).epsilon(1e-12));

  const auto vdp = make_vdp();
  std::vector<VectorXd> y;
  for (const auto& s : x) y.push_back(vdp->h(s) + VectorXd::Constant(1, 0.5));
  CHECK(metrics(t, x, same, 5.0, vdp.get(), y).output_rmse == doctest::Approx(0.5).epsilon(1e-12));

  CHECK_THROWS_AS(metrics(t, x, same, 11.0), std::invalid_argument);
  std::vector<VectorXd> short_est(same.begin(), same.end() - 1);
  CHECK_THROWS_AS(metrics(t, x, short_est, 5.0), DimensionError);
}

TEST_CASE("matched linear observer filters measurement noise") {
  MatchedCase mc;
  const VectorXd x0 = Eigen::Vector2d(1.5, 0.0);
  const auto plant = simulate_plant(*mc.sys, x0, 1e-2, 2000, {0.0, 0.1, 6});
  const auto est = rollout_observer(mc.bundle, plant.outputs, VectorXd::Zero(2), 1e-2);
  const auto m = metrics(plant.times, plant.states, est.estimates, 5.0);
  std::vector<VectorXd> raw;
  for (const auto& y : plant.outputs) raw.push_back(Eigen::Vector2d(y(0), plant.states[raw.size()](1)));
  const auto mraw = metrics(plant.times, plant.states, raw, 5.0);
  CHECK(m.rmse_total < mraw.rmse_per_state(0));

  const auto again = rollout_observer(mc.bundle, plant.outputs, VectorXd::Zero(2), 1e-2);
  CHECK(again.latent == est.latent);
}
