#include <doctest.h>

#include <cmath>
#include <random>

#include "kkl/adam.hpp"
#include "kkl/errors.hpp"
#include "kkl/mlp.hpp"
#include "oracles.hpp"

using namespace kkl;

namespace {

std::span<const double> span_of(const VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

MapSpec random_spec(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 4), width(2, 6), depth(1, 3);
  std::vector<int> w{dim(rng)};
  const int hidden = depth(rng);
  for (int i = 0; i < hidden; ++i) w.push_back(width(rng));
  w.push_back(dim(rng));
  return MapSpec(w);
}

ParamVector random_params(const MapSpec& spec, std::mt19937_64& rng) {
  // wider than the default init so the tanh curvature is visible
  return oracle::random_vector(spec.param_count(), rng, -1.2, 1.2);
}

}  // namespace

TEST_CASE("map spec shapes") {
  const MapSpec s({3, 5, 2});
  CHECK(s.param_count() == (3 + 1) * 5 + (5 + 1) * 2);
  CHECK(s.input_dim() == 3);
  CHECK(s.output_dim() == 2);
  CHECK_THROWS_AS(MapSpec({3}).validate(), DimensionError);
  CHECK_THROWS_AS(MapSpec({3, 0, 1}).validate(), DimensionError);
  CHECK(init_params(s, 1).size() == s.param_count());
}

TEST_CASE("init: zero biases, weights bounded by 1/sqrt(fan_in)") {
  const MapSpec s({4, 9, 3});
  const ParamVector p = init_params(s, 42);
  CHECK(p.segment(36, 9).isZero());
  CHECK(p.segment(45 + 27, 3).isZero());
  CHECK(p.head(36).cwiseAbs().maxCoeff() <= 0.5);
  CHECK(p.segment(45, 27).cwiseAbs().maxCoeff() <= 1.0 / 3.0);
  CHECK(p.head(36).cwiseAbs().maxCoeff() > 0.3);
  CHECK(init_params(s, 42) == p);
  CHECK(init_params(s, 43) != p);
}

TEST_CASE("map_eval closed forms") {
  const MapSpec deep({3, 4, 2});
  CHECK(map_eval(deep, span_of(ParamVector::Zero(deep.param_count())), VectorXd::Random(3)).isZero());

  // single affine layer
  const MapSpec aff({2, 3});
  MatrixXd W(3, 2);
  W << 1, 2, 3, 4, 5, 6;
  VectorXd b(3);
  b << -1, 0, 1;
  ParamVector p(aff.param_count());
  p << Eigen::Map<const VectorXd>(W.data(), 6), b;
  const VectorXd x = Eigen::Vector2d(0.5, -2.0);
  CHECK(map_eval(aff, span_of(p), x).isApprox(W * x + b));

  // one hidden layer with an identity embedding and a summing read-out
  const MapSpec net({2, 2, 1});
  ParamVector q(net.param_count());
  q << 1, 0, 0, 1, 0, 0, 1, 1, 0.3;
  CHECK(map_eval(net, span_of(q), VectorXd::Zero(2))(0) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(map_eval(net, span_of(q), x)(0) == doctest::Approx(std::tanh(0.5) + std::tanh(-2.0) + 0.3).epsilon(1e-14));

  CHECK_THROWS_AS(map_eval(net, span_of(q), VectorXd::Zero(3)), DimensionError);
  CHECK_THROWS_AS(map_eval(net, span_of(VectorXd(q.head(5))), VectorXd::Zero(2)), DimensionError);
}

TEST_CASE("derivatives of simple maps") {
  const MapSpec aff({3, 2});
  std::mt19937_64 rng(5);
  const ParamVector p = oracle::random_vector(aff.param_count(), rng);
  const auto d = derivatives(aff, span_of(p), oracle::random_vector(3, rng));
  CHECK(d.jacobian == Eigen::Map<const MatrixXd>(p.data(), 2, 3));
  for (const auto& H : d.hessians) CHECK(H.isZero());

  // x -> tanh(w x) as a 1-1-1 net with unit read-out
  const double w = 1.7;
  const MapSpec scalar({1, 1, 1});
  ParamVector s(4);
  s << w, 0, 1, 0;
  const auto ds = derivatives(scalar, span_of(s), VectorXd::Zero(1));
  CHECK(ds.value(0) == 0.0);
  CHECK(ds.jacobian(0, 0) == doctest::Approx(w).epsilon(1e-15));
  CHECK(std::abs(ds.hessians[0](0, 0)) < 1e-15);
}

TEST_CASE("derivatives against an independent evaluator and finite differences") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 10; ++trial) {
    const MapSpec spec = random_spec(rng);
    const ParamVector p = random_params(spec, rng);
    const VectorXd x = oracle::random_vector(spec.input_dim(), rng);
    const auto d = derivatives(spec, span_of(p), x);

    CHECK(oracle::close(d.value, oracle::naive_eval(spec.widths, p, x), 1e-12, 1e-14));
    for (int j = 0; j < spec.input_dim(); ++j) {
      const VectorXd e = VectorXd::Unit(spec.input_dim(), j);
      CHECK(oracle::close(d.jacobian.col(j), oracle::naive_eval(spec.widths, p, x, e).dvalue, 1e-12, 1e-14));
    }

    auto f = [&](const VectorXd& v) { return map_eval(spec, span_of(p), v); };
    CHECK(oracle::close(d.jacobian, oracle::fd_jacobian(f, x, 1e-4), 1e-4, 1e-6));
    for (int k = 0; k < spec.output_dim(); ++k) {
      const MatrixXd& H = d.hessians[static_cast<std::size_t>(k)];
      CHECK((H - H.transpose()).cwiseAbs().maxCoeff() <= 1e-10);
      // Hessian as the derivative of the exact Jacobian row
      auto row = [&](const VectorXd& v) -> VectorXd {
        return derivatives(spec, span_of(p), v, 1).jacobian.row(k).transpose();
      };
      CHECK(oracle::close(H, oracle::fd_jacobian(row, x, 1e-4), 1e-4, 1e-6));
      CHECK(oracle::close(H, oracle::fd_hessian(f, x, k, 1e-3), 1e-3, 1e-5));
    }
  }
}

TEST_CASE("evaluation is pure") {
  std::mt19937_64 rng(8);
  const MapSpec spec({2, 5, 5, 3});
  const ParamVector p = random_params(spec, rng);
  const VectorXd x = oracle::random_vector(2, rng);
  const auto a = derivatives(spec, span_of(p), x);
  const auto b = derivatives(spec, span_of(p), x);
  CHECK(a.value == b.value);
  CHECK(a.jacobian == b.jacobian);
  for (std::size_t k = 0; k < a.hessians.size(); ++k) CHECK(a.hessians[k] == b.hessians[k]);
}

TEST_CASE("taped derivatives carry the same values") {
  std::mt19937_64 rng(9);
  const MapSpec spec({3, 4, 2});
  const ParamVector p = random_params(spec, rng);
  const VectorXd x = oracle::random_vector(3, rng);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  const ParamSource src = make_param_leaves(tape, span_of(p));
  const auto dv = derivatives(spec, src, x.cast<ad::Var>(), 2);
  const auto dd = derivatives(spec, span_of(p), x);
  CHECK(ad::values(dv.value) == dd.value);
  CHECK(ad::values(dv.jacobian) == dd.jacobian);
  CHECK(oracle::close(ad::values(dv.hessians[1]), dd.hessians[1], 1e-14, 1e-15));
}

TEST_CASE("param_gradient closed forms") {
  std::mt19937_64 rng(10);
  const VectorXd theta = oracle::random_vector(7, rng);
  const VectorXd g = param_gradient(
      [](const ad::VecX& p) {
        ad::Var s = 0.0;
        for (Eigen::Index i = 0; i < p.size(); ++i) s = s + 0.5 * p(i) * p(i);
        return s;
      },
      span_of(theta));
  CHECK(oracle::close(g, theta, 1e-15));

  // |W x0 + b|^2 for an affine map: dW = 2 (W x0 + b) x0^T, db = 2 (W x0 + b)
  const MapSpec aff({3, 2});
  const ParamVector p = oracle::random_vector(aff.param_count(), rng);
  const VectorXd x0 = oracle::random_vector(3, rng);
  const VectorXd gp = param_gradient(
      [&](const ad::VecX& leaves) {
        const ParamSource src{span_of(p), leaves(0).id};
        const auto d = derivatives(aff, src, x0.cast<ad::Var>(), 0);
        return d.value.squaredNorm();
      },
      span_of(p));
  const MatrixXd W = Eigen::Map<const MatrixXd>(p.data(), 2, 3);
  const VectorXd r = W * x0 + p.tail(2);
  const MatrixXd dW = 2.0 * r * x0.transpose();
  CHECK(oracle::close(gp.head(6), Eigen::Map<const VectorXd>(dW.data(), 6), 1e-12, 1e-14));
  CHECK(oracle::close(gp.tail(2), 2.0 * r, 1e-12, 1e-14));

  CHECK_THROWS_AS(param_gradient([](const ad::VecX& q) { return q(0) / 0.0; }, span_of(theta)), NumericError);
}

TEST_CASE("parameter gradients through input-derivatives match finite differences") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    const MapSpec spec = random_spec(rng);
    const ParamVector p = random_params(spec, rng);
    const VectorXd x = oracle::random_vector(spec.input_dim(), rng);
    const VectorXd dir = oracle::random_vector(spec.output_dim(), rng);
    // a loss mixing value, one Jacobian entry and a Hessian quadratic form
    auto loss_d = [&](const VectorXd& q) {
      const auto d = derivatives(spec, span_of(q), x);
      double s = d.value.dot(dir) + std::pow(d.jacobian(0, 0), 2);
      for (std::size_t k = 0; k < d.hessians.size(); ++k) s += dir(static_cast<Eigen::Index>(k)) * d.hessians[k].sum();
      return s;
    };
    const VectorXd g = param_gradient(
        [&](const ad::VecX& leaves) {
          const ParamSource src{span_of(p), leaves(0).id};
          const auto d = derivatives(spec, src, x.cast<ad::Var>(), 2);
          ad::Var s = d.value.dot(dir.cast<ad::Var>()) + d.jacobian(0, 0) * d.jacobian(0, 0);
          for (std::size_t k = 0; k < d.hessians.size(); ++k)
            s = s + dir(static_cast<Eigen::Index>(k)) * d.hessians[k].sum();
          return s;
        },
        span_of(p));
    CHECK(oracle::close(g, oracle::fd_gradient(loss_d, p, 1e-5), 1e-4, 1e-6));
  }
}

TEST_CASE("adam") {
  const AdamConfig cfg{.learning_rate = 0.01};
  SUBCASE("zero gradient leaves params and advances the counter") {
    VectorXd p = VectorXd::LinSpaced(4, -1, 1);
    const VectorXd p0 = p;
    AdamState st(4);
    adam_step(p, VectorXd::Zero(4), st, cfg);
    CHECK(p == p0);
    CHECK(st.step == 1);
  }
  SUBCASE("constant gradient moves against its sign at about the learning rate") {
    VectorXd p = VectorXd::Zero(3);
    VectorXd g(3);
    g << 2.0, -0.5, 1e-3;
    AdamState st(3);
    VectorXd prev = p;
    for (int i = 0; i < 500; ++i) {
      prev = p;
      adam_step(p, g, st, cfg);
    }
    const VectorXd step = p - prev;
    for (int i = 0; i < 3; ++i) {
      CHECK(step(i) * g(i) < 0.0);
      CHECK(std::abs(step(i)) == doctest::Approx(cfg.learning_rate).epsilon(1e-3));
    }
  }
  SUBCASE("deterministic") {
    std::mt19937_64 rng(1);
    std::vector<VectorXd> grads;
    for (int i = 0; i < 20; ++i) grads.push_back(oracle::random_vector(5, rng));
    auto run = [&] {
      VectorXd p = VectorXd::Ones(5);
      AdamState st(5);
      for (const auto& g : grads) adam_step(p, g, st, cfg);
      return p;
    };
    CHECK(run() == run());
  }
  SUBCASE("errors") {
    VectorXd p = VectorXd::Zero(2);
    AdamState st(2);
    CHECK_THROWS_AS(adam_step(p, VectorXd::Zero(3), st, cfg), DimensionError);
    VectorXd bad(2);
    bad << 1.0, std::nan("");
    CHECK_THROWS_AS(adam_step(p, bad, st, cfg), NumericError);
  }
}
