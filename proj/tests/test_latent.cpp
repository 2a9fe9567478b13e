#include <doctest.h>

#include <cmath>
#include <random>

#include "kkl/errors.hpp"
#include "kkl/latent.hpp"
#include "kkl/mlp.hpp"
#include "kkl/simlab.hpp"
#include "oracles.hpp"

using namespace kkl;

namespace {

LatentFreeParams with_random_biases(LatentFreeParams p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  p.bw = oracle::random_vector(p.dims.nq, rng);
  p.bz = oracle::random_vector(p.dims.nz, rng);
  p.d = oracle::random_vector(p.dims.nq, rng, -2.0, 2.0);
  return p;
}

// Direct composition of the three-term latent field.
VectorXd phi_by_hand(const ContractingLatentRealization& r, const VectorXd& z, const VectorXd& y) {
  VectorXd out = r.A * z + r.B2 * y + r.bz;
  for (int i = 0; i < r.dims.nq; ++i) {
    double pre = r.bw(i);
    for (int j = 0; j < r.dims.nz; ++j) pre += r.C1(i, j) * z(j);
    for (int j = 0; j < r.dims.ny; ++j) pre += r.D12(i, j) * y(j);
    out += r.B1.col(i) * std::tanh(pre);
  }
  return out;
}

}  // namespace

TEST_CASE("zero free parameters") {
  const LatentDims dims{3, 4, 1};
  const auto r = realize(LatentFreeParams::zeros(dims, 0.5));
  CHECK(r.P.isApprox(0.5 * MatrixXd::Identity(3, 3)));
  // A = P^{-1} (-eps/2 I) = -I/2 for eps = 0.5
  CHECK(r.A.isApprox(-0.5 * MatrixXd::Identity(3, 3)));
  CHECK(r.B1.isZero());
  const auto rep = certify(r);
  CHECK(rep.passed);
  CHECK(rep.max_eig_M <= 1e-15);
  CHECK(rep.max_eig_M >= -1e-15);  // the z-block of M vanishes
  CHECK(rep.lipschitz_y == 0.0);
  CHECK(rep.decay_rate == doctest::Approx(0.5));
}

TEST_CASE("construction formulas") {
  const LatentDims dims{4, 3, 2};
  const auto free = with_random_biases(LatentFreeParams::random(dims, 0.3, 21), 22);
  const auto r = realize(free);
  const MatrixXd H = free.X.transpose() * free.X;
  const MatrixXd H11 = H.topLeftCorner(4, 4), H12 = H.topRightCorner(4, 3), H22 = H.bottomRightCorner(3, 3);
  const MatrixXd P = free.Z * free.Z.transpose() + 0.3 * MatrixXd::Identity(4, 4);
  VectorXd lam(3);
  for (int i = 0; i < 3; ++i) lam(i) = 0.5 * H22.row(i).cwiseAbs().sum() + std::log1p(std::exp(free.d(i))) + 1e-6;
  const MatrixXd A = P.inverse() * (-0.5 * H11 - 0.15 * MatrixXd::Identity(4, 4) + free.Y - free.Y.transpose());
  const MatrixXd B1 = P.inverse() * (-H12 - free.C1.transpose() * lam.asDiagonal());
  CHECK(oracle::close(r.P, P, 1e-12, 1e-14));
  CHECK(oracle::close(r.lambda, lam, 1e-12));
  CHECK(oracle::close(r.A, A, 1e-10, 1e-12));
  CHECK(oracle::close(r.B1, B1, 1e-10, 1e-12));
  CHECK(r.B2 == free.B2);
  CHECK(r.C1 == free.C1);
  CHECK(r.D12 == free.D12);
  CHECK(r.bw == free.bw);
  CHECK(r.bz == free.bz);

  const auto again = realize(free);
  CHECK(again.A == r.A);
  CHECK(again.B1 == r.B1);
}

TEST_CASE("linear channel only") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto free = with_random_biases(LatentFreeParams::random({4, 0, 1}, 0.5, seed), seed + 100);
    const auto r = realize(free);
    std::mt19937_64 rng(seed);
    const VectorXd z = oracle::random_vector(4, rng), y = oracle::random_vector(1, rng);
    CHECK(oracle::close(phi_eval<double>(r, z, y), r.A * z + r.B2 * y + r.bz, 1e-14, 1e-15));
    CHECK(phi_jac_z<double>(r, z, y) == r.A);
    // A^T P + P A <= -eps I
    CHECK(oracle::max_sym_eig(r.A.transpose() * r.P + r.P * r.A) <= -0.5 + 1e-10);
  }
}

TEST_CASE("phi_eval and phi_jac_z") {
  const LatentDims dims{5, 10, 1};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = realize(with_random_biases(LatentFreeParams::random(dims, 0.5, seed), seed + 50));
    std::mt19937_64 rng(seed + 7);
    const VectorXd z = oracle::random_vector(5, rng), y = oracle::random_vector(1, rng);
    CHECK(oracle::close(phi_eval<double>(r, z, y), phi_by_hand(r, z, y), 1e-12, 1e-14));
    const MatrixXd J =
        oracle::fd_jacobian([&](const VectorXd& v) { return phi_eval<double>(r, v, y); }, z, 1e-6);
    CHECK(oracle::close(phi_jac_z<double>(r, z, y), J, 1e-5, 1e-8));
  }

  // zero pre-activation: tanh'(0) = 1
  auto free = LatentFreeParams::random(dims, 0.5, 9);
  const auto r = realize(free);
  const VectorXd z0 = VectorXd::Zero(5), y0 = VectorXd::Zero(1);
  CHECK(oracle::close(phi_jac_z<double>(r, z0, y0), r.A + r.B1 * r.C1, 1e-14, 1e-15));
  CHECK(phi_eval<double>(r, z0, y0).isZero());

  CHECK_THROWS_AS(phi_eval<double>(r, VectorXd::Zero(4), y0), DimensionError);
  CHECK_THROWS_AS(phi_eval<double>(r, z0, VectorXd::Zero(2)), DimensionError);
}

TEST_CASE("certificate holds for random free parameters") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto free = with_random_biases(LatentFreeParams::random({5, 10, 1}, 0.5, seed), seed);
    // large entries too: the construction has no admissible region
    if (seed % 4 == 0) {
      free.X *= 30.0;
      free.Y *= 30.0;
      free.C1 *= 10.0;
    }
    const auto rep = certify(realize(free));
    CHECK(rep.passed);
    CHECK(rep.max_eig_M <= 1e-8);
    CHECK(rep.min_eig_P >= 0.5 * (1 - 1e-12));
    CHECK(rep.min_lambda > 0.0);
    CHECK(std::isfinite(rep.decay_rate));
    CHECK(std::isfinite(rep.lipschitz_y));
  }
}

TEST_CASE("y-Lipschitz bound") {
  auto free = LatentFreeParams::random({3, 2, 2}, 0.5, 4);
  free.B2.setZero();
  free.D12.setZero();
  CHECK(certify(realize(free)).lipschitz_y == 0.0);
  free.B2 = MatrixXd::Identity(3, 2) * 2.0;
  CHECK(certify(realize(free)).lipschitz_y == doctest::Approx(2.0));
}

TEST_CASE("certify flags a corrupted realization") {
  auto r = realize(LatentFreeParams::random({3, 2, 1}, 0.5, 4));
  r.A(0, 0) += 5.0;
  const auto rep = certify(r);
  CHECK_FALSE(rep.passed);
  CHECK(rep.max_eig_M > 1e-8);
}

TEST_CASE("incremental decay stays inside the certified envelope") {
  const double dt = 1e-3;
  const int steps = 10000;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = realize(with_random_biases(LatentFreeParams::random({5, 10, 1}, 0.5, 1000 + seed), seed));
    const auto rep = certify(r);
    // the shared input signal
    auto y_of = [&](double t) { return VectorXd::Constant(1, std::sin(1.3 * t) + 0.5 * std::cos(0.4 * t + seed)); };
    // stack both copies and integrate time as an extra state
    const VectorField field = [&](const VectorXd& s) {
      const VectorXd y = y_of(s(10));
      VectorXd ds(11);
      ds.head(5) = phi_eval<double>(r, VectorXd(s.head(5)), y);
      ds.segment(5, 5) = phi_eval<double>(r, VectorXd(s.segment(5, 5)), y);
      ds(10) = 1.0;
      return ds;
    };
    std::mt19937_64 rng(seed);
    VectorXd s0(11);
    s0 << oracle::random_vector(5, rng, -3, 3), oracle::random_vector(5, rng, -3, 3), 0.0;
    const auto traj = integrate_rk4(field, s0, dt, steps);
    auto pnorm = [&](const VectorXd& s) {
      const VectorXd dz = s.head(5) - s.segment(5, 5);
      return std::sqrt(dz.dot(r.P * dz));
    };
    const double d0 = pnorm(traj.front());
    bool inside = true;
    for (int k = 0; k <= steps; k += 100) {
      const double envelope = d0 * std::exp(-rep.decay_rate * k * dt);
      if (pnorm(traj[static_cast<std::size_t>(k)]) > envelope * (1.0 + 1e-6) + 1e-12) inside = false;
    }
    CHECK(inside);
  }
}

TEST_CASE("flatten round trip and taped realization") {
  const LatentDims dims{3, 4, 2};
  const auto free = with_random_biases(LatentFreeParams::random(dims, 0.7, 3), 4);
  const VectorXd flat = free.flatten();
  CHECK(flat.size() == LatentFreeParams::flat_size(dims));
  const auto back = LatentFreeParams::unflatten(dims, 0.7, std::span<const double>(flat.data(), flat.size()));
  CHECK(back.flatten() == flat);
  CHECK(back.X == free.X);
  CHECK(back.bz == free.bz);

  const auto r = realize(free);
  const auto rf = realize_flat<double>(dims, 0.7, flat);
  CHECK(rf.A == r.A);
  CHECK(rf.B1 == r.B1);

  CHECK_THROWS_AS(LatentFreeParams::unflatten(dims, 0.7, std::span<const double>(flat.data(), flat.size() - 1)),
                  DimensionError);
  CHECK_THROWS_AS(LatentFreeParams::zeros(dims, 0.0), DimensionError);
  CHECK_THROWS_AS(LatentFreeParams::zeros({0, 1, 1}, 0.5), DimensionError);
}

TEST_CASE("every free parameter receives gradient") {
  const LatentDims dims{3, 4, 1};
  const auto free = with_random_biases(LatentFreeParams::random(dims, 0.5, 17), 18);
  const VectorXd flat = free.flatten();
  std::mt19937_64 rng(5);
  const VectorXd z = oracle::random_vector(3, rng), y = oracle::random_vector(1, rng);
  auto loss_d = [&](const VectorXd& f) {
    const auto r = realize_flat<double>(dims, 0.5, f);
    return phi_eval<double>(r, z, y).squaredNorm() + phi_jac_z<double>(r, z, y).squaredNorm();
  };
  const VectorXd g = param_gradient(
      [&](const ad::VecX& p) {
        const auto r = realize_flat<ad::Var>(dims, 0.5, p);
        const ad::VecX zv = z.cast<ad::Var>(), yv = y.cast<ad::Var>();
        return phi_eval<ad::Var>(r, zv, yv).squaredNorm() + phi_jac_z<ad::Var>(r, zv, yv).squaredNorm();
      },
      std::span<const double>(flat.data(), static_cast<std::size_t>(flat.size())));
  CHECK(oracle::close(g, oracle::fd_gradient(loss_d, flat, 1e-6), 1e-4, 1e-6));

  // Y enters only through Y - Y^T, so its diagonal is inert
  const int m = dims.nz + dims.nq;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const Eigen::Index y_off = i - m * m;
    const bool y_diag = y_off >= 0 && y_off < dims.nz * dims.nz && y_off % (dims.nz + 1) == 0;
    if (y_diag) {
      CHECK(g(i) == 0.0);
    } else {
      CHECK(g(i) != 0.0);
    }
  }
}

TEST_CASE("free parameters from a linear latent system") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 5; ++trial) {
    const MatrixXd F = oracle::random_stable(4, rng, 0.2);
    const MatrixXd G = oracle::random_matrix(4, 2, rng);
    const auto free = free_params_from_linear(F, G, 0.5);
    const auto r = realize(free);
    CHECK(oracle::close(r.A, F, 1e-9, 1e-11));
    CHECK(r.B2 == G);
    CHECK(certify(r).passed);
  }
  MatrixXd unstable = MatrixXd::Identity(2, 2);
  CHECK_THROWS_AS(free_params_from_linear(unstable, MatrixXd::Ones(2, 1), 0.5), NumericError);
}
