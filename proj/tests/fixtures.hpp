#pragma once

// Hand-built models shared by several test binaries.

#include <cmath>
#include <limits>

#include "kkl/dynamics.hpp"
#include "kkl/riccati.hpp"
#include "oracles.hpp"

namespace fixture {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// A field whose network ignores x: zero weights, output bias holding the
/// Cholesky factor of (target - mu I). `target` must exceed mu I.
inline kkl::SpdField constant_field(const MatrixXd& target, double mu, std::vector<int> hidden = {4}) {
  const int n = static_cast<int>(target.rows());
  kkl::SpdField f = kkl::SpdField::create(n, hidden, mu, 0);
  f.params.setZero();
  const MatrixXd L = (target - mu * MatrixXd::Identity(n, n)).llt().matrixL();
  const int out = n * (n + 1) / 2;
  Eigen::Index k = f.params.size() - out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j, ++k) f.params(k) = i == j ? oracle::inv_softplus(L(i, i)) : L(i, j);
  return f;
}

/// Field equal to mu I up to softplus(-50) on the diagonal.
inline kkl::SpdField floor_field(int n, double mu) {
  kkl::SpdField f = kkl::SpdField::create(n, {4}, mu, 0);
  f.params.setZero();
  const int out = n * (n + 1) / 2;
  Eigen::Index k = f.params.size() - out;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j, ++k) f.params(k) = i == j ? -50.0 : 0.0;
  return f;
}

inline kkl::Box unit_box(int n, double half = 1.0) {
  return kkl::Box(VectorXd::Constant(n, -half), VectorXd::Constant(n, half));
}

inline kkl::CostWeights identity_weights(int nx, int ny, double r = 1.0) {
  return {MatrixXd::Identity(nx, nx), r * MatrixXd::Identity(ny, ny)};
}

/// Stable, observable 2-D test plant.
inline kkl::LinearSystem plant_2d() {
  MatrixXd A(2, 2), C(1, 2);
  A << 0.0, 1.0, -2.0, -1.0;
  C << 1.0, 0.0;
  return {A, C};
}

}  // namespace fixture
