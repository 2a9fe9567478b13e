#pragma once

// Contracting latent dynamics
//
//   z' = A z + B1 tanh(C1 z + D12 y + b_w) + B2 y + b_z
//
// built from unconstrained free parameters. With H = X^T X partitioned into
// (H11, H12; H21, H22) the construction is
//
//   P      = Z Z^T + eps I
//   Lambda = diag(0.5 * sum_j |H22_ij| + softplus(d_i) + 1e-6)
//   A      = P^{-1} (-0.5 H11 - 0.5 eps I + (Y - Y^T))
//   B1     = P^{-1} (-H12 - C1^T Lambda)
//
// so that the certificate matrix
//
//   M = [A^T P + P A + eps I,  P B1 + C1^T Lambda;  B1^T P + Lambda C1,  -2 Lambda]
//     = -(H + blkdiag(0, 2 Lambda - H22))
//
// is negative semidefinite for every parameter value (2 Lambda - H22 is
// diagonally dominant). Together with the slope bound 0 <= tanh' <= 1 this
// gives d/dt |dz|_P^2 <= -eps |dz|^2 for any two trajectories under the same
// input.

#include <cstdint>
#include <span>

#include "kkl/ad.hpp"
#include "kkl/types.hpp"

namespace kkl {

struct LatentDims {
  int nz = 0;
  int nq = 0;
  int ny = 0;

  bool operator==(const LatentDims&) const = default;
};

struct LatentFreeParams {
  LatentDims dims;
  double epsilon = 0.5;  // fixed margin, not trained
  MatrixXd X;            // (nz+nq) x (nz+nq)
  MatrixXd Y;            // nz x nz
  MatrixXd Z;            // nz x nz
  VectorXd d;            // nq
  MatrixXd C1;           // nq x nz
  MatrixXd B2;           // nz x ny
  MatrixXd D12;          // nq x ny
  VectorXd bw;           // nq
  VectorXd bz;           // nz

  static LatentFreeParams zeros(const LatentDims& dims, double epsilon);
  /// Gaussian draws scaled by 1/sqrt(fan-in); biases and d start at zero.
  static LatentFreeParams random(const LatentDims& dims, double epsilon, std::uint64_t seed);

  static int flat_size(const LatentDims& dims);
  /// Order: X, Y, Z, d, C1, B2, D12, b_w, b_z; matrices column-major.
  VectorXd flatten() const;
  static LatentFreeParams unflatten(const LatentDims& dims, double epsilon, std::span<const double> flat);

  void validate() const;
};

template <class S>
struct Realization {
  LatentDims dims;
  double epsilon = 0.0;
  MatT<S> A;    // nz x nz
  MatT<S> B1;   // nz x nq
  MatT<S> B2;   // nz x ny
  MatT<S> C1;   // nq x nz
  MatT<S> D12;  // nq x ny
  VecT<S> bw;
  VecT<S> bz;
  MatT<S> P;       // contraction metric
  VecT<S> lambda;  // diagonal of Lambda
};
using ContractingLatentRealization = Realization<double>;

/// Builds the realization from a flat free-parameter vector (see flatten()).
template <class S>
Realization<S> realize_flat(const LatentDims& dims, double epsilon, const VecT<S>& flat);

ContractingLatentRealization realize(const LatentFreeParams& free);

template <class S>
VecT<S> phi_eval(const Realization<S>& r, const VecT<S>& z, const VecT<S>& y);

/// d phi / dz = A + B1 diag(tanh'(C1 z + D12 y + b_w)) C1
template <class S>
MatT<S> phi_jac_z(const Realization<S>& r, const VecT<S>& z, const VecT<S>& y);

struct CertificateReport {
  double max_eig_M = 0.0;
  double min_eig_P = 0.0;
  double min_lambda = 0.0;
  double decay_rate = 0.0;   // guaranteed rate of |dz|_P: eps / (2 lambda_max(P))
  double lipschitz_y = 0.0;  // |B2| + |B1| |D12|, spectral norms
  bool passed = false;
};

/// Builds M and checks lambda_max(M) <= tol, P >= eps I (relative slack 1e-9)
/// and Lambda > 0.
CertificateReport certify(const ContractingLatentRealization& r, double tol = 1e-8);

/// Free parameters (nq = 0) whose realization is z' = F z + G y. Requires F
/// Hurwitz; P solves F^T P + P F = -2c eps I with c >= 1 chosen so P >= eps I.
LatentFreeParams free_params_from_linear(const MatrixXd& F, const MatrixXd& G, double epsilon);

}  // namespace kkl
