#pragma once

// The inverse-information field Pi(x) ~ P^{-1}(x), the residual of the
// Riccati PDE written in Pi,
//
//   rho(x) = -L_f Pi + Pi A^T + A Pi - Pi C^T R^{-1} C Pi + Q,
//
// its least-squares training, and the constant-coefficient oracles used to
// check it (algebraic Riccati, Sylvester, optimal gain).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kkl/adam.hpp"
#include "kkl/dynamics.hpp"
#include "kkl/mlp.hpp"
#include "kkl/types.hpp"

namespace kkl {

struct CostWeights {
  MatrixXd Q;  // nx x nx, symmetric positive definite
  MatrixXd R;  // ny x ny, symmetric positive definite

  /// Throws DimensionError on shape mismatch or NumericError if Q or R is not SPD.
  void validate(int nx, int ny) const;
};

/// Pi(x) = L(x) L(x)^T + mu I where L is lower triangular, filled row by row
/// from the n(n+1)/2 outputs of a network; diagonal entries pass through
/// softplus.
struct SpdField {
  MapSpec spec;
  ParamVector params;
  double mu = 1e-3;

  static SpdField create(int nx, const std::vector<int>& hidden, double mu, std::uint64_t seed);

  int nx() const;
  MatrixXd eval(const VectorXd& x) const;
};

template <class S>
MatT<S> field_eval(const MapSpec& spec, const ParamSource& params, double mu, const VecT<S>& x);

template <class S>
MatT<S> pdre_residual(const MapSpec& spec, const ParamSource& params, double mu, const DynamicalSystem& system,
                      const CostWeights& weights, const VectorXd& x);

MatrixXd pdre_residual(const SpdField& field, const DynamicalSystem& system, const CostWeights& weights,
                       const VectorXd& x);

/// Mean squared Frobenius residual over `points`.
double pdre_loss(const SpdField& field, const DynamicalSystem& system, const CostWeights& weights,
                 const std::vector<VectorXd>& points);
/// Gradient of pdre_loss with respect to the field parameters.
VectorXd pdre_loss_gradient(const SpdField& field, const DynamicalSystem& system, const CostWeights& weights,
                            const std::vector<VectorXd>& points);

struct TrainConfig {
  int epochs = 50;
  int batch_size = 64;
  AdamConfig adam;
  /// Learning rate multiplier applied after each epoch (1 = constant).
  double lr_decay = 1.0;
  std::uint64_t seed = 0;
  /// Called after each epoch with (epoch index, epoch-average loss).
  std::function<void(int, double)> on_epoch;
};

struct PinvTrainResult {
  SpdField field;
  double initial_loss = 0.0;         // full-dataset loss before the first update
  std::vector<double> loss_history;  // per-epoch average of the minibatch losses
};

/// Adam on the mean squared residual. Throws NumericError on a non-finite loss.
PinvTrainResult train_pinv(const DynamicalSystem& system, const CostWeights& weights,
                           const std::vector<VectorXd>& dataset, SpdField init, const TrainConfig& config);

/// Solves A S + S A^T + Q - S C^T R^{-1} C S = 0 by integrating the
/// differential Riccati flow from S(0) = Q until |S'|_F <= 1e-10.
MatrixXd are_solve(const LinearSystem& lin, const CostWeights& weights, long max_steps = 4'000'000);

/// Unique T with T A = F T + G C, from the vectorized (Kronecker) system.
MatrixXd sylvester_solve(const MatrixXd& A, const MatrixXd& F, const MatrixXd& G, const MatrixXd& C);

struct OptimalGain {
  MatrixXd Sigma;  // ARE solution
  MatrixXd K;      // Sigma C^T R^{-1}
  MatrixXd Psi;    // K C
};

OptimalGain optimal_gain(const LinearSystem& lin, const CostWeights& weights);

/// F = T (A - K C) T^{-1}
MatrixXd matched_latent_matrix(const LinearSystem& lin, const MatrixXd& K, const MatrixXd& T);

/// |A S + S A^T + Q - S C^T R^{-1} C S|_F
double are_residual(const LinearSystem& lin, const CostWeights& weights, const MatrixXd& Sigma);

}  // namespace kkl
