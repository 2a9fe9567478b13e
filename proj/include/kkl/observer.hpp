#pragma once

// Learned KKL observer  z' = phi(z, y),  xhat = tau(z)  with immersion T.
//
// The effective gain at xhat is Psi = -psi J_T with
//   psi = -A_f J_tau + J_tau J_phi + G,   G_ij = sum_k d2 tau_i / dz_j dz_k * v_k,
// everything evaluated at z* = T(xhat), y = h(xhat), v = phi(z*, y).

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "kkl/adam.hpp"
#include "kkl/dynamics.hpp"
#include "kkl/latent.hpp"
#include "kkl/mlp.hpp"
#include "kkl/riccati.hpp"

namespace kkl {

struct ObserverBundle {
  int nx = 0;
  int ny = 0;
  MapSpec T_spec;  // nx -> nz
  ParamVector T_params;
  MapSpec tau_spec;  // nz -> nx
  ParamVector tau_params;
  LatentFreeParams latent;
  ContractingLatentRealization phi;  // realize(latent), kept in sync by refresh()

  // metadata
  CostWeights weights;
  std::vector<double> loss_history;
  std::uint64_t seed = 0;

  int nz() const { return latent.dims.nz; }

  static ObserverBundle create(int nx, int ny, const LatentDims& latent_dims, double epsilon,
                               const std::vector<int>& T_hidden, const std::vector<int>& tau_hidden, std::uint64_t seed);

  void refresh() { phi = realize(latent); }
  /// Throws DimensionError if the three maps disagree on dimensions.
  void validate() const;

  VectorXd immersion(const VectorXd& x) const;
  VectorXd reconstruct(const VectorXd& z) const;
  VectorXd latent_field(const VectorXd& z, const VectorXd& y) const { return phi_eval<double>(phi, z, y); }

  /// All trainable parameters: theta_T, theta_tau, then the latent free parameters.
  VectorXd flat_params() const;
  void set_flat_params(const VectorXd& flat);
};

/// The bundle as seen by a loss evaluation over scalar type S.
template <class S>
struct BundleView {
  const ObserverBundle* bundle = nullptr;
  ParamSource T;
  ParamSource tau;
  Realization<S> phi;
};

BundleView<double> view_of(const ObserverBundle& bundle);
/// Declares every trainable parameter as a leaf of `tape` and realizes the
/// latent dynamics on it. `flat` must outlive the backward sweep.
BundleView<ad::Var> record_view(ad::Tape& tape, const ObserverBundle& bundle, const VectorXd& flat,
                                std::int32_t& first_leaf);

struct PerturbationRule {
  double radius = 0.1;

  void validate() const;
  /// Uniform draw from the closed ball of `radius` around `center`.
  VectorXd sample(const VectorXd& center, std::mt19937_64& rng) const;
};

/// Psi = -(-Af Jtau + Jtau Jphi + G) JT from the pointwise ingredients;
/// `tau_hessians[i]` is the Hessian of output i of tau.
template <class S>
MatT<S> effective_gain(const MatT<S>& Af, const MatT<S>& JT, const MatT<S>& Jtau, const std::vector<MatT<S>>& tau_hessians,
                       const VecT<S>& v, const MatT<S>& Jphi);

template <class S>
MatT<S> gain_psi_kkl(const BundleView<S>& view, const DynamicalSystem& system, const VecT<S>& xhat);
MatrixXd gain_psi_kkl(const ObserverBundle& bundle, const DynamicalSystem& system, const VectorXd& xhat);

template <class S>
S loss_pde(const BundleView<S>& view, const DynamicalSystem& system, const VectorXd& x);
template <class S>
S loss_inv(const BundleView<S>& view, const VectorXd& x);
template <class S>
S loss_opt(const BundleView<S>& view, const DynamicalSystem& system, const SpdField& field, const CostWeights& weights,
           const VectorXd& x, const VectorXd& z_pert);

double loss_pde(const ObserverBundle& bundle, const DynamicalSystem& system, const VectorXd& x);
double loss_inv(const ObserverBundle& bundle, const VectorXd& x);
double loss_opt(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                const CostWeights& weights, const VectorXd& x, const VectorXd& z_pert);

struct LossWeights {
  double pde = 1.0;
  double inv = 1.0;
  double opt = 1.0;
};

struct LossTerms {
  double pde = 0.0;
  double inv = 0.0;
  double opt = 0.0;
  double total() const { return pde + inv + opt; }
};

/// Perturbation stream for sample `index` in `epoch`; independent of batching.
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

/// Mean unweighted loss terms over `points`, with perturbations from sample_rng(seed, epoch, i).
LossTerms mean_losses(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                      const CostWeights& weights, const std::vector<VectorXd>& points, const PerturbationRule& rule,
                      std::uint64_t seed, std::uint64_t epoch = 0);

/// Gradient of the weighted mean joint loss over `points` with respect to
/// flat_params(); `z_perts[i]` is the perturbed latent point of sample i.
VectorXd joint_loss_gradient(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                             const CostWeights& weights, const std::vector<VectorXd>& points,
                             const std::vector<VectorXd>& z_perts, const LossWeights& lw = {});
double joint_loss(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                  const CostWeights& weights, const std::vector<VectorXd>& points,
                  const std::vector<VectorXd>& z_perts, const LossWeights& lw = {});

struct ObserverTrainConfig {
  int epochs = 50;
  int batch_size = 64;
  AdamConfig adam;
  /// Learning rate multiplier applied after each epoch (1 = constant).
  double lr_decay = 1.0;
  LossWeights loss_weights;
  std::uint64_t seed = 0;
  std::function<void(int, const LossTerms&)> on_epoch;
};

struct ObserverTrainResult {
  ObserverBundle bundle;
  std::vector<LossTerms> history;  // per-epoch averages of the minibatch terms
  std::vector<CertificateReport> checkpoints;
  bool diverged = false;  // true if training stopped on a non-finite loss
  std::string diagnostic;
};

/// Joint Adam training of (theta_T, theta_tau, latent) with the field frozen.
/// On a non-finite loss, returns the last epoch checkpoint with diverged set.
ObserverTrainResult train_observer(const DynamicalSystem& system, const SpdField& field, const CostWeights& weights,
                                   const std::vector<VectorXd>& dataset, const PerturbationRule& rule,
                                   ObserverBundle init, const ObserverTrainConfig& config);

/// Linear observer matched to the optimal gain: T(x) = T x, tau(z) = T^{-1} z,
/// phi(z, y) = F z + G y with F = T (A - K C) T^{-1}, G = T K.
ObserverBundle matched_linear_bundle(const LinearSystem& lin, const CostWeights& weights, const MatrixXd& T,
                                     double epsilon = 0.5);

}  // namespace kkl
