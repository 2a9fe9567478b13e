#include "kkl/riccati.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "kkl/errors.hpp"

namespace kkl {

void CostWeights::validate(int nx, int ny) const {
  if (Q.rows() != nx || Q.cols() != nx) throw DimensionError("CostWeights: Q must be nx x nx");
  if (R.rows() != ny || R.cols() != ny) throw DimensionError("CostWeights: R must be ny x ny");
  auto spd = [](const MatrixXd& m, const char* what) {
    if (!m.allFinite() || (m - m.transpose()).norm() > 1e-12 * (1.0 + m.norm()))
      throw NumericError(std::string("CostWeights: ") + what + " must be symmetric");
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(m, Eigen::EigenvaluesOnly);
    if (!(es.eigenvalues().minCoeff() > 0.0)) throw NumericError(std::string("CostWeights: ") + what + " must be positive definite");
  };
  spd(Q, "Q");
  spd(R, "R");
}

SpdField SpdField::create(int nx, const std::vector<int>& hidden, double mu, std::uint64_t seed) {
  if (nx < 1) throw DimensionError("SpdField: nx must be >= 1");
  if (!(mu > 0.0)) throw DimensionError("SpdField: mu must be > 0");
  std::vector<int> widths{nx};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(nx * (nx + 1) / 2);
  SpdField f;
  f.spec = MapSpec(widths);
  f.params = init_params(f.spec, seed);
  f.mu = mu;
  return f;
}

int SpdField::nx() const { return spec.input_dim(); }

MatrixXd SpdField::eval(const VectorXd& x) const {
  return field_eval<double>(spec, ParamSource{std::span<const double>(params.data(), static_cast<std::size_t>(params.size()))}, mu, x);
}

namespace {

std::span<const double> as_span(const VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// Factor L from the raw outputs: strictly lower entries as emitted, diagonal
// through softplus so that L L^T cannot lose rank inside the domain.
template <class S>
MatT<S> lower_from(const VecT<S>& raw, int n) {
  using ad::softplus;
  MatT<S> L = MatT<S>::Zero(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j, ++k) L(i, j) = i == j ? S(softplus(raw(k))) : raw(k);
  return L;
}

// d/dt L along f, given the raw outputs and their derivative along f.
template <class S>
MatT<S> lower_rate(const VecT<S>& raw, const VecT<S>& raw_dot, int n) {
  using ad::sigmoid;
  MatT<S> L = MatT<S>::Zero(n, n);
  int k = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j, ++k) L(i, j) = i == j ? S(sigmoid(raw(k))) * raw_dot(k) : raw_dot(k);
  return L;
}

void check_field(const MapSpec& spec) {
  const int n = spec.input_dim();
  if (spec.output_dim() != n * (n + 1) / 2) throw DimensionError("SpdField: network must emit n(n+1)/2 values");
}

}  // namespace

template <class S>
MatT<S> field_eval(const MapSpec& spec, const ParamSource& params, double mu, const VecT<S>& x) {
  check_field(spec);
  const int n = spec.input_dim();
  const auto d = derivatives_of<S>(spec, params, x, 0);
  const MatT<S> L = lower_from<S>(d.value, n);
  return L * L.transpose() + MatT<S>::Identity(n, n) * S(mu);
}

template <class S>
MatT<S> pdre_residual(const MapSpec& spec, const ParamSource& params, double mu, const DynamicalSystem& system,
                      const CostWeights& weights, const VectorXd& x) {
  check_field(spec);
  const int n = spec.input_dim();
  if (system.nx() != n || x.size() != n) throw DimensionError("pdre_residual: state dimension mismatch");
  const VecT<S> xs = x.cast<S>();
  const auto d = derivatives_of<S>(spec, params, xs, 1);
  const MatT<S> L = lower_from<S>(d.value, n);
  const VectorXd fx = system.f(x);
  const MatrixXd A = system.A(x);
  const MatrixXd C = system.C(x);

  // directional derivative of L along f
  const VecT<S> raw_dot = d.jacobian * fx.cast<S>();
  const MatT<S> Ldot = lower_rate<S>(d.value, raw_dot, n);
  const MatT<S> lie = Ldot * L.transpose() + L * Ldot.transpose();

  const MatT<S> Pi = L * L.transpose() + MatT<S>::Identity(n, n) * S(mu);
  const MatrixXd CRC = C.transpose() * weights.R.llt().solve(C);
  return -lie + Pi * A.transpose().cast<S>() + A.cast<S>() * Pi - Pi * CRC.cast<S>() * Pi + weights.Q.cast<S>();
}

template MatT<double> field_eval<double>(const MapSpec&, const ParamSource&, double, const VecT<double>&);
template MatT<ad::Var> field_eval<ad::Var>(const MapSpec&, const ParamSource&, double, const VecT<ad::Var>&);
template MatT<double> pdre_residual<double>(const MapSpec&, const ParamSource&, double, const DynamicalSystem&,
                                            const CostWeights&, const VectorXd&);
template MatT<ad::Var> pdre_residual<ad::Var>(const MapSpec&, const ParamSource&, double, const DynamicalSystem&,
                                              const CostWeights&, const VectorXd&);

MatrixXd pdre_residual(const SpdField& field, const DynamicalSystem& system, const CostWeights& weights,
                       const VectorXd& x) {
  return pdre_residual<double>(field.spec, ParamSource{as_span(field.params)}, field.mu, system, weights, x);
}

double pdre_loss(const SpdField& field, const DynamicalSystem& system, const CostWeights& weights,
                 const std::vector<VectorXd>& points) {
  if (points.empty()) throw std::invalid_argument("pdre_loss: no points");
  double total = 0.0;
  for (const auto& x : points) total += pdre_residual(field, system, weights, x).squaredNorm();
  return total / static_cast<double>(points.size());
}

namespace {

// Records the mean squared residual over `batch` on `tape`; returns it and the
// first parameter leaf.
ad::Var batch_loss(ad::Tape& tape, const SpdField& field, const DynamicalSystem& system, const CostWeights& weights,
                   const std::vector<VectorXd>& points, std::span<const std::size_t> batch, std::int32_t& first_leaf) {
  const ParamSource src = make_param_leaves(tape, as_span(field.params));
  first_leaf = src.first_leaf;
  ad::Var total(0.0);
  for (std::size_t idx : batch) {
    const ad::MatX rho = pdre_residual<ad::Var>(field.spec, src, field.mu, system, weights, points[idx]);
    ad::Var sq(0.0);
    for (Eigen::Index j = 0; j < rho.cols(); ++j)
      for (Eigen::Index i = 0; i < rho.rows(); ++i) sq += rho(i, j) * rho(i, j);
    total += sq;
  }
  return total / ad::Var(static_cast<double>(batch.size()));
}

VectorXd leaf_gradient(const ad::Tape& tape, std::int32_t first, Eigen::Index n) {
  VectorXd g(n);
  for (Eigen::Index k = 0; k < n; ++k) g(k) = tape.adjoint(first + static_cast<std::int32_t>(k));
  return g;
}

}  // namespace

VectorXd pdre_loss_gradient(const SpdField& field, const DynamicalSystem& system, const CostWeights& weights,
                            const std::vector<VectorXd>& points) {
  if (points.empty()) throw std::invalid_argument("pdre_loss_gradient: no points");
  std::vector<std::size_t> all(points.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  ad::Tape tape;
  ad::TapeScope scope(tape);
  std::int32_t first = -1;
  const ad::Var loss = batch_loss(tape, field, system, weights, points, all, first);
  tape.backward(loss);
  return leaf_gradient(tape, first, field.params.size());
}

PinvTrainResult train_pinv(const DynamicalSystem& system, const CostWeights& weights,
                           const std::vector<VectorXd>& dataset, SpdField init, const TrainConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("train_pinv: empty dataset");
  if (config.batch_size < 1 || config.epochs < 0) throw std::invalid_argument("train_pinv: bad training configuration");
  weights.validate(system.nx(), system.ny());
  if (init.nx() != system.nx()) throw DimensionError("train_pinv: field and system dimensions differ");
  for (const auto& x : dataset)
    if (!system.domain().contains(x)) throw std::invalid_argument("train_pinv: dataset point outside the system domain");

  PinvTrainResult result;
  result.field = std::move(init);
  result.initial_loss = pdre_loss(result.field, system, weights, dataset);
  if (!std::isfinite(result.initial_loss)) throw NumericError("train_pinv: initial loss is not finite");

  AdamState state(result.field.params.size());
  AdamConfig adam = config.adam;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(config.seed);
  ad::Tape tape;
  ad::TapeScope scope(tape);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::span<const std::size_t> batch(order.data() + start, stop - start);
      tape.clear();
      std::int32_t first = -1;
      const ad::Var loss = batch_loss(tape, result.field, system, weights, dataset, batch, first);
      if (!std::isfinite(loss.val)) {
        std::ostringstream msg;
        msg << "train_pinv: non-finite loss at epoch " << epoch << ", batch starting at " << start;
        throw NumericError(msg.str());
      }
      tape.backward(loss);
      const VectorXd g = leaf_gradient(tape, first, result.field.params.size());
      adam_step(result.field.params, g, state, adam);
      epoch_sum += loss.val * static_cast<double>(batch.size());
    }
    const double avg = epoch_sum / static_cast<double>(dataset.size());
    result.loss_history.push_back(avg);
    adam.learning_rate *= config.lr_decay;
    if (config.on_epoch) config.on_epoch(epoch, avg);
  }
  tape.clear();
  return result;
}

namespace {

MatrixXd riccati_rhs(const MatrixXd& A, const MatrixXd& Q, const MatrixXd& CRC, const MatrixXd& S) {
  return A * S + S * A.transpose() + Q - S * CRC * S;
}

}  // namespace

double are_residual(const LinearSystem& lin, const CostWeights& weights, const MatrixXd& Sigma) {
  const MatrixXd CRC = lin.C_mat.transpose() * weights.R.llt().solve(lin.C_mat);
  return riccati_rhs(lin.A_mat, weights.Q, CRC, Sigma).norm();
}

MatrixXd are_solve(const LinearSystem& lin, const CostWeights& weights, long max_steps) {
  lin.validate();
  weights.validate(lin.nx(), lin.ny());
  const MatrixXd& A = lin.A_mat;
  const MatrixXd& Q = weights.Q;
  const MatrixXd CRC = lin.C_mat.transpose() * weights.R.llt().solve(lin.C_mat);

  MatrixXd S = Q;
  for (long step = 0; step < max_steps; ++step) {
    const MatrixXd k1 = riccati_rhs(A, Q, CRC, S);
    if (k1.norm() <= 1e-10) {
      const MatrixXd Sym = 0.5 * (S + S.transpose());
      const double res = riccati_rhs(A, Q, CRC, Sym).norm();
      if (res > 1e-8) throw NumericError("are_solve: residual check failed");
      return Sym;
    }
    // step from the stiffness of the linearized flow (closed-loop matrix)
    const double rate = 2.0 * (A - S * CRC).norm();
    const double dt = std::min(1.0, 0.5 / std::max(rate, 1e-12));
    const MatrixXd k2 = riccati_rhs(A, Q, CRC, S + 0.5 * dt * k1);
    const MatrixXd k3 = riccati_rhs(A, Q, CRC, S + 0.5 * dt * k2);
    const MatrixXd k4 = riccati_rhs(A, Q, CRC, S + dt * k3);
    S += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    S = 0.5 * (S + S.transpose());
    if (!S.allFinite() || S.norm() > 1e12) break;
  }
  std::ostringstream msg;
  msg << "are_solve: differential Riccati flow did not converge for the linear system with A =\n"
      << A << "\nC =\n"
      << lin.C_mat << "\n(is (A, C) detectable?)";
  throw NumericError(msg.str());
}

MatrixXd sylvester_solve(const MatrixXd& A, const MatrixXd& F, const MatrixXd& G, const MatrixXd& C) {
  const Eigen::Index nx = A.rows();
  const Eigen::Index nz = F.rows();
  if (A.cols() != nx || F.cols() != nz || G.rows() != nz || C.cols() != nx || G.cols() != C.rows())
    throw DimensionError("sylvester_solve: incompatible shapes");

  const Eigen::VectorXcd ea = Eigen::EigenSolver<MatrixXd>(A, false).eigenvalues();
  const Eigen::VectorXcd ef = Eigen::EigenSolver<MatrixXd>(F, false).eigenvalues();
  double gap = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < ea.size(); ++i)
    for (Eigen::Index j = 0; j < ef.size(); ++j) gap = std::min(gap, std::abs(ea(i) - ef(j)));
  if (gap <= 1e-9) {
    std::ostringstream msg;
    msg << "sylvester_solve: spectra of A and F overlap (min eigenvalue distance " << gap << ")";
    throw NumericError(msg.str());
  }

  // vec(T A) - vec(F T) = (A^T (x) I_nz - I_nx (x) F) vec(T)
  MatrixXd K = MatrixXd::Zero(nx * nz, nx * nz);
  for (Eigen::Index i = 0; i < nx; ++i)
    for (Eigen::Index j = 0; j < nx; ++j) {
      if (A(j, i) != 0.0) K.block(i * nz, j * nz, nz, nz).diagonal().array() += A(j, i);
      if (i == j) K.block(i * nz, j * nz, nz, nz) -= F;
    }
  const MatrixXd GC = G * C;
  const auto lu = K.fullPivLu();
  if (lu.rank() < K.rows()) throw NumericError("sylvester_solve: Kronecker matrix is singular (spectral overlap)");
  const VectorXd vecT = lu.solve(Eigen::Map<const VectorXd>(GC.data(), GC.size()));
  MatrixXd T = Eigen::Map<const MatrixXd>(vecT.data(), nz, nx);
  const double res = (T * A - F * T - GC).norm();
  if (!(res <= 1e-9 * (1.0 + GC.norm()))) {
    std::ostringstream msg;
    msg << "sylvester_solve: residual " << res << " too large (near spectral overlap)";
    throw NumericError(msg.str());
  }
  return T;
}

OptimalGain optimal_gain(const LinearSystem& lin, const CostWeights& weights) {
  OptimalGain g;
  g.Sigma = are_solve(lin, weights);
  g.K = g.Sigma * lin.C_mat.transpose() * weights.R.inverse();
  g.Psi = g.K * lin.C_mat;
  return g;
}

MatrixXd matched_latent_matrix(const LinearSystem& lin, const MatrixXd& K, const MatrixXd& T) {
  if (T.rows() != T.cols() || T.rows() != lin.nx()) throw DimensionError("matched_latent_matrix: T must be nx x nx");
  const auto lu = T.fullPivLu();
  if (!lu.isInvertible()) throw NumericError("matched_latent_matrix: T is singular");
  if (T.isIdentity(0.0)) return lin.A_mat - K * lin.C_mat;
  return T * (lin.A_mat - K * lin.C_mat) * lu.inverse();
}

}  // namespace kkl
