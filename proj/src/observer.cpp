#include "kkl/observer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "kkl/errors.hpp"

namespace kkl {

namespace {

std::span<const double> as_span(const VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

template <class S>
S sum_squares(const VecT<S>& v) {
  S s(0.0);
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v(i) * v(i);
  return s;
}

MatrixXd r_inverse(const CostWeights& w) { return w.R.llt().solve(MatrixXd::Identity(w.R.rows(), w.R.cols())); }

}  // namespace

ObserverBundle ObserverBundle::create(int nx, int ny, const LatentDims& latent_dims, double epsilon,
                                      const std::vector<int>& T_hidden, const std::vector<int>& tau_hidden,
                                      std::uint64_t seed) {
  if (latent_dims.ny != ny) throw DimensionError("ObserverBundle: latent input dimension must equal ny");
  ObserverBundle b;
  b.nx = nx;
  b.ny = ny;
  std::vector<int> tw{nx};
  tw.insert(tw.end(), T_hidden.begin(), T_hidden.end());
  tw.push_back(latent_dims.nz);
  std::vector<int> iw{latent_dims.nz};
  iw.insert(iw.end(), tau_hidden.begin(), tau_hidden.end());
  iw.push_back(nx);
  b.T_spec = MapSpec(tw);
  b.tau_spec = MapSpec(iw);
  b.T_params = init_params(b.T_spec, seed);
  b.tau_params = init_params(b.tau_spec, seed + 1);
  b.latent = LatentFreeParams::random(latent_dims, epsilon, seed + 2);
  b.seed = seed;
  b.refresh();
  return b;
}

void ObserverBundle::validate() const {
  T_spec.validate();
  tau_spec.validate();
  latent.validate();
  const int z = nz();
  if (T_spec.input_dim() != nx || T_spec.output_dim() != z || tau_spec.input_dim() != z || tau_spec.output_dim() != nx ||
      latent.dims.ny != ny)
    throw DimensionError("ObserverBundle: inconsistent dimensions between T, tau and phi");
  if (T_params.size() != T_spec.param_count() || tau_params.size() != tau_spec.param_count())
    throw DimensionError("ObserverBundle: parameter count does not match map spec");
}

VectorXd ObserverBundle::immersion(const VectorXd& x) const { return map_eval(T_spec, as_span(T_params), x); }
VectorXd ObserverBundle::reconstruct(const VectorXd& z) const { return map_eval(tau_spec, as_span(tau_params), z); }

VectorXd ObserverBundle::flat_params() const {
  const VectorXd lat = latent.flatten();
  VectorXd flat(T_params.size() + tau_params.size() + lat.size());
  flat << T_params, tau_params, lat;
  return flat;
}

void ObserverBundle::set_flat_params(const VectorXd& flat) {
  const Eigen::Index nT = T_params.size();
  const Eigen::Index nTau = tau_params.size();
  const Eigen::Index nL = LatentFreeParams::flat_size(latent.dims);
  if (flat.size() != nT + nTau + nL) throw DimensionError("ObserverBundle: flat parameter length mismatch");
  T_params = flat.segment(0, nT);
  tau_params = flat.segment(nT, nTau);
  latent = LatentFreeParams::unflatten(latent.dims, latent.epsilon, as_span(flat).subspan(static_cast<std::size_t>(nT + nTau)));
  refresh();
}

BundleView<double> view_of(const ObserverBundle& bundle) {
  return BundleView<double>{&bundle, ParamSource{as_span(bundle.T_params)}, ParamSource{as_span(bundle.tau_params)},
                            bundle.phi};
}

BundleView<ad::Var> record_view(ad::Tape& tape, const ObserverBundle& bundle, const VectorXd& flat,
                                std::int32_t& first_leaf) {
  const auto nT = static_cast<std::size_t>(bundle.T_params.size());
  const auto nTau = static_cast<std::size_t>(bundle.tau_params.size());
  const std::span<const double> all = as_span(flat);
  first_leaf = tape.leaves(all);
  BundleView<ad::Var> v;
  v.bundle = &bundle;
  v.T = ParamSource{all.subspan(0, nT), first_leaf};
  v.tau = ParamSource{all.subspan(nT, nTau), first_leaf + static_cast<std::int32_t>(nT)};
  const std::size_t off = nT + nTau;
  ad::VecX lat(static_cast<Eigen::Index>(all.size() - off));
  for (Eigen::Index k = 0; k < lat.size(); ++k)
    lat(k) = ad::Var(all[off + static_cast<std::size_t>(k)], first_leaf + static_cast<std::int32_t>(off + static_cast<std::size_t>(k)));
  v.phi = realize_flat<ad::Var>(bundle.latent.dims, bundle.latent.epsilon, lat);
  return v;
}

void PerturbationRule::validate() const {
  if (!(radius > 0.0) || !std::isfinite(radius)) throw ConfigError("perturbation radius must be > 0");
}

VectorXd PerturbationRule::sample(const VectorXd& center, std::mt19937_64& rng) const {
  const Eigen::Index n = center.size();
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  VectorXd dir(n);
  double norm = 0.0;
  do {
    for (Eigen::Index i = 0; i < n; ++i) dir(i) = gauss(rng);
    norm = dir.norm();
  } while (norm == 0.0);
  const double rho = radius * std::pow(unif(rng), 1.0 / static_cast<double>(n));
  return center + (rho / norm) * dir;
}

template <class S>
MatT<S> effective_gain(const MatT<S>& Af, const MatT<S>& JT, const MatT<S>& Jtau, const std::vector<MatT<S>>& tau_hessians,
                       const VecT<S>& v, const MatT<S>& Jphi) {
  const Eigen::Index nx = Jtau.rows();
  const Eigen::Index nz = Jtau.cols();
  if (Af.rows() != nx || Af.cols() != nx || JT.rows() != nz || JT.cols() != nx || Jphi.rows() != nz ||
      Jphi.cols() != nz || v.size() != nz || static_cast<Eigen::Index>(tau_hessians.size()) != nx)
    throw DimensionError("effective_gain: dimension mismatch");
  MatT<S> G(nx, nz);
  for (Eigen::Index i = 0; i < nx; ++i) G.row(i) = (tau_hessians[static_cast<std::size_t>(i)] * v).transpose();
  const MatT<S> psi = -(Af * Jtau) + Jtau * Jphi + G;
  return -(psi * JT);
}

template <class S>
MatT<S> gain_psi_kkl(const BundleView<S>& view, const DynamicalSystem& system, const VecT<S>& xhat) {
  const ObserverBundle& b = *view.bundle;
  if (xhat.size() != b.nx || system.nx() != b.nx || system.ny() != b.ny)
    throw DimensionError("gain_psi_kkl: dimension mismatch");
  const auto Td = derivatives_of<S>(b.T_spec, view.T, xhat, 1);
  const VecT<S>& zs = Td.value;
  const auto taud = derivatives_of<S>(b.tau_spec, view.tau, zs, 2);
  const VecT<S> y = system.h(xhat);
  const VecT<S> v = phi_eval<S>(view.phi, zs, y);
  const MatT<S> Jphi = phi_jac_z<S>(view.phi, zs, y);
  const MatT<S> Af = system.A(xhat);
  return effective_gain<S>(Af, Td.jacobian, taud.jacobian, taud.hessians, v, Jphi);
}

MatrixXd gain_psi_kkl(const ObserverBundle& bundle, const DynamicalSystem& system, const VectorXd& xhat) {
  return gain_psi_kkl<double>(view_of(bundle), system, xhat);
}

template <class S>
S loss_pde(const BundleView<S>& view, const DynamicalSystem& system, const VectorXd& x) {
  const ObserverBundle& b = *view.bundle;
  if (x.size() != b.nx) throw DimensionError("loss_pde: dimension mismatch");
  const auto Td = derivatives_of<S>(b.T_spec, view.T, x.cast<S>(), 1);
  const VecT<S> lhs = Td.jacobian * system.f(x).cast<S>();
  const VecT<S> rhs = phi_eval<S>(view.phi, Td.value, system.h(x).cast<S>());
  return sum_squares<S>(lhs - rhs);
}

template <class S>
S loss_inv(const BundleView<S>& view, const VectorXd& x) {
  const ObserverBundle& b = *view.bundle;
  if (x.size() != b.nx) throw DimensionError("loss_inv: dimension mismatch");
  const VecT<S> z = derivatives_of<S>(b.T_spec, view.T, x.cast<S>(), 0).value;
  const VecT<S> xr = derivatives_of<S>(b.tau_spec, view.tau, z, 0).value;
  return sum_squares<S>(xr - x.cast<S>());
}

template <class S>
S loss_opt(const BundleView<S>& view, const DynamicalSystem& system, const SpdField& field, const CostWeights& weights,
           const VectorXd& x, const VectorXd& z_pert) {
  const ObserverBundle& b = *view.bundle;
  if (x.size() != b.nx || z_pert.size() != b.nz() || field.nx() != b.nx) throw DimensionError("loss_opt: dimension mismatch");
  const VecT<S> xhat = derivatives_of<S>(b.tau_spec, view.tau, z_pert.cast<S>(), 0).value;
  const VecT<S> err = x.cast<S>() - xhat;
  const MatT<S> Pi = field_eval<S>(field.spec, ParamSource{as_span(field.params)}, field.mu, xhat);
  const MatT<S> C = system.C(xhat);
  const MatT<S> target = Pi * C.transpose() * r_inverse(weights).cast<S>() * C;
  const MatT<S> Psi = gain_psi_kkl<S>(view, system, xhat);
  return sum_squares<S>(target * err - Psi * err);
}

template MatT<double> effective_gain<double>(const MatT<double>&, const MatT<double>&, const MatT<double>&,
                                             const std::vector<MatT<double>>&, const VecT<double>&, const MatT<double>&);
template MatT<ad::Var> effective_gain<ad::Var>(const MatT<ad::Var>&, const MatT<ad::Var>&, const MatT<ad::Var>&,
                                               const std::vector<MatT<ad::Var>>&, const VecT<ad::Var>&,
                                               const MatT<ad::Var>&);
template MatT<double> gain_psi_kkl<double>(const BundleView<double>&, const DynamicalSystem&, const VecT<double>&);
template MatT<ad::Var> gain_psi_kkl<ad::Var>(const BundleView<ad::Var>&, const DynamicalSystem&, const VecT<ad::Var>&);
template double loss_pde<double>(const BundleView<double>&, const DynamicalSystem&, const VectorXd&);
template ad::Var loss_pde<ad::Var>(const BundleView<ad::Var>&, const DynamicalSystem&, const VectorXd&);
template double loss_inv<double>(const BundleView<double>&, const VectorXd&);
template ad::Var loss_inv<ad::Var>(const BundleView<ad::Var>&, const VectorXd&);
template double loss_opt<double>(const BundleView<double>&, const DynamicalSystem&, const SpdField&, const CostWeights&,
                                 const VectorXd&, const VectorXd&);
template ad::Var loss_opt<ad::Var>(const BundleView<ad::Var>&, const DynamicalSystem&, const SpdField&,
                                   const CostWeights&, const VectorXd&, const VectorXd&);

double loss_pde(const ObserverBundle& bundle, const DynamicalSystem& system, const VectorXd& x) {
  return loss_pde<double>(view_of(bundle), system, x);
}
double loss_inv(const ObserverBundle& bundle, const VectorXd& x) { return loss_inv<double>(view_of(bundle), x); }
double loss_opt(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                const CostWeights& weights, const VectorXd& x, const VectorXd& z_pert) {
  return loss_opt<double>(view_of(bundle), system, field, weights, x, z_pert);
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

LossTerms mean_losses(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                      const CostWeights& weights, const std::vector<VectorXd>& points, const PerturbationRule& rule,
                      std::uint64_t seed, std::uint64_t epoch) {
  if (points.empty()) throw std::invalid_argument("mean_losses: no points");
  LossTerms t;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto rng = sample_rng(seed, epoch, i);
    const VectorXd zp = rule.sample(bundle.immersion(points[i]), rng);
    t.pde += loss_pde(bundle, system, points[i]);
    t.inv += loss_inv(bundle, points[i]);
    t.opt += loss_opt(bundle, system, field, weights, points[i], zp);
  }
  const auto n = static_cast<double>(points.size());
  t.pde /= n;
  t.inv /= n;
  t.opt /= n;
  return t;
}

namespace {

struct RecordedLoss {
  ad::Var total;
  LossTerms terms;  // unweighted batch means
};

RecordedLoss record_batch(const BundleView<ad::Var>& view, const DynamicalSystem& system, const SpdField& field,
                          const CostWeights& weights, const std::vector<VectorXd>& points,
                          std::span<const std::size_t> batch, const std::vector<VectorXd>& z_perts,
                          const LossWeights& lw) {
  ad::Var total(0.0);
  LossTerms t;
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const VectorXd& x = points[batch[k]];
    const ad::Var lp = loss_pde<ad::Var>(view, system, x);
    const ad::Var li = loss_inv<ad::Var>(view, x);
    const ad::Var lo = loss_opt<ad::Var>(view, system, field, weights, x, z_perts[k]);
    total += ad::Var(lw.pde) * lp + ad::Var(lw.inv) * li + ad::Var(lw.opt) * lo;
    t.pde += lp.val;
    t.inv += li.val;
    t.opt += lo.val;
  }
  const auto n = static_cast<double>(batch.size());
  t.pde /= n;
  t.inv /= n;
  t.opt /= n;
  return {total / ad::Var(n), t};
}

}  // namespace

double joint_loss(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                  const CostWeights& weights, const std::vector<VectorXd>& points,
                  const std::vector<VectorXd>& z_perts, const LossWeights& lw) {
  if (points.empty() || z_perts.size() != points.size()) throw std::invalid_argument("joint_loss: bad sample lists");
  double s = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    s += lw.pde * loss_pde(bundle, system, points[i]) + lw.inv * loss_inv(bundle, points[i]) +
         lw.opt * loss_opt(bundle, system, field, weights, points[i], z_perts[i]);
  return s / static_cast<double>(points.size());
}

VectorXd joint_loss_gradient(const ObserverBundle& bundle, const DynamicalSystem& system, const SpdField& field,
                             const CostWeights& weights, const std::vector<VectorXd>& points,
                             const std::vector<VectorXd>& z_perts, const LossWeights& lw) {
  if (points.empty() || z_perts.size() != points.size())
    throw std::invalid_argument("joint_loss_gradient: bad sample lists");
  std::vector<std::size_t> all(points.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const VectorXd flat = bundle.flat_params();
  ad::Tape tape;
  ad::TapeScope scope(tape);
  std::int32_t first = -1;
  const auto view = record_view(tape, bundle, flat, first);
  const RecordedLoss loss = record_batch(view, system, field, weights, points, all, z_perts, lw);
  tape.backward(loss.total);
  VectorXd g(flat.size());
  for (Eigen::Index k = 0; k < g.size(); ++k) g(k) = tape.adjoint(first + static_cast<std::int32_t>(k));
  return g;
}

ObserverTrainResult train_observer(const DynamicalSystem& system, const SpdField& field, const CostWeights& weights,
                                   const std::vector<VectorXd>& dataset, const PerturbationRule& rule,
                                   ObserverBundle init, const ObserverTrainConfig& config) {
  if (dataset.empty()) throw std::invalid_argument("train_observer: empty dataset");
  if (config.batch_size < 1 || config.epochs < 0) throw std::invalid_argument("train_observer: bad training configuration");
  rule.validate();
  weights.validate(system.nx(), system.ny());
  init.validate();
  if (init.nx != system.nx() || init.ny != system.ny() || field.nx() != system.nx())
    throw DimensionError("train_observer: bundle, field and system dimensions differ");

  ObserverTrainResult result;
  init.weights = weights;
  init.seed = config.seed;
  init.loss_history.clear();
  init.refresh();
  result.bundle = init;
  ObserverBundle checkpoint = init;

  VectorXd flat = init.flat_params();
  AdamState state(flat.size());
  AdamConfig adam = config.adam;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 shuffle_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  ad::Tape tape;
  ad::TapeScope scope(tape);
  ObserverBundle& live = result.bundle;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    LossTerms sum;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::span<const std::size_t> batch(order.data() + start, stop - start);

      std::vector<VectorXd> zp;
      zp.reserve(batch.size());
      for (std::size_t idx : batch) {
        auto rng = sample_rng(config.seed, static_cast<std::uint64_t>(epoch), idx);
        zp.push_back(rule.sample(live.immersion(dataset[idx]), rng));
      }

      tape.clear();
      std::int32_t first = -1;
      std::ostringstream why;
      try {
        const auto view = record_view(tape, live, flat, first);
        const RecordedLoss loss = record_batch(view, system, field, weights, dataset, batch, zp, config.loss_weights);
        if (!std::isfinite(loss.total.val)) {
          why << "non-finite loss at epoch " << epoch << ", batch starting at " << start;
        } else {
          tape.backward(loss.total);
          VectorXd g(flat.size());
          for (Eigen::Index k = 0; k < g.size(); ++k) g(k) = tape.adjoint(first + static_cast<std::int32_t>(k));
          adam_step(flat, g, state, adam);
          live.set_flat_params(flat);
          const auto w = static_cast<double>(batch.size());
          sum.pde += loss.terms.pde * w;
          sum.inv += loss.terms.inv * w;
          sum.opt += loss.terms.opt * w;
        }
      } catch (const NumericError& e) {
        why << "numeric failure at epoch " << epoch << ", batch starting at " << start << ": " << e.what();
      }
      if (!why.str().empty()) {
        tape.clear();
        result.bundle = checkpoint;
        result.diverged = true;
        result.diagnostic = "train_observer: " + why.str() + " (returned last checkpoint)";
        return result;
      }
    }
    const auto n = static_cast<double>(dataset.size());
    const LossTerms avg{sum.pde / n, sum.inv / n, sum.opt / n};
    result.history.push_back(avg);
    live.loss_history.push_back(avg.total());
    result.checkpoints.push_back(certify(live.phi));
    checkpoint = live;
    adam.learning_rate *= config.lr_decay;
    if (config.on_epoch) config.on_epoch(epoch, avg);
  }
  tape.clear();
  return result;
}

ObserverBundle matched_linear_bundle(const LinearSystem& lin, const CostWeights& weights, const MatrixXd& T,
                                     double epsilon) {
  lin.validate();
  const int nx = lin.nx();
  if (T.rows() != nx || T.cols() != nx) throw DimensionError("matched_linear_bundle: T must be nx x nx");
  const OptimalGain og = optimal_gain(lin, weights);
  const MatrixXd F = matched_latent_matrix(lin, og.K, T);
  const MatrixXd G = T * og.K;
  const MatrixXd Tinv = T.fullPivLu().inverse();

  ObserverBundle b;
  b.nx = nx;
  b.ny = lin.ny();
  b.T_spec = MapSpec({nx, nx});
  b.tau_spec = MapSpec({nx, nx});
  b.T_params = VectorXd::Zero(b.T_spec.param_count());
  b.tau_params = VectorXd::Zero(b.tau_spec.param_count());
  b.T_params.head(nx * nx) = Eigen::Map<const VectorXd>(T.data(), nx * nx);
  b.tau_params.head(nx * nx) = Eigen::Map<const VectorXd>(Tinv.data(), nx * nx);
  b.latent = free_params_from_linear(F, G, epsilon);
  b.weights = weights;
  b.refresh();
  return b;
}

}  // namespace kkl
