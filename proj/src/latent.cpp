#include "kkl/latent.hpp"

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "kkl/errors.hpp"

namespace kkl {

namespace {

constexpr double kLambdaFloor = 1e-6;

using ad::softplus;

// Solves P X = B for symmetric positive definite P by Cholesky; works for any scalar.
template <class S>
MatT<S> spd_solve(const MatT<S>& P, const MatT<S>& B) {
  using std::sqrt;
  const Eigen::Index n = P.rows();
  MatT<S> L = MatT<S>::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    S diag = P(j, j);
    for (Eigen::Index k = 0; k < j; ++k) diag -= L(j, k) * L(j, k);
    if (!(ad::value(diag) > 0.0)) throw NumericError("realize: contraction metric is not positive definite");
    L(j, j) = sqrt(diag);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      S s = P(i, j);
      for (Eigen::Index k = 0; k < j; ++k) s -= L(i, k) * L(j, k);
      L(i, j) = s / L(j, j);
    }
  }
  MatT<S> X = B;
  for (Eigen::Index c = 0; c < X.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      S s = X(i, c);
      for (Eigen::Index k = 0; k < i; ++k) s -= L(i, k) * X(k, c);
      X(i, c) = s / L(i, i);
    }
    for (Eigen::Index i = n - 1; i >= 0; --i) {
      S s = X(i, c);
      for (Eigen::Index k = i + 1; k < n; ++k) s -= L(k, i) * X(k, c);
      X(i, c) = s / L(i, i);
    }
  }
  return X;
}

template <class S>
MatT<S> take(const VecT<S>& flat, Eigen::Index& off, Eigen::Index rows, Eigen::Index cols) {
  MatT<S> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = flat(off++);
  return m;
}

template <class S>
VecT<S> take_vec(const VecT<S>& flat, Eigen::Index& off, Eigen::Index n) {
  VecT<S> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = flat(off++);
  return v;
}

void put(VectorXd& flat, Eigen::Index& off, const MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) flat(off++) = m(i, j);
}

void check_dims(const LatentDims& d) {
  if (d.nz < 1 || d.nq < 0 || d.ny < 1) throw DimensionError("latent: need nz >= 1, nq >= 0, ny >= 1");
}

}  // namespace

LatentFreeParams LatentFreeParams::zeros(const LatentDims& dims, double epsilon) {
  check_dims(dims);
  const int m = dims.nz + dims.nq;
  LatentFreeParams p;
  p.dims = dims;
  p.epsilon = epsilon;
  p.X = MatrixXd::Zero(m, m);
  p.Y = MatrixXd::Zero(dims.nz, dims.nz);
  p.Z = MatrixXd::Zero(dims.nz, dims.nz);
  p.d = VectorXd::Zero(dims.nq);
  p.C1 = MatrixXd::Zero(dims.nq, dims.nz);
  p.B2 = MatrixXd::Zero(dims.nz, dims.ny);
  p.D12 = MatrixXd::Zero(dims.nq, dims.ny);
  p.bw = VectorXd::Zero(dims.nq);
  p.bz = VectorXd::Zero(dims.nz);
  p.validate();
  return p;
}

LatentFreeParams LatentFreeParams::random(const LatentDims& dims, double epsilon, std::uint64_t seed) {
  LatentFreeParams p = zeros(dims, epsilon);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  auto fill = [&](MatrixXd& m, double scale) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * g(rng);
  };
  const int m = dims.nz + dims.nq;
  fill(p.X, 1.0 / std::sqrt(static_cast<double>(m)));
  fill(p.Y, 1.0 / std::sqrt(static_cast<double>(dims.nz)));
  fill(p.Z, 1.0 / std::sqrt(static_cast<double>(dims.nz)));
  fill(p.C1, 1.0 / std::sqrt(static_cast<double>(dims.nz)));
  fill(p.B2, 1.0 / std::sqrt(static_cast<double>(dims.ny)));
  fill(p.D12, 1.0 / std::sqrt(static_cast<double>(dims.ny)));
  return p;
}

int LatentFreeParams::flat_size(const LatentDims& d) {
  const int m = d.nz + d.nq;
  return m * m + 2 * d.nz * d.nz + d.nq + d.nq * d.nz + d.nz * d.ny + d.nq * d.ny + d.nq + d.nz;
}

VectorXd LatentFreeParams::flatten() const {
  validate();
  VectorXd flat(flat_size(dims));
  Eigen::Index off = 0;
  put(flat, off, X);
  put(flat, off, Y);
  put(flat, off, Z);
  put(flat, off, d);
  put(flat, off, C1);
  put(flat, off, B2);
  put(flat, off, D12);
  put(flat, off, bw);
  put(flat, off, bz);
  return flat;
}

LatentFreeParams LatentFreeParams::unflatten(const LatentDims& dims, double epsilon, std::span<const double> flat) {
  check_dims(dims);
  if (flat.size() != static_cast<std::size_t>(flat_size(dims)))
    throw DimensionError("LatentFreeParams: flat vector has the wrong length");
  const VectorXd v = Eigen::Map<const VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size()));
  const int m = dims.nz + dims.nq;
  LatentFreeParams p;
  p.dims = dims;
  p.epsilon = epsilon;
  Eigen::Index off = 0;
  p.X = take<double>(v, off, m, m);
  p.Y = take<double>(v, off, dims.nz, dims.nz);
  p.Z = take<double>(v, off, dims.nz, dims.nz);
  p.d = take_vec<double>(v, off, dims.nq);
  p.C1 = take<double>(v, off, dims.nq, dims.nz);
  p.B2 = take<double>(v, off, dims.nz, dims.ny);
  p.D12 = take<double>(v, off, dims.nq, dims.ny);
  p.bw = take_vec<double>(v, off, dims.nq);
  p.bz = take_vec<double>(v, off, dims.nz);
  p.validate();
  return p;
}

void LatentFreeParams::validate() const {
  check_dims(dims);
  if (!(epsilon > 0.0)) throw DimensionError("LatentFreeParams: epsilon must be > 0");
  const int m = dims.nz + dims.nq;
  auto expect = [](const auto& a, Eigen::Index r, Eigen::Index c, const char* what) {
    if (a.rows() != r || a.cols() != c) throw DimensionError(std::string("LatentFreeParams: bad shape for ") + what);
  };
  expect(X, m, m, "X");
  expect(Y, dims.nz, dims.nz, "Y");
  expect(Z, dims.nz, dims.nz, "Z");
  expect(d, dims.nq, 1, "d");
  expect(C1, dims.nq, dims.nz, "C1");
  expect(B2, dims.nz, dims.ny, "B2");
  expect(D12, dims.nq, dims.ny, "D12");
  expect(bw, dims.nq, 1, "b_w");
  expect(bz, dims.nz, 1, "b_z");
}

template <class S>
Realization<S> realize_flat(const LatentDims& dims, double epsilon, const VecT<S>& flat) {
  check_dims(dims);
  if (flat.size() != LatentFreeParams::flat_size(dims)) throw DimensionError("realize: flat vector has the wrong length");
  if (!(epsilon > 0.0)) throw DimensionError("realize: epsilon must be > 0");
  using std::abs;
  const int nz = dims.nz;
  const int nq = dims.nq;
  const int m = nz + nq;

  Eigen::Index off = 0;
  const MatT<S> X = take<S>(flat, off, m, m);
  const MatT<S> Y = take<S>(flat, off, nz, nz);
  const MatT<S> Z = take<S>(flat, off, nz, nz);
  const VecT<S> d = take_vec<S>(flat, off, nq);

  Realization<S> r;
  r.dims = dims;
  r.epsilon = epsilon;
  r.C1 = take<S>(flat, off, nq, nz);
  r.B2 = take<S>(flat, off, nz, dims.ny);
  r.D12 = take<S>(flat, off, nq, dims.ny);
  r.bw = take_vec<S>(flat, off, nq);
  r.bz = take_vec<S>(flat, off, nz);

  const MatT<S> H = X.transpose() * X;
  const MatT<S> eps_I = MatT<S>::Identity(nz, nz) * S(epsilon);
  r.P = Z * Z.transpose() + eps_I;

  r.lambda.resize(nq);
  for (int i = 0; i < nq; ++i) {
    S row = S(0.0);
    for (int j = 0; j < nq; ++j) row += abs(H(nz + i, nz + j));
    r.lambda(i) = S(0.5) * row + softplus(d(i)) + S(kLambdaFloor);
  }

  const MatT<S> rhs_A = S(-0.5) * H.topLeftCorner(nz, nz) - S(0.5) * eps_I + (Y - Y.transpose());
  r.A = spd_solve<S>(r.P, rhs_A);
  if (nq > 0) {
    const MatT<S> rhs_B = -H.topRightCorner(nz, nq) - r.C1.transpose() * r.lambda.asDiagonal();
    r.B1 = spd_solve<S>(r.P, rhs_B);
  } else {
    r.B1.resize(nz, 0);
  }
  return r;
}

ContractingLatentRealization realize(const LatentFreeParams& free) {
  return realize_flat<double>(free.dims, free.epsilon, free.flatten());
}

namespace {
template <class S>
void check_phi_args(const Realization<S>& r, const VecT<S>& z, const VecT<S>& y) {
  if (z.size() != r.dims.nz) throw DimensionError("phi: latent state has the wrong dimension");
  if (y.size() != r.dims.ny) throw DimensionError("phi: output has the wrong dimension");
}
}  // namespace

template <class S>
VecT<S> phi_eval(const Realization<S>& r, const VecT<S>& z, const VecT<S>& y) {
  check_phi_args(r, z, y);
  using std::tanh;
  VecT<S> dz = r.A * z + r.B2 * y + r.bz;
  if (r.dims.nq > 0) {
    VecT<S> pre = r.C1 * z + r.D12 * y + r.bw;
    for (Eigen::Index i = 0; i < pre.size(); ++i) pre(i) = tanh(pre(i));
    dz += r.B1 * pre;
  }
  return dz;
}

template <class S>
MatT<S> phi_jac_z(const Realization<S>& r, const VecT<S>& z, const VecT<S>& y) {
  check_phi_args(r, z, y);
  using std::tanh;
  if (r.dims.nq == 0) return r.A;
  VecT<S> slope = r.C1 * z + r.D12 * y + r.bw;
  for (Eigen::Index i = 0; i < slope.size(); ++i) {
    const S t = tanh(slope(i));
    slope(i) = S(1.0) - t * t;
  }
  return r.A + r.B1 * slope.asDiagonal() * r.C1;
}

template Realization<double> realize_flat<double>(const LatentDims&, double, const VecT<double>&);
template Realization<ad::Var> realize_flat<ad::Var>(const LatentDims&, double, const VecT<ad::Var>&);
template VecT<double> phi_eval<double>(const Realization<double>&, const VecT<double>&, const VecT<double>&);
template VecT<ad::Var> phi_eval<ad::Var>(const Realization<ad::Var>&, const VecT<ad::Var>&, const VecT<ad::Var>&);
template MatT<double> phi_jac_z<double>(const Realization<double>&, const VecT<double>&, const VecT<double>&);
template MatT<ad::Var> phi_jac_z<ad::Var>(const Realization<ad::Var>&, const VecT<ad::Var>&, const VecT<ad::Var>&);

namespace {
double spectral_norm(const MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::JacobiSVD<MatrixXd> svd(m);
  return svd.singularValues()(0);
}
}  // namespace

CertificateReport certify(const ContractingLatentRealization& r, double tol) {
  const int nz = r.dims.nz;
  const int nq = r.dims.nq;
  const MatrixXd Lam = r.lambda.asDiagonal();
  MatrixXd M(nz + nq, nz + nq);
  M.topLeftCorner(nz, nz) = r.A.transpose() * r.P + r.P * r.A + r.epsilon * MatrixXd::Identity(nz, nz);
  if (nq > 0) {
    M.topRightCorner(nz, nq) = r.P * r.B1 + r.C1.transpose() * Lam;
    M.bottomLeftCorner(nq, nz) = M.topRightCorner(nz, nq).transpose();
    M.bottomRightCorner(nq, nq) = -2.0 * Lam;
  }
  const MatrixXd Ms = 0.5 * (M + M.transpose());

  CertificateReport rep;
  Eigen::SelfAdjointEigenSolver<MatrixXd> em(Ms, Eigen::EigenvaluesOnly);
  rep.max_eig_M = em.eigenvalues().maxCoeff();
  Eigen::SelfAdjointEigenSolver<MatrixXd> ep(0.5 * (r.P + r.P.transpose()), Eigen::EigenvaluesOnly);
  rep.min_eig_P = ep.eigenvalues().minCoeff();
  const double max_eig_P = ep.eigenvalues().maxCoeff();
  rep.min_lambda = nq > 0 ? r.lambda.minCoeff() : 0.0;
  rep.decay_rate = max_eig_P > 0.0 ? r.epsilon / (2.0 * max_eig_P) : 0.0;
  rep.lipschitz_y = spectral_norm(r.B2) + spectral_norm(r.B1) * spectral_norm(r.D12);

  const bool finite = M.allFinite() && r.P.allFinite() && std::isfinite(rep.lipschitz_y);
  const bool p_ok = rep.min_eig_P >= r.epsilon * (1.0 - 1e-9);
  const bool lambda_ok = nq == 0 || rep.min_lambda > 0.0;
  rep.passed = finite && rep.max_eig_M <= tol && p_ok && lambda_ok;
  return rep;
}

namespace {
// Symmetric PSD square root with negative round-off clamped to zero.
MatrixXd psd_sqrt(const MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (m + m.transpose()));
  const VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace

LatentFreeParams free_params_from_linear(const MatrixXd& F, const MatrixXd& G, double epsilon) {
  const Eigen::Index nz = F.rows();
  if (F.cols() != nz || G.rows() != nz || G.cols() < 1) throw DimensionError("free_params_from_linear: bad shapes");
  if (!(epsilon > 0.0)) throw DimensionError("free_params_from_linear: epsilon must be > 0");

  // F^T P + P F = -2 eps I, vectorized (column-major): (I (x) F^T + F^T (x) I) vec(P)
  const MatrixXd I = MatrixXd::Identity(nz, nz);
  MatrixXd K = MatrixXd::Zero(nz * nz, nz * nz);
  for (Eigen::Index i = 0; i < nz; ++i)
    for (Eigen::Index j = 0; j < nz; ++j) {
      K.block(i * nz, j * nz, nz, nz) += I(i, j) * F.transpose();
      K.block(i * nz, j * nz, nz, nz) += F(j, i) * I;
    }
  const MatrixXd rhs = -2.0 * epsilon * I;
  const VectorXd vecP = K.fullPivLu().solve(Eigen::Map<const VectorXd>(rhs.data(), nz * nz));
  MatrixXd P = Eigen::Map<const MatrixXd>(vecP.data(), nz, nz);
  P = 0.5 * (P + P.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(P, Eigen::EigenvaluesOnly);
  const double pmin = es.eigenvalues().minCoeff();
  if (!(pmin > 0.0) || !P.allFinite()) throw NumericError("free_params_from_linear: F is not Hurwitz");
  P *= std::max(1.0, epsilon / pmin);

  LatentFreeParams p = LatentFreeParams::zeros({static_cast<int>(nz), 0, static_cast<int>(G.cols())}, epsilon);
  p.Z = psd_sqrt(P - epsilon * I);
  const MatrixXd S = P * F;
  p.X = psd_sqrt(-(S + S.transpose()) - epsilon * I);
  p.Y = 0.25 * (S - S.transpose());
  p.B2 = G;
  return p;
}

}  // namespace kkl
