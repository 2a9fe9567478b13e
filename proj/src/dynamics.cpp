#include "kkl/dynamics.hpp"

#include <cmath>
#include <random>

#include "kkl/errors.hpp"

namespace kkl {

Box::Box(VectorXd lo, VectorXd hi) : lower(std::move(lo)), upper(std::move(hi)) {
  if (lower.size() != upper.size() || lower.size() == 0) throw DimensionError("Box: bound sizes differ or are empty");
  for (Eigen::Index i = 0; i < lower.size(); ++i) {
    if (!std::isfinite(lower(i)) || !std::isfinite(upper(i)) || !(lower(i) < upper(i)))
      throw DimensionError("Box: bounds must be finite with lower < upper on every axis");
  }
}

bool Box::contains(const VectorXd& x) const {
  if (x.size() != lower.size()) return false;
  return ((x.array() >= lower.array()) && (x.array() <= upper.array())).all();
}

void LinearSystem::validate() const {
  if (A_mat.rows() != A_mat.cols() || A_mat.rows() == 0) throw DimensionError("LinearSystem: A must be square and non-empty");
  if (C_mat.cols() != A_mat.cols() || C_mat.rows() == 0) throw DimensionError("LinearSystem: C must have as many columns as A");
}

namespace {

void check_dim(Eigen::Index got, int want, const char* what) {
  if (got != want) throw DimensionError(std::string(what) + ": state dimension mismatch");
}

// Models supply templated f/h/A/C; ModelSystem instantiates them for double and ad::Var.
struct VanDerPol {
  static constexpr int kNx = 2;
  static constexpr int kNy = 1;

  template <class S>
  VecT<S> f(const VecT<S>& x) const {
    VecT<S> dx(2);
    dx(0) = x(1);
    dx(1) = (S(1.0) - x(0) * x(0)) * x(1) - x(0);
    return dx;
  }
  template <class S>
  VecT<S> h(const VecT<S>& x) const {
    VecT<S> y(1);
    y(0) = x(0);
    return y;
  }
  template <class S>
  MatT<S> A(const VecT<S>& x) const {
    MatT<S> a(2, 2);
    a(0, 0) = S(0.0);
    a(0, 1) = S(1.0);
    a(1, 0) = S(-2.0) * x(0) * x(1) - S(1.0);
    a(1, 1) = S(1.0) - x(0) * x(0);
    return a;
  }
  template <class S>
  MatT<S> C(const VecT<S>&) const {
    MatT<S> c(1, 2);
    c(0, 0) = S(1.0);
    c(0, 1) = S(0.0);
    return c;
  }
};

struct ReverseDuffing {
  static constexpr int kNx = 2;
  static constexpr int kNy = 1;

  template <class S>
  VecT<S> f(const VecT<S>& x) const {
    VecT<S> dx(2);
    dx(0) = x(1) * x(1) * x(1);
    dx(1) = -x(0);
    return dx;
  }
  template <class S>
  VecT<S> h(const VecT<S>& x) const {
    VecT<S> y(1);
    y(0) = x(0);
    return y;
  }
  template <class S>
  MatT<S> A(const VecT<S>& x) const {
    MatT<S> a(2, 2);
    a(0, 0) = S(0.0);
    a(0, 1) = S(3.0) * x(1) * x(1);
    a(1, 0) = S(-1.0);
    a(1, 1) = S(0.0);
    return a;
  }
  template <class S>
  MatT<S> C(const VecT<S>&) const {
    MatT<S> c(1, 2);
    c(0, 0) = S(1.0);
    c(0, 1) = S(0.0);
    return c;
  }
};

struct LinearModel {
  MatrixXd a;
  MatrixXd c;

  template <class S>
  VecT<S> f(const VecT<S>& x) const {
    return a.cast<S>() * x;
  }
  template <class S>
  VecT<S> h(const VecT<S>& x) const {
    return c.cast<S>() * x;
  }
  template <class S>
  MatT<S> A(const VecT<S>&) const {
    return a.cast<S>();
  }
  template <class S>
  MatT<S> C(const VecT<S>&) const {
    return c.cast<S>();
  }
};

template <class Model>
class ModelSystem final : public DynamicalSystem {
 public:
  ModelSystem(std::string name, int nx, int ny, Box domain, Model model)
      : name_(std::move(name)), nx_(nx), ny_(ny), domain_(std::move(domain)), model_(std::move(model)) {}

  std::string name() const override { return name_; }
  int nx() const override { return nx_; }
  int ny() const override { return ny_; }
  const Box& domain() const override { return domain_; }

  VectorXd f(const VectorXd& x) const override { return call_f(x); }
  ad::VecX f(const ad::VecX& x) const override { return call_f(x); }
  VectorXd h(const VectorXd& x) const override { return call_h(x); }
  ad::VecX h(const ad::VecX& x) const override { return call_h(x); }
  MatrixXd A(const VectorXd& x) const override { return call_A(x); }
  ad::MatX A(const ad::VecX& x) const override { return call_A(x); }
  MatrixXd C(const VectorXd& x) const override { return call_C(x); }
  ad::MatX C(const ad::VecX& x) const override { return call_C(x); }

 private:
  template <class S>
  VecT<S> call_f(const VecT<S>& x) const {
    check_dim(x.size(), nx_, "f");
    return model_.template f<S>(x);
  }
  template <class S>
  VecT<S> call_h(const VecT<S>& x) const {
    check_dim(x.size(), nx_, "h");
    return model_.template h<S>(x);
  }
  template <class S>
  MatT<S> call_A(const VecT<S>& x) const {
    check_dim(x.size(), nx_, "A");
    return model_.template A<S>(x);
  }
  template <class S>
  MatT<S> call_C(const VecT<S>& x) const {
    check_dim(x.size(), nx_, "C");
    return model_.template C<S>(x);
  }

  std::string name_;
  int nx_;
  int ny_;
  Box domain_;
  Model model_;
};

}  // namespace

SystemPtr make_vdp() {
  Box box((VectorXd(2) << -2.5, -3.5).finished(), (VectorXd(2) << 2.5, 3.5).finished());
  return std::make_shared<ModelSystem<VanDerPol>>("vdp", 2, 1, std::move(box), VanDerPol{});
}

SystemPtr make_duffing() {
  Box box((VectorXd(2) << -4.0, -4.0).finished(), (VectorXd(2) << 4.0, 4.0).finished());
  return std::make_shared<ModelSystem<ReverseDuffing>>("duffing", 2, 1, std::move(box), ReverseDuffing{});
}

SystemPtr make_linear(const LinearSystem& lin, const Box& domain) {
  lin.validate();
  if (domain.dim() != lin.nx()) throw DimensionError("make_linear: domain dimension differs from A");
  return std::make_shared<ModelSystem<LinearModel>>("linear", lin.nx(), lin.ny(), domain,
                                                    LinearModel{lin.A_mat, lin.C_mat});
}

SystemPtr make_system(std::string_view key) {
  if (key == "vdp") return make_vdp();
  if (key == "duffing") return make_duffing();
  if (key == "linear") throw ConfigError("system 'linear' requires matrices; use make_linear");
  throw ConfigError("unknown system key '" + std::string(key) + "'");
}

std::vector<std::string> system_keys() { return {"vdp", "duffing", "linear"}; }

std::vector<VectorXd> sample_domain(const DynamicalSystem& system, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_domain: n must be >= 1");
  const Box& box = system.domain();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<VectorXd> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    VectorXd x(box.dim());
    for (int i = 0; i < box.dim(); ++i) x(i) = box.lower(i) + (box.upper(i) - box.lower(i)) * unit(rng);
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace kkl
