#pragma once

// Plant models: vector field f, output map h, their analytic Jacobians, and
// the box-shaped domain the observer is trained on.

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "kkl/ad.hpp"
#include "kkl/types.hpp"

namespace kkl {

/// Axis-aligned box; lower < upper on every axis.
struct Box {
  VectorXd lower;
  VectorXd upper;

  Box() = default;
  Box(VectorXd lo, VectorXd hi);

  int dim() const { return static_cast<int>(lower.size()); }
  bool contains(const VectorXd& x) const;
  VectorXd center() const { return 0.5 * (lower + upper); }
};

class DynamicalSystem {
 public:
  virtual ~DynamicalSystem() = default;

  virtual std::string name() const = 0;
  virtual int nx() const = 0;
  virtual int ny() const = 0;
  virtual const Box& domain() const = 0;

  virtual VectorXd f(const VectorXd& x) const = 0;
  virtual ad::VecX f(const ad::VecX& x) const = 0;
  virtual VectorXd h(const VectorXd& x) const = 0;
  virtual ad::VecX h(const ad::VecX& x) const = 0;
  /// A(x) = df/dx
  virtual MatrixXd A(const VectorXd& x) const = 0;
  virtual ad::MatX A(const ad::VecX& x) const = 0;
  /// C(x) = dh/dx
  virtual MatrixXd C(const VectorXd& x) const = 0;
  virtual ad::MatX C(const ad::VecX& x) const = 0;
};

using SystemPtr = std::shared_ptr<const DynamicalSystem>;

/// Constant-coefficient plant x' = A x, y = C x.
struct LinearSystem {
  MatrixXd A_mat;
  MatrixXd C_mat;

  int nx() const { return static_cast<int>(A_mat.rows()); }
  int ny() const { return static_cast<int>(C_mat.rows()); }
  /// Throws DimensionError unless A is square and C has matching columns.
  void validate() const;
};

/// Van der Pol oscillator on [-2.5, 2.5] x [-3.5, 3.5], measuring x1.
SystemPtr make_vdp();
/// Reverse Duffing oscillator x1' = x2^3, x2' = -x1 on [-4, 4]^2, measuring x1.
SystemPtr make_duffing();
SystemPtr make_linear(const LinearSystem& lin, const Box& domain);

/// Catalog lookup for the keyed benchmarks ("vdp", "duffing"). The "linear"
/// key needs matrices and goes through make_linear instead.
SystemPtr make_system(std::string_view key);
std::vector<std::string> system_keys();

/// `n` i.i.d. uniform draws from the system domain, reproducible from `seed`.
std::vector<VectorXd> sample_domain(const DynamicalSystem& system, int n, std::uint64_t seed);

}  // namespace kkl
