#pragma once

// Reverse-mode automatic differentiation on a per-thread tape.
//
// A Var is a value plus a tape index; index < 0 marks a constant, and
// operations between constants never touch the tape. Scalar operations record
// at most two parents. Larger operations (a network pass together with its
// input-derivatives) are recorded as blocks: a contiguous run of output slots
// plus a callback that maps output adjoints back onto input adjoints.

#include <cmath>
#include <cstdint>
#include <limits>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace kkl::ad {

struct Var {
  double val = 0.0;
  std::int32_t id = -1;

  Var() = default;
  Var(double v) : val(v) {}  // NOLINT: constants convert implicitly
  Var(double v, std::int32_t index) : val(v), id(index) {}

  bool is_constant() const { return id < 0; }
};

class Tape {
 public:
  using BlockBackward = std::function<void(std::span<double> adjoints)>;

  Var leaf(double value);
  /// Creates `values.size()` leaves with consecutive indices; returns the first index.
  std::int32_t leaves(std::span<const double> values);

  Var unary(double value, const Var& a, double da);
  Var binary(double value, const Var& a, double da, const Var& b, double db);

  /// Reserves `count` output slots for a block op; returns the first index.
  std::int32_t reserve_outputs(std::int32_t count);
  void add_block(std::int32_t first_output, BlockBackward backward);

  /// Runs the reverse sweep seeded with d(out)/d(out) = 1. The adjoint buffer
  /// stays valid until the next call or clear().
  void backward(const Var& out);
  double adjoint(std::int32_t index) const { return adjoints_.at(static_cast<std::size_t>(index)); }
  double adjoint(const Var& v) const { return v.is_constant() ? 0.0 : adjoint(v.id); }
  std::span<const double> adjoints() const { return adjoints_; }

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    std::int32_t a;
    std::int32_t b;
    double da;
    double db;
  };
  struct Block {
    std::int32_t first;
    BlockBackward backward;
  };

  std::int32_t push(Node n);

  std::vector<Node> nodes_;
  std::vector<Block> blocks_;
  std::vector<double> adjoints_;
};

/// The tape operations record onto on the calling thread.
Tape* active_tape();

/// Activates a tape for the lifetime of the scope, restoring the previous one on exit.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

namespace detail {
Var record_unary(double value, const Var& a, double da);
Var record_binary(double value, const Var& a, double da, const Var& b, double db);
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  if (a.is_constant() && b.is_constant()) return Var(a.val + b.val);
  return detail::record_binary(a.val + b.val, a, 1.0, b, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
  if (a.is_constant() && b.is_constant()) return Var(a.val - b.val);
  return detail::record_binary(a.val - b.val, a, 1.0, b, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
  if (a.is_constant() && b.is_constant()) return Var(a.val * b.val);
  // x * 0 carries no sensitivity to x
  if ((a.is_constant() && a.val == 0.0) || (b.is_constant() && b.val == 0.0)) return Var(0.0);
  return detail::record_binary(a.val * b.val, a, b.val, b, a.val);
}
inline Var operator/(const Var& a, const Var& b) {
  const double q = a.val / b.val;
  if (a.is_constant() && b.is_constant()) return Var(q);
  return detail::record_binary(q, a, 1.0 / b.val, b, -q / b.val);
}
inline Var operator-(const Var& a) {
  if (a.is_constant()) return Var(-a.val);
  return detail::record_unary(-a.val, a, -1.0);
}
inline Var operator+(const Var& a) { return a; }

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }
inline Var& operator/=(Var& a, const Var& b) { return a = a / b; }

// Comparisons act on values only.
inline bool operator<(const Var& a, const Var& b) { return a.val < b.val; }
inline bool operator>(const Var& a, const Var& b) { return a.val > b.val; }
inline bool operator<=(const Var& a, const Var& b) { return a.val <= b.val; }
inline bool operator>=(const Var& a, const Var& b) { return a.val >= b.val; }
inline bool operator==(const Var& a, const Var& b) { return a.val == b.val; }
inline bool operator!=(const Var& a, const Var& b) { return a.val != b.val; }

inline Var tanh(const Var& a) {
  const double t = std::tanh(a.val);
  if (a.is_constant()) return Var(t);
  return detail::record_unary(t, a, 1.0 - t * t);
}
inline double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }
inline Var softplus(const Var& a) {
  const double s = softplus(a.val);
  if (a.is_constant()) return Var(s);
  return detail::record_unary(s, a, sigmoid(a.val));
}
inline Var sigmoid(const Var& a) {
  const double s = sigmoid(a.val);
  if (a.is_constant()) return Var(s);
  return detail::record_unary(s, a, s * (1.0 - s));
}
inline Var exp(const Var& a) {
  const double e = std::exp(a.val);
  if (a.is_constant()) return Var(e);
  return detail::record_unary(e, a, e);
}
inline Var log(const Var& a) {
  if (a.is_constant()) return Var(std::log(a.val));
  return detail::record_unary(std::log(a.val), a, 1.0 / a.val);
}
inline Var sqrt(const Var& a) {
  const double s = std::sqrt(a.val);
  if (a.is_constant()) return Var(s);
  return detail::record_unary(s, a, 0.5 / s);
}
inline Var abs(const Var& a) {
  if (a.is_constant()) return Var(std::abs(a.val));
  return detail::record_unary(std::abs(a.val), a, a.val >= 0.0 ? 1.0 : -1.0);
}
inline Var abs2(const Var& a) { return a * a; }
inline Var conj(const Var& a) { return a; }
inline Var real(const Var& a) { return a; }
inline Var imag(const Var&) { return Var(0.0); }

inline bool isfinite(const Var& a) { return std::isfinite(a.val); }

inline double value(double x) { return x; }
inline double value(const Var& x) { return x.val; }

using VecX = Eigen::Matrix<Var, Eigen::Dynamic, 1>;
using MatX = Eigen::Matrix<Var, Eigen::Dynamic, Eigen::Dynamic>;

/// Wraps `values` as leaves on the active tape.
VecX make_leaves(Tape& tape, std::span<const double> values);
/// Reads values back out.
Eigen::VectorXd values(const VecX& v);
Eigen::MatrixXd values(const MatX& m);

}  // namespace kkl::ad

namespace Eigen {

template <>
struct NumTraits<kkl::ad::Var> : GenericNumTraits<kkl::ad::Var> {
  using Real = kkl::ad::Var;
  using NonInteger = kkl::ad::Var;
  using Nested = kkl::ad::Var;
  using Literal = kkl::ad::Var;

  enum {
    IsComplex = 0,
    IsInteger = 0,
    IsSigned = 1,
    RequireInitialization = 1,
    ReadCost = 1,
    AddCost = 3,
    MulCost = 3
  };

  static inline Real epsilon() { return Real(std::numeric_limits<double>::epsilon()); }
  static inline Real dummy_precision() { return Real(1e-12); }
  static inline Real highest() { return Real(std::numeric_limits<double>::max()); }
  static inline Real lowest() { return Real(std::numeric_limits<double>::lowest()); }
  static inline int digits10() { return std::numeric_limits<double>::digits10; }
};

}  // namespace Eigen
