#pragma once

// Feed-forward maps with smooth activations, their exact input-derivatives up
// to second order, and parameter gradients of losses built from them.
//
// Parameter layout: for each layer, the weight matrix (out x in, column-major)
// followed by the bias (out). Hidden layers apply the activation; the final
// layer is affine.

#include <cstdint>
#include <functional>
#include <type_traits>
#include <span>
#include <vector>

#include "kkl/ad.hpp"
#include "kkl/types.hpp"

namespace kkl {

enum class Activation { Tanh };

struct MapSpec {
  std::vector<int> widths;  // input, hidden..., output
  Activation activation = Activation::Tanh;

  MapSpec() = default;
  explicit MapSpec(std::vector<int> w, Activation act = Activation::Tanh);

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int layer_count() const { return static_cast<int>(widths.size()) - 1; }
  int param_count() const;
  /// Throws DimensionError if there is no layer or a width is < 1.
  void validate() const;
};

using ParamVector = VectorXd;

/// Zero biases, weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
ParamVector init_params(const MapSpec& spec, std::uint64_t seed);

VectorXd map_eval(const MapSpec& spec, std::span<const double> params, const VectorXd& x);

template <class S>
struct Derivatives {
  VecT<S> value;
  MatT<S> jacobian;               // output x input
  std::vector<MatT<S>> hessians;  // one input x input matrix per output
};
using DerivativeBundle = Derivatives<double>;

/// `order` selects what is filled: 0 value, 1 adds the Jacobian, 2 adds Hessians.
DerivativeBundle derivatives(const MapSpec& spec, std::span<const double> params, const VectorXd& x, int order = 2);

/// Parameters as seen by a recorded evaluation. When `first_leaf` >= 0 the
/// parameters are the consecutive tape leaves starting there and receive
/// adjoints; otherwise they are constants. `values` must outlive the tape's
/// backward sweep.
struct ParamSource {
  std::span<const double> values;
  std::int32_t first_leaf = -1;
};

/// Declares `params` as leaves of `tape`.
ParamSource make_param_leaves(ad::Tape& tape, std::span<const double> params);

/// Records the evaluation and its input-derivatives on the active tape as one
/// block whose reverse pass is exact through the Jacobian and Hessian outputs.
Derivatives<ad::Var> derivatives(const MapSpec& spec, const ParamSource& params, const ad::VecX& x, int order);

template <class S>
Derivatives<S> derivatives_of(const MapSpec& spec, const ParamSource& params, const VecT<S>& x, int order) {
  if constexpr (std::is_same_v<S, double>) {
    return derivatives(spec, params.values, x, order);
  } else {
    return derivatives(spec, params, x, order);
  }
}

/// Gradient of a scalar loss written against tape variables. Throws
/// NumericError if the loss value is not finite.
VectorXd param_gradient(const std::function<ad::Var(const ad::VecX&)>& loss, std::span<const double> params);

}  // namespace kkl
