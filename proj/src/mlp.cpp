#include "kkl/mlp.hpp"

#include <cmath>
#include <memory>
#include <random>
#include <string>

#include "kkl/errors.hpp"

namespace kkl {

MapSpec::MapSpec(std::vector<int> w, Activation act) : widths(std::move(w)), activation(act) { validate(); }

int MapSpec::param_count() const {
  int n = 0;
  for (int l = 0; l < layer_count(); ++l) n += (widths[l] + 1) * widths[l + 1];
  return n;
}

void MapSpec::validate() const {
  if (widths.size() < 2) throw DimensionError("MapSpec: need at least one layer");
  for (int w : widths)
    if (w < 1) throw DimensionError("MapSpec: widths must be >= 1");
}

ParamVector init_params(const MapSpec& spec, std::uint64_t seed) {
  spec.validate();
  ParamVector p = ParamVector::Zero(spec.param_count());
  std::mt19937_64 rng(seed);
  Eigen::Index off = 0;
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    const double s = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-s, s);
    for (int k = 0; k < in * out; ++k) p(off + k) = u(rng);
    off += static_cast<Eigen::Index>(in) * out + out;
  }
  return p;
}

namespace {

using ConstMatMap = Eigen::Map<const MatrixXd>;
using ConstVecMap = Eigen::Map<const VectorXd>;

// Per-layer state of the forward pass. Hessian stacks hold one flattened
// n x n matrix (column-major) per unit in each row.
struct LayerCache {
  VectorXd a_in;   // layer input
  MatrixXd Ja_in;  // d a_in / dx
  MatrixXd Ha_in;
  VectorXd s1, s2, s3;  // activation derivatives at the pre-activation (hidden layers)
  MatrixXd Jh;          // Jacobian of the pre-activation (needed by the reverse pass)
  MatrixXd Hh;
};

struct ForwardPass {
  int n = 0;
  int order = 0;
  std::vector<LayerCache> layers;
  VectorXd value;
  MatrixXd J;
  MatrixXd H;  // output x n*n
};

void check_params(const MapSpec& spec, std::size_t count) {
  if (count != static_cast<std::size_t>(spec.param_count()))
    throw DimensionError("map: parameter vector has length " + std::to_string(count) + ", expected " +
                         std::to_string(spec.param_count()));
}

ForwardPass forward(const MapSpec& spec, std::span<const double> params, const VectorXd& x, int order, bool keep) {
  spec.validate();
  check_params(spec, params.size());
  if (x.size() != spec.input_dim()) throw DimensionError("map: input has wrong dimension");
  const int n = spec.input_dim();

  ForwardPass fp;
  fp.n = n;
  fp.order = order;
  VectorXd a = x;
  MatrixXd Ja, Ha;
  if (order >= 1) Ja = MatrixXd::Identity(n, n);
  if (order >= 2) Ha = MatrixXd::Zero(n, n * n);

  const double* p = params.data();
  for (int l = 0; l < spec.layer_count(); ++l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    ConstMatMap W(p, out, in);
    ConstVecMap b(p + static_cast<std::ptrdiff_t>(in) * out, out);
    p += static_cast<std::ptrdiff_t>(in + 1) * out;

    VectorXd h = W * a + b;
    MatrixXd Jh, Hh;
    if (order >= 1) Jh = W * Ja;
    if (order >= 2) Hh = W * Ha;

    LayerCache cache;
    if (keep) {
      cache.a_in = std::move(a);
      cache.Ja_in = std::move(Ja);
      cache.Ha_in = std::move(Ha);
    }

    if (l + 1 == spec.layer_count()) {
      fp.value = std::move(h);
      fp.J = std::move(Jh);
      fp.H = std::move(Hh);
      if (keep) fp.layers.push_back(std::move(cache));
      break;
    }

    VectorXd t = h.array().tanh();
    VectorXd s1 = 1.0 - t.array().square();
    VectorXd s2 = -2.0 * t.array() * s1.array();
    a = t;
    if (order >= 1) Ja = s1.asDiagonal() * Jh;
    if (order >= 2) {
      Ha = s1.asDiagonal() * Hh;
      for (int i = 0; i < out; ++i) {
        const auto row = Jh.row(i);
        for (int c = 0; c < n; ++c)
          for (int r = 0; r < n; ++r) Ha(i, c * n + r) += s2(i) * row(r) * row(c);
      }
    }
    if (keep) {
      cache.s3 = -2.0 * s1.array().square() + 4.0 * t.array().square() * s1.array();
      cache.s1 = std::move(s1);
      cache.s2 = std::move(s2);
      cache.Jh = std::move(Jh);
      cache.Hh = std::move(Hh);
      fp.layers.push_back(std::move(cache));
    }
  }
  return fp;
}

// Reverse pass: given adjoints of (value, J, H) accumulates parameter
// adjoints into `gparams` (if non-null) and returns the input adjoint.
VectorXd reverse(const MapSpec& spec, std::span<const double> params, const ForwardPass& fp, VectorXd abar,
                 MatrixXd Jbar, MatrixXd Hbar, double* gparams) {
  const int n = fp.n;
  const int order = fp.order;
  // offsets of each layer's parameters
  std::vector<std::ptrdiff_t> offsets(static_cast<std::size_t>(spec.layer_count()));
  std::ptrdiff_t off = 0;
  for (int l = 0; l < spec.layer_count(); ++l) {
    offsets[static_cast<std::size_t>(l)] = off;
    off += static_cast<std::ptrdiff_t>(spec.widths[l] + 1) * spec.widths[l + 1];
  }

  // abar/Jbar/Hbar hold adjoints of the current layer's pre-activation (h, Jh, Hh).
  for (int l = spec.layer_count() - 1; l >= 0; --l) {
    const int in = spec.widths[l];
    const int out = spec.widths[l + 1];
    const LayerCache& c = fp.layers[static_cast<std::size_t>(l)];
    ConstMatMap W(params.data() + offsets[static_cast<std::size_t>(l)], out, in);

    if (gparams != nullptr) {
      Eigen::Map<MatrixXd> gW(gparams + offsets[static_cast<std::size_t>(l)], out, in);
      Eigen::Map<VectorXd> gb(gparams + offsets[static_cast<std::size_t>(l)] + static_cast<std::ptrdiff_t>(in) * out, out);
      gW.noalias() += abar * c.a_in.transpose();
      if (order >= 1) gW.noalias() += Jbar * c.Ja_in.transpose();
      if (order >= 2) gW.noalias() += Hbar * c.Ha_in.transpose();
      gb += abar;
    }

    VectorXd a_prev_bar = W.transpose() * abar;
    if (l == 0) return a_prev_bar;

    MatrixXd Ja_prev_bar, Ha_prev_bar;
    if (order >= 1) Ja_prev_bar = W.transpose() * Jbar;
    if (order >= 2) Ha_prev_bar = W.transpose() * Hbar;

    // through the activation of layer l-1
    const LayerCache& p = fp.layers[static_cast<std::size_t>(l - 1)];
    const int units = in;
    VectorXd hbar = p.s1.cwiseProduct(a_prev_bar);
    MatrixXd Jh_bar, Hh_bar;
    if (order >= 1) {
      Jh_bar = p.s1.asDiagonal() * Ja_prev_bar;
      for (int i = 0; i < units; ++i) hbar(i) += p.s2(i) * Ja_prev_bar.row(i).dot(p.Jh.row(i));
    }
    if (order >= 2) {
      Hh_bar = p.s1.asDiagonal() * Ha_prev_bar;
      for (int i = 0; i < units; ++i) {
        const auto Jrow = p.Jh.row(i);
        const VectorXd flat = Ha_prev_bar.row(i).transpose();
        const MatrixXd Mi = Eigen::Map<const MatrixXd>(flat.data(), n, n);
        hbar(i) += p.s2(i) * Ha_prev_bar.row(i).dot(p.Hh.row(i));
        hbar(i) += p.s3(i) * (Jrow * Mi * Jrow.transpose())(0, 0);
        Jh_bar.row(i) += p.s2(i) * (Jrow * (Mi + Mi.transpose()));
      }
    }
    abar = std::move(hbar);
    Jbar = std::move(Jh_bar);
    Hbar = std::move(Hh_bar);
  }
  return VectorXd();
}

DerivativeBundle unpack(const ForwardPass& fp, int out) {
  DerivativeBundle d;
  d.value = fp.value;
  if (fp.order >= 1) d.jacobian = fp.J;
  if (fp.order >= 2) {
    const int n = fp.n;
    d.hessians.reserve(static_cast<std::size_t>(out));
    for (int i = 0; i < out; ++i) {
      MatrixXd Hi(n, n);
      for (int c = 0; c < n; ++c)
        for (int r = 0; r < n; ++r) Hi(r, c) = fp.H(i, c * n + r);
      // the stack is symmetric up to round-off; remove that round-off
      d.hessians.push_back(0.5 * (Hi + Hi.transpose()));
    }
  }
  return d;
}

}  // namespace

VectorXd map_eval(const MapSpec& spec, std::span<const double> params, const VectorXd& x) {
  return forward(spec, params, x, 0, false).value;
}

DerivativeBundle derivatives(const MapSpec& spec, std::span<const double> params, const VectorXd& x, int order) {
  if (order < 0 || order > 2) throw std::invalid_argument("derivatives: order must be 0, 1 or 2");
  return unpack(forward(spec, params, x, order, false), spec.output_dim());
}

ParamSource make_param_leaves(ad::Tape& tape, std::span<const double> params) {
  return ParamSource{params, tape.leaves(params)};
}

Derivatives<ad::Var> derivatives(const MapSpec& spec, const ParamSource& params, const ad::VecX& x, int order) {
  if (order < 0 || order > 2) throw std::invalid_argument("derivatives: order must be 0, 1 or 2");
  ad::Tape* tape = ad::active_tape();
  if (tape == nullptr) throw std::logic_error("derivatives: no active tape");

  const VectorXd xv = ad::values(x);
  auto fp = std::make_shared<ForwardPass>(forward(spec, params.values, xv, order, true));
  const int n = spec.input_dim();
  const int m = spec.output_dim();
  const int n_val = m;
  const int n_jac = order >= 1 ? m * n : 0;
  const int n_hes = order >= 2 ? m * n * n : 0;

  bool any_input = params.first_leaf >= 0;
  std::vector<std::int32_t> x_ids(static_cast<std::size_t>(n));
  for (int j = 0; j < n; ++j) {
    x_ids[static_cast<std::size_t>(j)] = x(j).id;
    any_input = any_input || !x(j).is_constant();
  }

  Derivatives<ad::Var> out;
  out.value.resize(m);
  if (!any_input) {
    // nothing to differentiate: plain constants
    const DerivativeBundle d = unpack(*fp, m);
    for (int i = 0; i < m; ++i) out.value(i) = d.value(i);
    if (order >= 1) out.jacobian = d.jacobian.cast<ad::Var>();
    if (order >= 2)
      for (const auto& Hi : d.hessians) out.hessians.push_back(Hi.cast<ad::Var>());
    return out;
  }

  const std::int32_t first = tape->reserve_outputs(n_val + n_jac + n_hes);
  for (int i = 0; i < m; ++i) out.value(i) = ad::Var(fp->value(i), first + i);
  if (order >= 1) {
    out.jacobian.resize(m, n);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i) out.jacobian(i, j) = ad::Var(fp->J(i, j), first + n_val + j * m + i);
  }
  if (order >= 2) {
    // Each (r, c) entry is its own output; symmetry is not assumed in reverse.
    const std::int32_t hbase = first + n_val + n_jac;
    for (int i = 0; i < m; ++i) {
      ad::MatX Hi(n, n);
      for (int c = 0; c < n; ++c)
        for (int r = 0; r < n; ++r) Hi(r, c) = ad::Var(fp->H(i, c * n + r), hbase + (c * n + r) * m + i);
      out.hessians.push_back(std::move(Hi));
    }
  }

  MapSpec spec_copy = spec;
  std::span<const double> pvals = params.values;
  const std::int32_t first_leaf = params.first_leaf;
  tape->add_block(first, [fp, spec_copy, pvals, first_leaf, x_ids, first, n_val, n_jac, n_hes, m, n,
                          order](std::span<double> adj) {
    VectorXd ybar(m);
    bool nonzero = false;
    for (int i = 0; i < m; ++i) ybar(i) = adj[static_cast<std::size_t>(first + i)];
    nonzero = nonzero || !ybar.isZero(0.0);
    MatrixXd Jbar, Hbar;
    if (order >= 1) {
      Jbar.resize(m, n);
      for (int j = 0; j < n; ++j)
        for (int i = 0; i < m; ++i) Jbar(i, j) = adj[static_cast<std::size_t>(first + n_val + j * m + i)];
      nonzero = nonzero || !Jbar.isZero(0.0);
    }
    if (order >= 2) {
      Hbar.resize(m, n * n);
      for (int k = 0; k < n * n; ++k)
        for (int i = 0; i < m; ++i) Hbar(i, k) = adj[static_cast<std::size_t>(first + n_val + n_jac + k * m + i)];
      nonzero = nonzero || !Hbar.isZero(0.0);
    }
    (void)n_hes;
    if (!nonzero) return;

    std::vector<double> gp;
    double* gptr = nullptr;
    if (first_leaf >= 0) {
      gp.assign(pvals.size(), 0.0);
      gptr = gp.data();
    }
    const VectorXd xbar = reverse(spec_copy, pvals, *fp, std::move(ybar), std::move(Jbar), std::move(Hbar), gptr);
    if (first_leaf >= 0)
      for (std::size_t k = 0; k < gp.size(); ++k) adj[static_cast<std::size_t>(first_leaf) + k] += gp[k];
    for (int j = 0; j < n; ++j) {
      const std::int32_t id = x_ids[static_cast<std::size_t>(j)];
      if (id >= 0) adj[static_cast<std::size_t>(id)] += xbar(j);
    }
  });
  return out;
}

VectorXd param_gradient(const std::function<ad::Var(const ad::VecX&)>& loss, std::span<const double> params) {
  ad::Tape tape;
  ad::TapeScope scope(tape);
  const ad::VecX p = ad::make_leaves(tape, params);
  const ad::Var l = loss(p);
  if (!std::isfinite(l.val)) throw NumericError("param_gradient: loss is not finite");
  tape.backward(l);
  VectorXd g(static_cast<Eigen::Index>(params.size()));
  for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = tape.adjoint(p(i));
  return g;
}

}  // namespace kkl
