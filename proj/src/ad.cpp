#include "kkl/ad.hpp"

#include <stdexcept>

namespace kkl::ad {

namespace {
thread_local Tape* g_active = nullptr;
}

Tape* active_tape() { return g_active; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

std::int32_t Tape::push(Node n) {
  if (nodes_.size() >= static_cast<std::size_t>(INT32_MAX)) throw std::length_error("ad::Tape: tape overflow");
  nodes_.push_back(n);
  return static_cast<std::int32_t>(nodes_.size() - 1);
}

Var Tape::leaf(double value) { return Var(value, push({-1, -1, 0.0, 0.0})); }

std::int32_t Tape::leaves(std::span<const double> values) {
  const auto first = static_cast<std::int32_t>(nodes_.size());
  nodes_.reserve(nodes_.size() + values.size());
  for (std::size_t i = 0; i < values.size(); ++i) push({-1, -1, 0.0, 0.0});
  return first;
}

Var Tape::unary(double value, const Var& a, double da) { return Var(value, push({a.id, -1, da, 0.0})); }

Var Tape::binary(double value, const Var& a, double da, const Var& b, double db) {
  if (a.is_constant()) return Var(value, push({b.id, -1, db, 0.0}));
  if (b.is_constant()) return Var(value, push({a.id, -1, da, 0.0}));
  return Var(value, push({a.id, b.id, da, db}));
}

std::int32_t Tape::reserve_outputs(std::int32_t count) {
  const auto first = static_cast<std::int32_t>(nodes_.size());
  nodes_.reserve(nodes_.size() + static_cast<std::size_t>(count));
  for (std::int32_t i = 0; i < count; ++i) push({-1, -1, 0.0, 0.0});
  return first;
}

void Tape::add_block(std::int32_t first_output, BlockBackward backward) {
  if (!blocks_.empty() && blocks_.back().first >= first_output)
    throw std::logic_error("ad::Tape: blocks must be registered in creation order");
  blocks_.push_back({first_output, std::move(backward)});
}

void Tape::backward(const Var& out) {
  adjoints_.assign(nodes_.size(), 0.0);
  if (out.is_constant()) return;
  adjoints_[static_cast<std::size_t>(out.id)] = 1.0;

  auto block = blocks_.rbegin();
  for (std::int32_t i = out.id; i >= 0; --i) {
    const double g = adjoints_[static_cast<std::size_t>(i)];
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (g != 0.0) {
      if (n.a >= 0) adjoints_[static_cast<std::size_t>(n.a)] += g * n.da;
      if (n.b >= 0) adjoints_[static_cast<std::size_t>(n.b)] += g * n.db;
    }
    // A block fires once the sweep reaches its lowest output: every consumer
    // of its outputs has a higher index and has already been processed.
    while (block != blocks_.rend() && block->first > i) ++block;
    if (block != blocks_.rend() && block->first == i) {
      block->backward(adjoints_);
      ++block;
    }
  }
}

void Tape::clear() {
  nodes_.clear();
  blocks_.clear();
  adjoints_.clear();
}

namespace detail {

Var record_unary(double value, const Var& a, double da) {
  Tape* t = g_active;
  if (t == nullptr) throw std::logic_error("ad: operation on a tape variable without an active tape");
  return t->unary(value, a, da);
}

Var record_binary(double value, const Var& a, double da, const Var& b, double db) {
  Tape* t = g_active;
  if (t == nullptr) throw std::logic_error("ad: operation on a tape variable without an active tape");
  return t->binary(value, a, da, b, db);
}

}  // namespace detail

VecX make_leaves(Tape& tape, std::span<const double> values) {
  const std::int32_t first = tape.leaves(values);
  VecX out(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i)
    out(static_cast<Eigen::Index>(i)) = Var(values[i], first + static_cast<std::int32_t>(i));
  return out;
}

Eigen::VectorXd values(const VecX& v) {
  Eigen::VectorXd out(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) out(i) = v(i).val;
  return out;
}

Eigen::MatrixXd values(const MatX& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (Eigen::Index j = 0; j < m.cols(); ++j)
    for (Eigen::Index i = 0; i < m.rows(); ++i) out(i, j) = m(i, j).val;
  return out;
}

}  // namespace kkl::ad
