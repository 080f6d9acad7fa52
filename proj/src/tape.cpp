#include "afem/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "afem/errors.hpp"

namespace afem::ad {

// ---------------------------------------------------------------------------
// Variable

const Tensor& Variable::value() const { return tape_->node(id_).value; }

const Tensor* Variable::cotangent() const {
  const auto& c = tape_->node(id_).cotangent;
  return c ? &*c : nullptr;
}

bool Variable::requires_grad() const { return tape_->node(id_).requires_grad; }

void Variable::backward(const Tensor& seed) const {
  std::vector<Variable> leaves;
  for (std::size_t i = 0; i <= id_; ++i) {
    const Node& n = tape_->node(i);
    if (!n.op && n.requires_grad) leaves.emplace_back(tape_, i);
  }
  ReducedFunctional rf(*this, std::move(leaves));
  ad::backward(rf, seed);
}

// ---------------------------------------------------------------------------
// Tape

Variable Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Variable Tape::apply(std::unique_ptr<Operator> op, std::span<const Variable> inputs) {
  Node n;
  std::vector<const Tensor*> values;
  for (const Variable& v : inputs) {
    if (&v.tape() != this) throw DomainError(fmt::format("{}: input from another tape", op->name()));
    n.parents.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_.at(v.id()).requires_grad;
    values.push_back(&nodes_[v.id()].value);
  }
  n.value = op->forward(values);
  n.op = std::move(op);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Variable Tape::variable(std::size_t id) {
  if (id >= nodes_.size()) throw DomainError(fmt::format("node {} is not on the tape", id));
  return {this, id};
}

void Tape::set_leaf_value(Variable leaf, Tensor value) {
  Node& n = nodes_.at(leaf.id());
  if (n.op) throw DomainError("only leaf values can be overwritten");
  if (value.shape() != n.value.shape()) {
    throw CastError(fmt::format("leaf {} has shape {}, got {}", leaf.id(), shape_string(n.value.shape()),
                                shape_string(value.shape())));
  }
  n.value = std::move(value);
}

void Tape::replay(std::span<const Variable> sources) {
  std::vector<std::size_t> ids;
  for (const Variable& v : sources) ids.push_back(v.id());
  const std::vector<char> dirty = descendants(ids);
  std::vector<const Tensor*> values;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (!dirty[i] || !n.op) continue;
    values.clear();
    for (std::size_t p : n.parents) values.push_back(&nodes_[p].value);
    n.value = n.op->forward(values);
  }
}

void Tape::zero_cotangents() {
  for (Node& n : nodes_) n.cotangent.reset();
}

std::vector<std::size_t> Tape::topological_order() const {
  const std::size_t n = nodes_.size();
  std::vector<std::size_t> indegree(n, 0);
  std::vector<std::vector<std::size_t>> children(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p : nodes_[i].parents) {
      children.at(p).push_back(i);
      ++indegree[i];
    }
  }
  std::vector<std::size_t> order;
  order.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) order.push_back(i);
  }
  for (std::size_t k = 0; k < order.size(); ++k) {
    for (std::size_t c : children[order[k]]) {
      if (--indegree[c] == 0) order.push_back(c);
    }
  }
  if (order.size() != n) throw DomainError("tape graph contains a cycle");
  return order;
}

std::vector<char> Tape::ancestors(std::size_t output) const {
  std::vector<char> mark(nodes_.size(), 0);
  mark.at(output) = 1;
  for (std::size_t i = output + 1; i-- > 0;) {
    if (!mark[i]) continue;
    for (std::size_t p : nodes_[i].parents) mark[p] = 1;
  }
  return mark;
}

std::vector<char> Tape::descendants(std::span<const std::size_t> sources) const {
  std::vector<char> mark(nodes_.size(), 0);
  for (std::size_t s : sources) mark.at(s) = 1;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    for (std::size_t p : nodes_[i].parents) {
      if (mark[p]) {
        mark[i] = 1;
        break;
      }
    }
  }
  return mark;
}

std::vector<std::optional<Tensor>> Tape::sweep(std::size_t output, const Tensor& seed,
                                               const std::vector<char>& active) {
  const Node& out = nodes_.at(output);
  if (seed.shape() != out.value.shape()) {
    throw CastError(fmt::format("seed shape {} does not match output shape {}", shape_string(seed.shape()),
                                shape_string(out.value.shape())));
  }
  std::vector<std::optional<Tensor>> cot(nodes_.size());
  if (!active[output]) return cot;
  cot[output] = seed;

  std::vector<const Tensor*> values;
  std::vector<Tensor*> grads;
  for (std::size_t i = output + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!active[i] || !cot[i] || !n.op) continue;
    values.clear();
    grads.clear();
    for (std::size_t p : n.parents) {
      values.push_back(&nodes_[p].value);
      if (active[p]) {
        if (!cot[p]) cot[p] = Tensor(nodes_[p].value.shape());
        grads.push_back(&*cot[p]);
      } else {
        grads.push_back(nullptr);
      }
    }
    n.op->backward(values, n.value, *cot[i], grads);
  }
  return cot;
}

void Tape::accumulate(std::vector<std::optional<Tensor>>& contributions) {
  for (std::size_t i = 0; i < contributions.size(); ++i) {
    if (!contributions[i]) continue;
    auto& stored = nodes_[i].cotangent;
    if (!stored) {
      stored = std::move(*contributions[i]);
    } else {
      axpy(1.0, contributions[i]->data(), stored->data());
    }
  }
}

// ---------------------------------------------------------------------------
// ReducedFunctional

ReducedFunctional::ReducedFunctional(Variable output, std::vector<Variable> controls)
    : output_(output), controls_(std::move(controls)) {
  if (!output_.valid()) throw DomainError("reduced functional needs an output on a tape");
  Tape& tape = output_.tape();
  for (const Variable& c : controls_) {
    if (!c.valid() || &c.tape() != &tape || c.id() >= tape.size()) {
      throw DomainError("control is not on the output's tape");
    }
  }
}

std::vector<char> ReducedFunctional::active_mask() const {
  Tape& tape = output_.tape();
  std::vector<std::size_t> ids;
  for (const Variable& c : controls_) ids.push_back(c.id());
  std::vector<char> mask = tape.ancestors(output_.id());
  const std::vector<char> down = tape.descendants(ids);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && down[i];
  return mask;
}

Tensor ReducedFunctional::evaluate(std::span<const Tensor> values) {
  if (values.size() != controls_.size()) {
    throw DomainError(fmt::format("{} control values for {} controls", values.size(), controls_.size()));
  }
  Tape& tape = output_.tape();
  for (std::size_t k = 0; k < controls_.size(); ++k) tape.set_leaf_value(controls_[k], values[k]);
  tape.replay(controls_);
  return output_.value();
}

std::vector<Tensor> ReducedFunctional::gradient(const Tensor& seed) {
  auto cot = output_.tape().sweep(output_.id(), seed, active_mask());
  std::vector<Tensor> out;
  for (const Variable& c : controls_) {
    out.push_back(cot[c.id()] ? *cot[c.id()] : Tensor(c.value().shape()));
  }
  return out;
}

ReducedFunctional reduced_functional(Variable output, std::vector<Variable> controls) {
  return ReducedFunctional(output, std::move(controls));
}

std::vector<Tensor> backward(ReducedFunctional& rf, const Tensor& seed) {
  Tape& tape = rf.output_.tape();
  auto cot = tape.sweep(rf.output_.id(), seed, rf.active_mask());
  for (const Variable& c : rf.controls_) {
    if (!cot[c.id()]) cot[c.id()] = Tensor(c.value().shape());
  }
  tape.accumulate(cot);
  std::vector<Tensor> out;
  for (const Variable& c : rf.controls_) out.push_back(*c.cotangent());
  return out;
}

// ---------------------------------------------------------------------------
// Taylor test

double TaylorResult::min_order() const {
  if (exact) return std::numeric_limits<double>::infinity();
  double m = std::numeric_limits<double>::infinity();
  for (double o : orders) m = std::isnan(o) ? o : std::min(m, o);
  return orders.empty() ? std::numeric_limits<double>::quiet_NaN() : m;
}

bool TaylorResult::passed(double lo, double hi) const {
  if (exact) return true;
  if (orders.empty()) return false;
  return std::all_of(orders.begin(), orders.end(), [&](double o) { return o >= lo && o <= hi; });
}

TaylorResult taylor_test(ReducedFunctional& rf, std::span<const Tensor> point,
                         std::span<const Tensor> direction, std::span<const double> steps,
                         const TaylorOptions& options) {
  if (direction.size() != point.size()) throw DomainError("direction and point differ in length");
  for (std::size_t i = 1; i < steps.size(); ++i) {
    if (!(steps[i] < steps[i - 1])) throw DomainError("Taylor steps must be strictly decreasing");
  }

  TaylorResult result;
  result.steps.assign(steps.begin(), steps.end());
  const Tensor j0 = rf.evaluate(point);
  if (j0.rank() != 0) throw DomainError("Taylor test needs a scalar functional");
  result.value = j0.item();

  const std::vector<Tensor> grad = rf.gradient(Tensor::scalar(1.0));
  double djd = 0.0;
  for (std::size_t k = 0; k < grad.size(); ++k) djd += dot(grad[k].data(), direction[k].data());
  djd *= options.gradient_scale;
  result.directional_derivative = djd;

  std::vector<Tensor> perturbed(point.begin(), point.end());
  for (double h : steps) {
    for (std::size_t k = 0; k < point.size(); ++k) {
      perturbed[k] = point[k];
      axpy(h, direction[k].data(), perturbed[k].data());
    }
    const double jh = rf.evaluate(perturbed).item();
    result.remainders.push_back(std::abs(jh - result.value - h * djd));
  }
  rf.evaluate(point);

  const double floor = options.exact_threshold * std::max(1.0, std::abs(result.value));
  result.exact = std::all_of(result.remainders.begin(), result.remainders.end(),
                             [&](double r) { return r < floor; });
  if (!result.exact) {
    for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
      result.orders.push_back(std::log(result.remainders[i] / result.remainders[i + 1]) /
                              std::log(steps[i] / steps[i + 1]));
    }
  }
  return result;
}

}  // namespace afem::ad
