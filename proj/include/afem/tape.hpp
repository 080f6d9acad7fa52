#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "afem/tensor.hpp"

namespace afem::ad {

/// A differentiable node kind. Implementations compute their output from the
/// parent values and accumulate vector-Jacobian products into the parents
/// that need them. State retained by forward() (e.g. an assembled operator)
/// may be used by the next backward().
class Operator {
 public:
  virtual ~Operator() = default;

  virtual std::string_view name() const = 0;
  /// True for nodes whose rule involves finite-element assembly or solves.
  virtual bool fem_coupled() const { return false; }

  virtual Tensor forward(std::span<const Tensor* const> inputs) = 0;

  /// grads[k] is null when parent k needs no cotangent; otherwise it has
  /// the parent's shape and the contribution must be added to it.
  virtual void backward(std::span<const Tensor* const> inputs, const Tensor& output,
                        const Tensor& cotangent, std::span<Tensor* const> grads) = 0;
};

class Tape;

/// Lightweight handle to a tape node. The tape must outlive its handles.
class Variable {
 public:
  Variable() = default;
  Variable(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Accumulated cotangent; nullptr until a backward pass reaches the node.
  const Tensor* cotangent() const;
  bool requires_grad() const;

  /// Backpropagates `seed` to every requires_grad leaf of the tape.
  void backward(const Tensor& seed) const;

  friend bool operator==(const Variable& a, const Variable& b) {
    return a.tape_ == b.tape_ && a.id_ == b.id_;
  }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

struct Node {
  Tensor value;
  std::optional<Tensor> cotangent;
  std::vector<std::size_t> parents;
  std::unique_ptr<Operator> op;  // null for leaves
  bool requires_grad = false;
};

/// Reverse-mode tape. Nodes are appended in evaluation order and may only
/// reference earlier nodes, so the graph is acyclic by construction.
/// Single-threaded; use one tape per sample for parallel work.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Variable leaf(Tensor value, bool requires_grad = true);
  Variable constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records a custom operator applied to `inputs` and runs its forward.
  Variable apply(std::unique_ptr<Operator> op, std::span<const Variable> inputs);
  Variable apply(std::unique_ptr<Operator> op, std::initializer_list<Variable> inputs) {
    return apply(std::move(op), std::span<const Variable>(inputs.begin(), inputs.size()));
  }

  template <typename Op, typename... Args>
  Variable record(std::initializer_list<Variable> inputs, Args&&... args) {
    return apply(std::make_unique<Op>(std::forward<Args>(args)...), inputs);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  Variable variable(std::size_t id);

  /// Overwrites a leaf value (shape must match). Dependants are stale until
  /// replayed.
  void set_leaf_value(Variable leaf, Tensor value);

  /// Recomputes the forward value of every node downstream of `sources`.
  void replay(std::span<const Variable> sources);

  void zero_cotangents();

  /// Kahn ordering of all nodes; throws if the parent graph has a cycle.
  std::vector<std::size_t> topological_order() const;

  /// Cotangents of one reverse sweep restricted to `active` nodes, without
  /// touching the stored cotangents. Entries are empty for unreached nodes.
  std::vector<std::optional<Tensor>> sweep(std::size_t output, const Tensor& seed,
                                           const std::vector<char>& active);

  /// Adds sweep results into the stored per-node cotangents.
  void accumulate(std::vector<std::optional<Tensor>>& contributions);

  /// Nodes that are ancestors of `output` (inclusive).
  std::vector<char> ancestors(std::size_t output) const;
  /// Nodes that depend on any of `sources` (inclusive).
  std::vector<char> descendants(std::span<const std::size_t> sources) const;

 private:
  std::vector<Node> nodes_;
};

/// A scalar- or tensor-valued output viewed as a function of selected
/// controls. Backward only visits nodes that lie between the controls and
/// the output.
class ReducedFunctional {
 public:
  ReducedFunctional(Variable output, std::vector<Variable> controls);

  const Variable& output() const noexcept { return output_; }
  const std::vector<Variable>& controls() const noexcept { return controls_; }

  /// Sets the controls to `values`, replays the dependent part of the tape
  /// and returns the new output value.
  Tensor evaluate(std::span<const Tensor> values);

  /// Cotangent of each control for `seed`, from a fresh sweep. Stored
  /// cotangents are left untouched.
  std::vector<Tensor> gradient(const Tensor& seed);

 private:
  friend std::vector<Tensor> backward(ReducedFunctional& rf, const Tensor& seed);

  std::vector<char> active_mask() const;

  Variable output_;
  std::vector<Variable> controls_;
};

ReducedFunctional reduced_functional(Variable output, std::vector<Variable> controls);

/// Reverse sweep seeded with an external cotangent. Contributions are added
/// to the stored cotangents of every visited node (repeated calls
/// accumulate; see Tape::zero_cotangents). Returns the accumulated
/// cotangent of each control.
std::vector<Tensor> backward(ReducedFunctional& rf, const Tensor& seed);

struct TaylorOptions {
  /// Multiplies the adjoint gradient before use; anything but 1 fakes a bug.
  double gradient_scale = 1.0;
  /// Remainders below this (relative to max(1, |J|)) count as exact zero.
  double exact_threshold = 1e-12;
};

struct TaylorResult {
  double value = 0.0;
  double directional_derivative = 0.0;
  std::vector<double> steps;
  std::vector<double> remainders;
  /// log(r_i / r_{i+1}) / log(h_i / h_{i+1}); empty when exact.
  std::vector<double> orders;
  /// All remainders vanished (functional linear along the direction).
  bool exact = false;

  double min_order() const;
  bool passed(double lo, double hi = 1e300) const;
};

/// First-order Taylor remainder test |J(m + h d) - J(m) - h <dJ, d>| for a
/// scalar functional. Controls are restored to `point` afterwards.
TaylorResult taylor_test(ReducedFunctional& rf, std::span<const Tensor> point,
                         std::span<const Tensor> direction, std::span<const double> steps,
                         const TaylorOptions& options = {});

}  // namespace afem::ad
