#include "afem/fem_ops.hpp"

#include <fmt/format.h>

#include "afem/errors.hpp"

namespace afem::ad {

namespace {

class PdeSolveOp final : public Operator {
 public:
  PdeSolveOp(FeFunction f, SolverOptions options) : f_(std::move(f)), options_(options) {}

  std::string_view name() const override { return "pde_solve"; }
  bool fem_coupled() const override { return true; }

  Tensor forward(std::span<const Tensor* const> in) override {
    HeatSolution sol = solve_heat(as_function(*in[0]), f_, options_);
    constrained_ = std::move(sol.constrained);
    return Tensor::vector(sol.u.dofs());
  }

  void backward(std::span<const Tensor* const> in, const Tensor& u, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (!grads[0]) return;
    std::vector<double> rhs = w.values();
    for (std::size_t i : f_.mesh()->boundary_nodes()) rhs[i] = 0.0;
    const std::vector<double> lambda = solve_adjoint(constrained_, rhs, options_);
    const std::vector<double> g = stiffness_coefficient_derivative(as_function(*in[0]), u.data(), lambda);
    axpy(-1.0, g, grads[0]->data());
  }

 private:
  FeFunction as_function(const Tensor& kappa) const {
    if (kappa.shape() != Shape{f_.size()}) {
      throw CastError(fmt::format("pde_solve: kappa of shape {} on a mesh with {} dofs",
                                  shape_string(kappa.shape()), f_.size()));
    }
    return FeFunction(f_.mesh(), kappa.values());
  }

  FeFunction f_;
  SolverOptions options_;
  SparseMatrix constrained_;
};

class L2LossOp final : public Operator {
 public:
  L2LossOp(std::shared_ptr<const SparseMatrix> mass, std::vector<double> coeffs)
      : mass_(std::move(mass)), coeffs_(std::move(coeffs)) {}

  std::string_view name() const override { return "l2_lossq"; }
  bool fem_coupled() const override { return true; }

  Tensor forward(std::span<const Tensor* const> in) override {
    double total = 0.0;
    md_.resize(coeffs_.size());
    for (std::size_t t = 0; t < coeffs_.size(); ++t) {
      const Tensor& a = *in[2 * t];
      const Tensor& b = *in[2 * t + 1];
      if (a.shape() != Shape{mass_->rows()} || b.shape() != a.shape()) {
        throw CastError(fmt::format("l2_lossq: operands {} and {} do not match a mesh with {} dofs",
                                    shape_string(a.shape()), shape_string(b.shape()), mass_->rows()));
      }
      std::vector<double> d = a.values();
      axpy(-1.0, b.data(), d);
      md_[t] = (*mass_) * d;
      total += coeffs_[t] * dot(d, md_[t]);
    }
    return Tensor::scalar(total);
  }

  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    for (std::size_t t = 0; t < coeffs_.size(); ++t) {
      const double s = 2.0 * coeffs_[t] * w.item();
      if (grads[2 * t]) axpy(s, md_[t], grads[2 * t]->data());
      if (grads[2 * t + 1]) axpy(-s, md_[t], grads[2 * t + 1]->data());
    }
  }

 private:
  std::shared_ptr<const SparseMatrix> mass_;
  std::vector<double> coeffs_;
  std::vector<std::vector<double>> md_;  // M (a - b) per term
};

/// Both casts are value-preserving reshapes; the adjoint of the reindexing
/// is its inverse.
class CastOp final : public Operator {
 public:
  CastOp(Shape from, Shape to, std::string_view name) : from_(std::move(from)), to_(std::move(to)), name_(name) {}
  std::string_view name() const override { return name_; }

  Tensor forward(std::span<const Tensor* const> in) override {
    if (in[0]->shape() != from_) {
      throw CastError(fmt::format("{}: expected shape {}, got {}", name_, shape_string(from_),
                                  shape_string(in[0]->shape())));
    }
    return in[0]->reshaped(to_);
  }
  void backward(std::span<const Tensor* const>, const Tensor&, const Tensor& w,
                std::span<Tensor* const> grads) override {
    if (grads[0]) axpy(1.0, w.data(), grads[0]->data());
  }

 private:
  Shape from_;
  Shape to_;
  std::string_view name_;
};

}  // namespace

Variable pde_solve(Variable kappa, FeFunction f, const SolverOptions& options) {
  return kappa.tape().record<PdeSolveOp>({kappa}, std::move(f), options);
}

Variable l2_lossq(std::shared_ptr<const SparseMatrix> mass, std::span<const L2Term> terms) {
  if (terms.empty()) throw DomainError("l2_lossq needs at least one term");
  std::vector<Variable> inputs;
  std::vector<double> coeffs;
  for (const L2Term& t : terms) {
    inputs.push_back(t.a);
    inputs.push_back(t.b);
    coeffs.push_back(t.coeff);
  }
  return terms.front().a.tape().apply(std::make_unique<L2LossOp>(std::move(mass), std::move(coeffs)), inputs);
}

Variable l2_lossq(std::shared_ptr<const SparseMatrix> mass, Variable a, Variable b, double coeff) {
  const L2Term term{a, b, coeff};
  return l2_lossq(std::move(mass), std::span<const L2Term>(&term, 1));
}

Variable l2_lossq(const MeshPtr& mesh, Variable a, Variable b, double coeff) {
  return l2_lossq(std::make_shared<const SparseMatrix>(assemble_mass(*mesh)), a, b, coeff);
}

Variable cast_to_grid(Variable dofs, MeshPtr mesh) {
  return dofs.tape().record<CastOp>({dofs}, Shape{mesh->num_vertices()}, Shape{mesh->ny() + 1, mesh->nx() + 1},
                                    "cast_to_grid");
}

Variable cast_to_dofs(Variable grid, MeshPtr mesh) {
  return grid.tape().record<CastOp>({grid}, Shape{mesh->ny() + 1, mesh->nx() + 1}, Shape{mesh->num_vertices()},
                                    "cast_to_dofs");
}

}  // namespace afem::ad
