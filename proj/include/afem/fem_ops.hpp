#pragma once

#include <memory>
#include <span>

#include "afem/fem.hpp"
#include "afem/mesh.hpp"
#include "afem/tape.hpp"

namespace afem::ad {

/// u(kappa) for the heat equation with fixed source `f`. The backward rule
/// is the discrete adjoint: w is zeroed on Dirichlet rows, A(kappa)^T
/// lambda = w is solved, and -\int e^kappa phi_p grad(u).grad(lambda) is
/// added to kappa's cotangent.
Variable pde_solve(Variable kappa, FeFunction f, const SolverOptions& options = {});

/// One weighted squared L2 distance coeff * (a - b)^T M (a - b).
struct L2Term {
  Variable a;
  Variable b;
  double coeff = 0.5;
};

/// Sum of weighted squared L2 distances, assembled as a single node.
Variable l2_lossq(std::shared_ptr<const SparseMatrix> mass, std::span<const L2Term> terms);
Variable l2_lossq(std::shared_ptr<const SparseMatrix> mass, Variable a, Variable b, double coeff = 0.5);
Variable l2_lossq(const MeshPtr& mesh, Variable a, Variable b, double coeff = 0.5);

/// DoF vector <-> (ny+1) x (nx+1) grid casts.
Variable cast_to_grid(Variable dofs, MeshPtr mesh);
Variable cast_to_dofs(Variable grid, MeshPtr mesh);

}  // namespace afem::ad
