#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "afem/errors.hpp"
#include "afem/mesh.hpp"

namespace afem {

/// Compressed-row sparse matrix. Column indices are strictly increasing
/// within each row.
class SparseMatrix {
 public:
  SparseMatrix() = default;
  SparseMatrix(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_offsets,
               std::vector<std::size_t> col_indices, std::vector<double> values);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t nnz() const noexcept { return values_.size(); }

  const std::vector<std::size_t>& row_offsets() const noexcept { return row_offsets_; }
  const std::vector<std::size_t>& col_indices() const noexcept { return col_indices_; }
  const std::vector<double>& values() const noexcept { return values_; }
  std::vector<double>& values() noexcept { return values_; }

  /// Entry (i, j); zero when outside the pattern.
  double at(std::size_t i, std::size_t j) const;
  std::vector<double> diagonal() const;

  void multiply(std::span<const double> x, std::span<double> y) const;
  void multiply_transpose(std::span<const double> x, std::span<double> y) const;
  std::vector<double> operator*(std::span<const double> x) const;

  /// max |A_ij - A_ji| over the pattern.
  double max_asymmetry() const;

  std::vector<std::vector<double>> to_dense() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::size_t> row_offsets_{0};
  std::vector<std::size_t> col_indices_;
  std::vector<double> values_;
};

/// Barycentric quadrature on a triangle; weights sum to one and are scaled
/// by the element area at use.
struct QuadratureRule {
  std::vector<std::array<double, 3>> points;
  std::vector<double> weights;
  int degree = 0;

  /// Three mid-edge points, weight 1/3 each; exact to degree 2.
  static QuadratureRule mid_edge();
};

/// A[i][j] = \int e^kappa grad(phi_i) . grad(phi_j), kappa taken as its P1
/// interpolant at the mid-edge quadrature points. No boundary conditions.
SparseMatrix assemble_stiffness(const FeFunction& kappa);

/// M[i][j] = \int phi_i phi_j.
SparseMatrix assemble_mass(const Mesh& mesh);

/// b[i] = \int f phi_i, with the same rule as the mass matrix.
std::vector<double> assemble_load(const FeFunction& f);

/// Symmetric elimination of the listed DoFs: rows and columns zeroed, unit
/// diagonal, right-hand side zeroed. Homogeneous values only.
std::pair<SparseMatrix, std::vector<double>> apply_dirichlet(const SparseMatrix& a,
                                                             std::vector<double> b,
                                                             std::span<const std::size_t> boundary);

struct SolverOptions {
  double tol = 1e-10;
  std::size_t max_iterations = 0;  // 0 selects 10 * n
  bool jacobi = false;
};

struct SolveStats {
  std::size_t iterations = 0;
  double relative_residual = 0.0;
};

/// Conjugate gradient for symmetric positive definite systems. Throws
/// SolverError when ||Ax - b|| / ||b|| > tol after the iteration budget.
std::vector<double> solve_spd(const SparseMatrix& a, std::span<const double> b,
                              const SolverOptions& options = {}, SolveStats* stats = nullptr);

/// Solves A^T x = rhs. Reports failures as SolvePhase::kAdjoint.
std::vector<double> solve_adjoint(const SparseMatrix& a, std::span<const double> rhs,
                                  const SolverOptions& options = {}, SolveStats* stats = nullptr);

struct HeatSolution {
  FeFunction u;
  /// Dirichlet-constrained stiffness the solution satisfies.
  SparseMatrix constrained;
};

/// -div(e^kappa grad u) = f in the unit square, u = 0 on the boundary.
HeatSolution solve_heat(const FeFunction& kappa, const FeFunction& f,
                        const SolverOptions& options = {});

FeFunction solve_forward(const FeFunction& kappa, const FeFunction& f,
                         const SolverOptions& options = {});

/// g[p] = \int e^kappa phi_p (grad u . grad lambda), evaluated with the rule
/// used in assemble_stiffness so that g = d(lambda^T A(kappa) u)/d kappa.
std::vector<double> stiffness_coefficient_derivative(const FeFunction& kappa,
                                                     std::span<const double> u,
                                                     std::span<const double> lambda);

/// d^T M d.
double l2_normsq(const SparseMatrix& mass, std::span<const double> d);
double l2_normsq(const FeFunction& d);

}  // namespace afem
