#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "afem/mesh.hpp"

namespace afem::verify {

/// L2 norm of (u_h - exact) with a 7-point degree-5 rule per triangle.
double l2_error(const FeFunction& uh, const PointFunction& exact);

struct ConvergenceLevel {
  std::size_t n = 0;
  double error = 0.0;
  double order = 0.0;  // NaN on the first level
};

/// kappa = 0, f = 2 pi^2 sin(pi x) sin(pi y) on n x n meshes; error against
/// sin(pi x) sin(pi y). Orders use log2-style rates with the actual mesh ratio.
std::vector<ConvergenceLevel> manufactured_convergence(std::span<const std::size_t> levels, double tol = 1e-12);

struct CheckRow {
  std::string name;
  std::string metric;  // "rel_error" or "min_order"
  double value = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

struct GradcheckOptions {
  std::size_t nx = 8;
  std::size_t ny = 8;
  std::uint64_t seed = 0;
  double fd_step = 1e-5;
  double solver_tol = 1e-12;
  double fd_tolerance = 1e-5;
  double min_order = 1.9;
  /// Halves every adjoint gradient before the Taylor tests.
  bool inject_bug = false;
};

/// Central finite-difference checks of every FEM-coupled operator, the casts
/// and the model, plus Taylor tests of the PDE functional and of the full
/// training loss.
std::vector<CheckRow> run_gradchecks(const GradcheckOptions& options);

}  // namespace afem::verify
