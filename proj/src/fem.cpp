#include "afem/fem.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace afem {

// ---------------------------------------------------------------------------
// SparseMatrix

SparseMatrix::SparseMatrix(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_offsets,
                           std::vector<std::size_t> col_indices, std::vector<double> values)
    : rows_(rows),
      cols_(cols),
      row_offsets_(std::move(row_offsets)),
      col_indices_(std::move(col_indices)),
      values_(std::move(values)) {
  if (row_offsets_.size() != rows_ + 1 || row_offsets_.back() != col_indices_.size() ||
      col_indices_.size() != values_.size()) {
    throw DomainError("inconsistent compressed-row arrays");
  }
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      if (col_indices_[k] >= cols_ || (k > row_offsets_[i] && col_indices_[k] <= col_indices_[k - 1])) {
        throw DomainError(fmt::format("row {} has unsorted or out-of-range column indices", i));
      }
    }
  }
}

double SparseMatrix::at(std::size_t i, std::size_t j) const {
  const auto first = col_indices_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[i]);
  const auto last = col_indices_.begin() + static_cast<std::ptrdiff_t>(row_offsets_[i + 1]);
  const auto it = std::lower_bound(first, last, j);
  if (it == last || *it != j) return 0.0;
  return values_[static_cast<std::size_t>(it - col_indices_.begin())];
}

std::vector<double> SparseMatrix::diagonal() const {
  std::vector<double> d(std::min(rows_, cols_));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = at(i, i);
  return d;
}

void SparseMatrix::multiply(std::span<const double> x, std::span<double> y) const {
  for (std::size_t i = 0; i < rows_; ++i) {
    double s = 0.0;
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      s += values_[k] * x[col_indices_[k]];
    }
    y[i] = s;
  }
}

void SparseMatrix::multiply_transpose(std::span<const double> x, std::span<double> y) const {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      y[col_indices_[k]] += values_[k] * x[i];
    }
  }
}

std::vector<double> SparseMatrix::operator*(std::span<const double> x) const {
  std::vector<double> y(rows_);
  multiply(x, y);
  return y;
}

double SparseMatrix::max_asymmetry() const {
  double worst = 0.0;
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      worst = std::max(worst, std::abs(values_[k] - at(col_indices_[k], i)));
    }
  }
  return worst;
}

std::vector<std::vector<double>> SparseMatrix::to_dense() const {
  std::vector<std::vector<double>> dense(rows_, std::vector<double>(cols_, 0.0));
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t k = row_offsets_[i]; k < row_offsets_[i + 1]; ++k) {
      dense[i][col_indices_[k]] = values_[k];
    }
  }
  return dense;
}

// ---------------------------------------------------------------------------
// Element machinery

QuadratureRule QuadratureRule::mid_edge() {
  return {{{0.5, 0.5, 0.0}, {0.0, 0.5, 0.5}, {0.5, 0.0, 0.5}}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 2};
}

namespace {

struct ElementGeometry {
  double area;
  std::array<std::array<double, 2>, 3> grad;  // gradients of the three hat functions
};

ElementGeometry geometry(const Mesh& mesh, const Triangle& t) {
  const auto& v = mesh.vertices();
  const Point& p0 = v[t[0]];
  const Point& p1 = v[t[1]];
  const Point& p2 = v[t[2]];
  const double det = (p1.x - p0.x) * (p2.y - p0.y) - (p2.x - p0.x) * (p1.y - p0.y);
  ElementGeometry g{};
  g.area = 0.5 * det;
  g.grad[0] = {(p1.y - p2.y) / det, (p2.x - p1.x) / det};
  g.grad[1] = {(p2.y - p0.y) / det, (p0.x - p2.x) / det};
  g.grad[2] = {(p0.y - p1.y) / det, (p1.x - p0.x) / det};
  return g;
}

/// CSR skeleton of the P1 vertex adjacency plus, for every triangle, the
/// value slot of each of its 3x3 local entries.
struct Pattern {
  std::vector<std::size_t> row_offsets;
  std::vector<std::size_t> col_indices;
  std::vector<std::array<std::size_t, 9>> slots;
};

Pattern build_pattern(const Mesh& mesh) {
  const std::size_t n = mesh.num_vertices();
  std::vector<std::vector<std::size_t>> adj(n);
  for (const auto& t : mesh.triangles()) {
    for (std::size_t a : t) {
      for (std::size_t b : t) adj[a].push_back(b);
    }
  }
  Pattern p;
  p.row_offsets.assign(n + 1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    std::sort(adj[i].begin(), adj[i].end());
    adj[i].erase(std::unique(adj[i].begin(), adj[i].end()), adj[i].end());
    p.row_offsets[i + 1] = p.row_offsets[i] + adj[i].size();
    p.col_indices.insert(p.col_indices.end(), adj[i].begin(), adj[i].end());
  }
  p.slots.reserve(mesh.num_triangles());
  for (const auto& t : mesh.triangles()) {
    std::array<std::size_t, 9> s{};
    for (std::size_t a = 0; a < 3; ++a) {
      const auto first = p.col_indices.begin() + static_cast<std::ptrdiff_t>(p.row_offsets[t[a]]);
      const auto last = p.col_indices.begin() + static_cast<std::ptrdiff_t>(p.row_offsets[t[a] + 1]);
      for (std::size_t b = 0; b < 3; ++b) {
        s[3 * a + b] = static_cast<std::size_t>(std::lower_bound(first, last, t[b]) - p.col_indices.begin());
      }
    }
    p.slots.push_back(s);
  }
  return p;
}

template <typename LocalFn>
SparseMatrix assemble(const Mesh& mesh, LocalFn&& local) {
  Pattern p = build_pattern(mesh);
  std::vector<double> values(p.col_indices.size(), 0.0);
  for (std::size_t e = 0; e < mesh.num_triangles(); ++e) {
    const std::array<double, 9> ke = local(e);
    for (std::size_t k = 0; k < 9; ++k) values[p.slots[e][k]] += ke[k];
  }
  const std::size_t n = mesh.num_vertices();
  return SparseMatrix(n, n, std::move(p.row_offsets), std::move(p.col_indices), std::move(values));
}

/// Values of e^kappa at the quadrature points of element e.
std::array<double, 3> exp_kappa_at_points(const FeFunction& kappa, std::size_t e,
                                          const QuadratureRule& rule) {
  const Triangle& t = kappa.mesh()->triangles()[e];
  std::array<double, 3> out{};
  for (std::size_t q = 0; q < 3; ++q) {
    const auto& bc = rule.points[q];
    const double k = bc[0] * kappa[t[0]] + bc[1] * kappa[t[1]] + bc[2] * kappa[t[2]];
    out[q] = std::exp(k);
    if (!std::isfinite(out[q])) {
      throw AssemblyError(fmt::format("e^kappa is not finite in element {} (kappa = {})", e, k), e);
    }
  }
  return out;
}

}  // namespace

SparseMatrix assemble_stiffness(const FeFunction& kappa) {
  const Mesh& mesh = *kappa.mesh();
  const QuadratureRule rule = QuadratureRule::mid_edge();
  return assemble(mesh, [&](std::size_t e) {
    const ElementGeometry g = geometry(mesh, mesh.triangles()[e]);
    const auto ek = exp_kappa_at_points(kappa, e, rule);
    double coeff = 0.0;
    for (std::size_t q = 0; q < 3; ++q) coeff += rule.weights[q] * ek[q];
    coeff *= g.area;
    std::array<double, 9> ke{};
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t b = 0; b < 3; ++b) {
        ke[3 * a + b] = coeff * (g.grad[a][0] * g.grad[b][0] + g.grad[a][1] * g.grad[b][1]);
      }
    }
    return ke;
  });
}

SparseMatrix assemble_mass(const Mesh& mesh) {
  const QuadratureRule rule = QuadratureRule::mid_edge();
  return assemble(mesh, [&](std::size_t e) {
    const double area = geometry(mesh, mesh.triangles()[e]).area;
    std::array<double, 9> me{};
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const auto& bc = rule.points[q];
      for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t b = 0; b < 3; ++b) me[3 * a + b] += area * rule.weights[q] * bc[a] * bc[b];
      }
    }
    return me;
  });
}

std::vector<double> assemble_load(const FeFunction& f) {
  const Mesh& mesh = *f.mesh();
  const QuadratureRule rule = QuadratureRule::mid_edge();
  std::vector<double> b(mesh.num_vertices(), 0.0);
  for (std::size_t e = 0; e < mesh.num_triangles(); ++e) {
    const Triangle& t = mesh.triangles()[e];
    const double area = geometry(mesh, t).area;
    for (std::size_t q = 0; q < rule.points.size(); ++q) {
      const auto& bc = rule.points[q];
      const double fq = bc[0] * f[t[0]] + bc[1] * f[t[1]] + bc[2] * f[t[2]];
      for (std::size_t a = 0; a < 3; ++a) b[t[a]] += area * rule.weights[q] * fq * bc[a];
    }
  }
  return b;
}

std::pair<SparseMatrix, std::vector<double>> apply_dirichlet(const SparseMatrix& a,
                                                             std::vector<double> b,
                                                             std::span<const std::size_t> boundary) {
  std::vector<char> fixed(a.rows(), 0);
  for (std::size_t i : boundary) fixed.at(i) = 1;

  std::vector<double> values = a.values();
  const auto& offsets = a.row_offsets();
  const auto& cols = a.col_indices();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = offsets[i]; k < offsets[i + 1]; ++k) {
      const std::size_t j = cols[k];
      if (fixed[i] || fixed[j]) values[k] = (i == j) ? 1.0 : 0.0;
    }
  }
  for (std::size_t i : boundary) b[i] = 0.0;
  return {SparseMatrix(a.rows(), a.cols(), offsets, cols, std::move(values)), std::move(b)};
}

// ---------------------------------------------------------------------------
// Conjugate gradient

namespace {

template <typename Apply>
std::vector<double> conjugate_gradient(Apply&& apply, const std::vector<double>& diag,
                                       std::span<const double> b, const SolverOptions& options,
                                       SolvePhase phase, SolveStats* stats) {
  const std::size_t n = b.size();
  std::vector<double> x(n, 0.0);
  const double bnorm = std::sqrt(dot(b, b));
  if (bnorm == 0.0) {
    if (stats) *stats = {0, 0.0};
    return x;
  }
  const std::size_t budget = options.max_iterations ? options.max_iterations : 10 * n;
  const double target = options.tol * bnorm;

  std::vector<double> r(b.begin(), b.end());
  std::vector<double> z(n);
  std::vector<double> p(n);
  std::vector<double> ap(n);

  auto precondition = [&] {
    if (options.jacobi) {
      for (std::size_t i = 0; i < n; ++i) z[i] = r[i] / diag[i];
    } else {
      z = r;
    }
  };
  auto true_residual = [&] {
    apply(x, ap);
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ap[i];
    return std::sqrt(dot(r, r));
  };

  precondition();
  p = z;
  double rz = dot(r, z);
  double rnorm = bnorm;
  std::size_t it = 0;
  while (it < budget) {
    apply(p, ap);
    const double pap = dot(p, ap);
    if (!(pap > 0.0)) break;
    const double step = rz / pap;
    axpy(step, p, x);
    axpy(-step, ap, r);
    ++it;
    rnorm = std::sqrt(dot(r, r));
    if (rnorm <= target) {
      // The recursive residual drifts; accept only on the true one.
      rnorm = true_residual();
      if (rnorm <= target) break;
      precondition();
      p = z;
      rz = dot(r, z);
      continue;
    }
    precondition();
    const double rz_next = dot(r, z);
    const double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  const double rel = rnorm / bnorm;
  if (stats) *stats = {it, rel};
  if (!(rel <= options.tol)) {
    throw SolverError(fmt::format("{} solve did not converge: relative residual {:.3e} after {} "
                                  "iterations (tol {:.1e})",
                                  phase == SolvePhase::kForward ? "forward" : "adjoint", rel, it,
                                  options.tol),
                      rel, phase);
  }
  return x;
}

}  // namespace

std::vector<double> solve_spd(const SparseMatrix& a, std::span<const double> b,
                              const SolverOptions& options, SolveStats* stats) {
  return conjugate_gradient([&](std::span<const double> x, std::span<double> y) { a.multiply(x, y); },
                            options.jacobi ? a.diagonal() : std::vector<double>{}, b, options,
                            SolvePhase::kForward, stats);
}

std::vector<double> solve_adjoint(const SparseMatrix& a, std::span<const double> rhs,
                                  const SolverOptions& options, SolveStats* stats) {
  return conjugate_gradient(
      [&](std::span<const double> x, std::span<double> y) { a.multiply_transpose(x, y); },
      options.jacobi ? a.diagonal() : std::vector<double>{}, rhs, options, SolvePhase::kAdjoint,
      stats);
}

HeatSolution solve_heat(const FeFunction& kappa, const FeFunction& f, const SolverOptions& options) {
  if (kappa.mesh() != f.mesh()) throw DomainError("kappa and f live on different meshes");
  const MeshPtr& mesh = kappa.mesh();
  auto [a, b] = apply_dirichlet(assemble_stiffness(kappa), assemble_load(f), mesh->boundary_nodes());
  std::vector<double> u = solve_spd(a, b, options);
  for (std::size_t i : mesh->boundary_nodes()) u[i] = 0.0;
  return {FeFunction(mesh, std::move(u)), std::move(a)};
}

FeFunction solve_forward(const FeFunction& kappa, const FeFunction& f, const SolverOptions& options) {
  return solve_heat(kappa, f, options).u;
}

std::vector<double> stiffness_coefficient_derivative(const FeFunction& kappa,
                                                     std::span<const double> u,
                                                     std::span<const double> lambda) {
  const Mesh& mesh = *kappa.mesh();
  const QuadratureRule rule = QuadratureRule::mid_edge();
  std::vector<double> g(mesh.num_vertices(), 0.0);
  for (std::size_t e = 0; e < mesh.num_triangles(); ++e) {
    const Triangle& t = mesh.triangles()[e];
    const ElementGeometry geo = geometry(mesh, t);
    double gu[2] = {0.0, 0.0};
    double gl[2] = {0.0, 0.0};
    for (std::size_t a = 0; a < 3; ++a) {
      for (std::size_t d = 0; d < 2; ++d) {
        gu[d] += u[t[a]] * geo.grad[a][d];
        gl[d] += lambda[t[a]] * geo.grad[a][d];
      }
    }
    const double flux = gu[0] * gl[0] + gu[1] * gl[1];
    const auto ek = exp_kappa_at_points(kappa, e, rule);
    for (std::size_t q = 0; q < 3; ++q) {
      const double w = geo.area * rule.weights[q] * ek[q] * flux;
      for (std::size_t a = 0; a < 3; ++a) g[t[a]] += w * rule.points[q][a];
    }
  }
  return g;
}

double l2_normsq(const SparseMatrix& mass, std::span<const double> d) {
  std::vector<double> md(d.size());
  mass.multiply(d, md);
  return dot(d, md);
}

double l2_normsq(const FeFunction& d) { return l2_normsq(assemble_mass(*d.mesh()), d.dofs()); }

}  // namespace afem
