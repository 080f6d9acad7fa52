#include "afem/mesh.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "afem/errors.hpp"

namespace afem {

namespace {
constexpr double kBoundaryTol = 1e-14;

bool near(double a, double b) { return std::abs(a - b) <= kBoundaryTol; }
}  // namespace

Mesh::Mesh(std::size_t nx, std::size_t ny) : nx_(nx), ny_(ny) {
  if (nx == 0 || ny == 0) {
    throw DomainError(fmt::format("mesh needs at least one cell per axis, got {}x{}", nx, ny));
  }
  vertices_.reserve((nx + 1) * (ny + 1));
  for (std::size_t j = 0; j <= ny; ++j) {
    for (std::size_t i = 0; i <= nx; ++i) {
      vertices_.push_back({static_cast<double>(i) / static_cast<double>(nx),
                           static_cast<double>(j) / static_cast<double>(ny)});
    }
  }

  triangles_.reserve(2 * nx * ny);
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) {
      const std::size_t v00 = vertex_index(i, j);
      const std::size_t v10 = vertex_index(i + 1, j);
      const std::size_t v01 = vertex_index(i, j + 1);
      const std::size_t v11 = vertex_index(i + 1, j + 1);
      triangles_.push_back({v00, v10, v11});
      triangles_.push_back({v00, v11, v01});
    }
  }

  on_boundary_.assign(vertices_.size(), 0);
  for (std::size_t v = 0; v < vertices_.size(); ++v) {
    const auto [x, y] = vertices_[v];
    if (near(x, 0.0) || near(x, 1.0) || near(y, 0.0) || near(y, 1.0)) {
      on_boundary_[v] = 1;
      boundary_.push_back(v);
    }
  }
}

double Mesh::signed_area(std::size_t tri) const {
  const auto& t = triangles_.at(tri);
  const Point& a = vertices_[t[0]];
  const Point& b = vertices_[t[1]];
  const Point& c = vertices_[t[2]];
  return 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
}

MeshPtr build_unit_square_mesh(std::size_t nx, std::size_t ny) {
  return std::make_shared<const Mesh>(nx, ny);
}

FeFunction::FeFunction(MeshPtr mesh) : mesh_(std::move(mesh)), dofs_(mesh_->num_vertices(), 0.0) {}

FeFunction::FeFunction(MeshPtr mesh, std::vector<double> dofs)
    : mesh_(std::move(mesh)), dofs_(std::move(dofs)) {
  if (dofs_.size() != mesh_->num_vertices()) {
    throw CastError(fmt::format("{} dofs given for a mesh with {} vertices", dofs_.size(),
                                mesh_->num_vertices()));
  }
  for (std::size_t i = 0; i < dofs_.size(); ++i) {
    if (!std::isfinite(dofs_[i])) {
      throw DomainError(fmt::format("non-finite dof at vertex {}", i));
    }
  }
}

double FeFunction::evaluate(double x, double y) const {
  const Mesh& m = *mesh_;
  const double sx = std::clamp(x, 0.0, 1.0) * static_cast<double>(m.nx());
  const double sy = std::clamp(y, 0.0, 1.0) * static_cast<double>(m.ny());
  const std::size_t i = std::min(static_cast<std::size_t>(sx), m.nx() - 1);
  const std::size_t j = std::min(static_cast<std::size_t>(sy), m.ny() - 1);
  const double s = sx - static_cast<double>(i);
  const double t = sy - static_cast<double>(j);

  const double u00 = dofs_[m.vertex_index(i, j)];
  const double u10 = dofs_[m.vertex_index(i + 1, j)];
  const double u01 = dofs_[m.vertex_index(i, j + 1)];
  const double u11 = dofs_[m.vertex_index(i + 1, j + 1)];
  if (s >= t) {
    return u00 + s * (u10 - u00) + t * (u11 - u10);
  }
  return u00 + t * (u01 - u00) + s * (u11 - u01);
}

FeFunction interpolate(const PointFunction& g, const MeshPtr& mesh) {
  std::vector<double> dofs(mesh->num_vertices());
  const auto& verts = mesh->vertices();
  for (std::size_t v = 0; v < verts.size(); ++v) {
    dofs[v] = g(verts[v].x, verts[v].y);
    if (!std::isfinite(dofs[v])) {
      throw InterpolationError(
          fmt::format("non-finite value at vertex {} ({}, {})", v, verts[v].x, verts[v].y), v);
    }
  }
  return FeFunction(mesh, std::move(dofs));
}

Tensor grid_view(const FeFunction& u) {
  const Mesh& m = *u.mesh();
  // DoFs are already in (j, i) lexicographic order.
  return Tensor(Shape{m.ny() + 1, m.nx() + 1}, u.dofs());
}

FeFunction grid_unview(const Tensor& grid, const MeshPtr& mesh) {
  const Shape expected{mesh->ny() + 1, mesh->nx() + 1};
  if (grid.shape() != expected) {
    throw CastError(fmt::format("cannot cast tensor of shape {} onto mesh grid {}",
                                shape_string(grid.shape()), shape_string(expected)));
  }
  return FeFunction(mesh, grid.values());
}

}  // namespace afem
