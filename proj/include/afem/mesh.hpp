#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "afem/tensor.hpp"

namespace afem {

struct Point {
  double x = 0.0;
  double y = 0.0;
};

using Triangle = std::array<std::size_t, 3>;

/// Structured triangulation of the unit square. Vertex (i, j) has index
/// j * (nx + 1) + i; each cell is split along its lower-left to upper-right
/// diagonal into two counter-clockwise triangles.
class Mesh {
 public:
  Mesh(std::size_t nx, std::size_t ny);

  std::size_t nx() const noexcept { return nx_; }
  std::size_t ny() const noexcept { return ny_; }
  std::size_t num_vertices() const noexcept { return vertices_.size(); }
  std::size_t num_triangles() const noexcept { return triangles_.size(); }

  const std::vector<Point>& vertices() const noexcept { return vertices_; }
  const std::vector<Triangle>& triangles() const noexcept { return triangles_; }
  /// Sorted ascending.
  const std::vector<std::size_t>& boundary_nodes() const noexcept { return boundary_; }
  bool is_boundary(std::size_t vertex) const { return on_boundary_[vertex] != 0; }

  std::size_t vertex_index(std::size_t i, std::size_t j) const { return j * (nx_ + 1) + i; }

  /// Signed area of a triangle (positive for CCW).
  double signed_area(std::size_t tri) const;

 private:
  std::size_t nx_;
  std::size_t ny_;
  std::vector<Point> vertices_;
  std::vector<Triangle> triangles_;
  std::vector<std::size_t> boundary_;
  std::vector<char> on_boundary_;
};

using MeshPtr = std::shared_ptr<const Mesh>;

/// Throws DomainError for nx == 0 or ny == 0.
MeshPtr build_unit_square_mesh(std::size_t nx, std::size_t ny);

/// P1 finite-element function: one nodal coefficient per mesh vertex.
class FeFunction {
 public:
  explicit FeFunction(MeshPtr mesh);
  FeFunction(MeshPtr mesh, std::vector<double> dofs);

  const MeshPtr& mesh() const noexcept { return mesh_; }
  const std::vector<double>& dofs() const noexcept { return dofs_; }
  std::size_t size() const noexcept { return dofs_.size(); }
  double operator[](std::size_t i) const { return dofs_[i]; }

  /// Point evaluation of the piecewise-linear interpolant; (x, y) in [0,1]^2.
  double evaluate(double x, double y) const;

 private:
  MeshPtr mesh_;
  std::vector<double> dofs_;
};

using PointFunction = std::function<double(double, double)>;

/// Nodal interpolation; throws InterpolationError on a non-finite value.
FeFunction interpolate(const PointFunction& g, const MeshPtr& mesh);

/// Reshape nodal values to a (ny+1) x (nx+1) row-major grid.
Tensor grid_view(const FeFunction& u);

/// Inverse of grid_view; throws CastError on a shape mismatch.
FeFunction grid_unview(const Tensor& grid, const MeshPtr& mesh);

}  // namespace afem
