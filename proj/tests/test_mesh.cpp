#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>
#include <utility>

#include <gtest/gtest.h>

#include "afem/errors.hpp"
#include "afem/mesh.hpp"

using namespace afem;

namespace {

double shoelace(const Point& a, const Point& b, const Point& c) {
  return 0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y));
}

}  // namespace

TEST(Mesh, SmallestMeshIsAllBoundary) {
  const Mesh m(1, 1);
  EXPECT_EQ(m.num_vertices(), 4u);
  EXPECT_EQ(m.num_triangles(), 2u);
  EXPECT_EQ(m.boundary_nodes(), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Mesh, TwoByTwoHasOneInteriorNode) {
  const Mesh m(2, 2);
  EXPECT_EQ(m.num_vertices(), 9u);
  EXPECT_EQ(m.num_triangles(), 8u);
  EXPECT_EQ(m.boundary_nodes().size(), 8u);
  std::size_t interior = 0;
  for (std::size_t v = 0; v < m.num_vertices(); ++v) {
    if (!m.is_boundary(v)) {
      interior = v;
      EXPECT_EQ(m.vertices()[v].x, 0.5);
      EXPECT_EQ(m.vertices()[v].y, 0.5);
    }
  }
  EXPECT_EQ(interior, 4u);
}

TEST(Mesh, CountsAndAreaAt32) {
  const Mesh m(32, 32);
  EXPECT_EQ(m.num_vertices(), 1089u);
  EXPECT_EQ(m.num_triangles(), 2048u);
  double total = 0.0;
  for (std::size_t t = 0; t < m.num_triangles(); ++t) total += m.signed_area(t);
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Mesh, AreaPartitionAndOrientation) {
  for (std::size_t nx : {1u, 3u, 7u, 64u, 128u}) {
    for (std::size_t ny : {1u, 5u, 128u}) {
      const Mesh m(nx, ny);
      double total = 0.0;
      for (std::size_t t = 0; t < m.num_triangles(); ++t) {
        const auto& tri = m.triangles()[t];
        const double a = shoelace(m.vertices()[tri[0]], m.vertices()[tri[1]], m.vertices()[tri[2]]);
        ASSERT_GT(a, 0.0);
        EXPECT_NEAR(m.signed_area(t), a, 1e-15);
        total += a;
      }
      EXPECT_NEAR(total, 1.0, 1e-12) << nx << "x" << ny;
    }
  }
}

TEST(Mesh, BoundaryCount) {
  for (std::size_t nx = 1; nx <= 9; ++nx) {
    for (std::size_t ny = 1; ny <= 9; ++ny) {
      const Mesh m(nx, ny);
      EXPECT_EQ(m.boundary_nodes().size(), 2 * (nx + ny));
      for (std::size_t v = 0; v < m.num_vertices(); ++v) {
        const Point p = m.vertices()[v];
        const bool on = p.x == 0.0 || p.x == 1.0 || p.y == 0.0 || p.y == 1.0;
        EXPECT_EQ(m.is_boundary(v), on);
      }
    }
  }
}

TEST(Mesh, EdgesSharedConsistently) {
  const Mesh m(5, 3);
  std::map<std::pair<std::size_t, std::size_t>, int> edges;
  for (const auto& t : m.triangles()) {
    for (int k = 0; k < 3; ++k) {
      const auto a = t[k], b = t[(k + 1) % 3];
      ++edges[{std::min(a, b), std::max(a, b)}];
    }
  }
  auto on_side = [&](std::size_t a, std::size_t b) {
    const Point p = m.vertices()[a], q = m.vertices()[b];
    return (p.x == q.x && (p.x == 0.0 || p.x == 1.0)) || (p.y == q.y && (p.y == 0.0 || p.y == 1.0));
  };
  for (const auto& [e, count] : edges) EXPECT_EQ(count, on_side(e.first, e.second) ? 1 : 2);
  // Euler: V - E + F = 1 for a disk.
  EXPECT_EQ(static_cast<long>(m.num_vertices()) - static_cast<long>(edges.size()) +
                static_cast<long>(m.num_triangles()),
            1);
}

TEST(Mesh, DiagonalRunsLowerLeftToUpperRight) {
  const Mesh m(1, 1);
  for (const auto& t : m.triangles()) {
    EXPECT_NE(std::find(t.begin(), t.end(), 0u), t.end());
    EXPECT_NE(std::find(t.begin(), t.end(), 3u), t.end());
  }
}

TEST(Mesh, RejectsZeroCells) {
  EXPECT_THROW(Mesh(0, 3), DomainError);
  EXPECT_THROW(build_unit_square_mesh(3, 0), DomainError);
}

TEST(Interpolate, ZeroFunction) {
  const auto mesh = build_unit_square_mesh(3, 4);
  const FeFunction u = interpolate([](double, double) { return 0.0; }, mesh);
  for (double v : u.dofs()) EXPECT_EQ(v, 0.0);
}

TEST(Interpolate, CoordinateX) {
  const auto mesh = build_unit_square_mesh(2, 2);
  const FeFunction u = interpolate([](double x, double) { return x; }, mesh);
  const std::vector<double> expected{0, 0.5, 1, 0, 0.5, 1, 0, 0.5, 1};
  EXPECT_EQ(u.dofs(), expected);
}

TEST(Interpolate, SineBumpPeak) {
  const auto mesh = build_unit_square_mesh(4, 4);
  using std::numbers::pi;
  const FeFunction u = interpolate([](double x, double y) { return std::sin(pi * x) * std::sin(pi * y); }, mesh);
  EXPECT_DOUBLE_EQ(u[mesh->vertex_index(2, 2)], 1.0);
}

TEST(Interpolate, AffineReproducedEverywhere) {
  const auto mesh = build_unit_square_mesh(7, 5);
  const auto g = [](double x, double y) { return 0.3 - 1.7 * x + 2.2 * y; };
  const FeFunction u = interpolate(g, mesh);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int k = 0; k < 500; ++k) {
    const double x = unit(rng), y = unit(rng);
    EXPECT_NEAR(u.evaluate(x, y), g(x, y), 1e-13);
  }
  EXPECT_NEAR(u.evaluate(1.0, 1.0), g(1.0, 1.0), 1e-13);
}

TEST(Interpolate, NonFiniteValueNamesVertex) {
  const auto mesh = build_unit_square_mesh(2, 2);
  try {
    interpolate([](double x, double y) { return x == 0.5 && y == 0.5 ? NAN : 1.0; }, mesh);
    FAIL() << "expected InterpolationError";
  } catch (const InterpolationError& e) {
    EXPECT_EQ(e.vertex(), 4u);
  }
}

TEST(FeFunction, Invariants) {
  const auto mesh = build_unit_square_mesh(2, 2);
  EXPECT_THROW(FeFunction(mesh, std::vector<double>(8, 0.0)), CastError);
  std::vector<double> bad(9, 0.0);
  bad[3] = INFINITY;
  EXPECT_THROW(FeFunction(mesh, bad), DomainError);
}

TEST(GridView, ConstantOne) {
  const auto mesh = build_unit_square_mesh(2, 2);
  const Tensor g = grid_view(FeFunction(mesh, std::vector<double>(9, 1.0)));
  EXPECT_EQ(g.shape(), (Shape{3, 3}));
  for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(GridView, RowsOfLinearInX) {
  const auto mesh = build_unit_square_mesh(2, 2);
  const Tensor g = grid_view(interpolate([](double x, double) { return x; }, mesh));
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(g.at(r, 0), 0.0);
    EXPECT_EQ(g.at(r, 1), 0.5);
    EXPECT_EQ(g.at(r, 2), 1.0);
  }
}

TEST(GridView, EntryMatchesVertex) {
  const auto mesh = build_unit_square_mesh(4, 2);
  const FeFunction u = interpolate([](double x, double y) { return 10 * x + 100 * y; }, mesh);
  const Tensor g = grid_view(u);
  EXPECT_EQ(g.shape(), (Shape{3, 5}));
  for (std::size_t j = 0; j <= 2; ++j) {
    for (std::size_t i = 0; i <= 4; ++i) EXPECT_EQ(g.at(j, i), u[mesh->vertex_index(i, j)]);
  }
}

TEST(GridView, RoundTripsBitwise) {
  const auto mesh = build_unit_square_mesh(4, 4);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  std::vector<double> d(25);
  for (double& v : d) v = normal(rng);
  const FeFunction u(mesh, d);
  EXPECT_EQ(grid_unview(grid_view(u), mesh).dofs(), u.dofs());

  Tensor t({5, 5});
  for (double& v : t.values()) v = normal(rng);
  EXPECT_EQ(grid_view(grid_unview(t, mesh)), t);
}

TEST(GridUnview, ZerosAndShapeMismatch) {
  const auto mesh = build_unit_square_mesh(2, 2);
  const FeFunction z = grid_unview(Tensor({3, 3}), mesh);
  for (double v : z.dofs()) EXPECT_EQ(v, 0.0);
  try {
    grid_unview(Tensor({2, 2}), mesh);
    FAIL() << "expected CastError";
  } catch (const CastError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2, 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3, 3"), std::string::npos) << msg;
  }
}
