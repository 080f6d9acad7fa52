#include "afem/verification.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "afem/fem.hpp"
#include "afem/fem_ops.hpp"
#include "afem/nn.hpp"
#include "afem/ops.hpp"
#include "afem/pipeline.hpp"

namespace afem::verify {

using std::numbers::pi;

double l2_error(const FeFunction& uh, const PointFunction& exact) {
  // Dunavant degree-5 rule: centroid plus two orbits of three points.
  struct QP {
    double l0, l1, l2, w;
  };
  constexpr double a1 = 0.059715871789770, b1 = 0.470142064105115, w1 = 0.132394152788506;
  constexpr double a2 = 0.797426985353087, b2 = 0.101286507323456, w2 = 0.125939180544827;
  constexpr QP rule[] = {{1.0 / 3, 1.0 / 3, 1.0 / 3, 0.225}, {a1, b1, b1, w1}, {b1, a1, b1, w1}, {b1, b1, a1, w1},
                         {a2, b2, b2, w2},                   {b2, a2, b2, w2}, {b2, b2, a2, w2}};
  const Mesh& mesh = *uh.mesh();
  double sum = 0.0;
  for (std::size_t e = 0; e < mesh.num_triangles(); ++e) {
    const Triangle& t = mesh.triangles()[e];
    const Point& p0 = mesh.vertices()[t[0]];
    const Point& p1 = mesh.vertices()[t[1]];
    const Point& p2 = mesh.vertices()[t[2]];
    const double area = mesh.signed_area(e);
    for (const QP& q : rule) {
      const double x = q.l0 * p0.x + q.l1 * p1.x + q.l2 * p2.x;
      const double y = q.l0 * p0.y + q.l1 * p1.y + q.l2 * p2.y;
      const double d = q.l0 * uh[t[0]] + q.l1 * uh[t[1]] + q.l2 * uh[t[2]] - exact(x, y);
      sum += area * q.w * d * d;
    }
  }
  return std::sqrt(sum);
}

std::vector<ConvergenceLevel> manufactured_convergence(std::span<const std::size_t> levels, double tol) {
  const PointFunction exact = [](double x, double y) { return std::sin(pi * x) * std::sin(pi * y); };
  std::vector<ConvergenceLevel> out;
  for (std::size_t n : levels) {
    const MeshPtr mesh = build_unit_square_mesh(n, n);
    const FeFunction kappa(mesh);
    const FeFunction f = interpolate([&](double x, double y) { return 2.0 * pi * pi * exact(x, y); }, mesh);
    const FeFunction u = solve_forward(kappa, f, {.tol = tol});
    ConvergenceLevel level{n, l2_error(u, exact), std::numeric_limits<double>::quiet_NaN()};
    if (!out.empty()) {
      const auto& prev = out.back();
      level.order = std::log(prev.error / level.error) /
                    std::log(static_cast<double>(n) / static_cast<double>(prev.n));
    }
    out.push_back(level);
  }
  return out;
}

namespace {

Tensor random_tensor(std::mt19937_64& rng, const Shape& shape, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Tensor t(shape);
  for (double& v : t.values()) v = normal(rng);
  return t;
}

/// |adjoint - FD| / |FD| for the directional derivative along `direction`.
double directional_fd_error(ad::ReducedFunctional& rf, const std::vector<Tensor>& point,
                            const std::vector<Tensor>& direction, double h) {
  rf.evaluate(point);
  const auto grad = rf.gradient(Tensor::scalar(1.0));
  double adjoint = 0.0;
  for (std::size_t k = 0; k < grad.size(); ++k) adjoint += dot(grad[k].data(), direction[k].data());

  auto shifted = [&](double s) {
    std::vector<Tensor> p = point;
    for (std::size_t k = 0; k < p.size(); ++k) axpy(s, direction[k].data(), p[k].data());
    return rf.evaluate(p).item();
  };
  const double fd = (shifted(h) - shifted(-h)) / (2.0 * h);
  rf.evaluate(point);
  return std::abs(adjoint - fd) / std::max(std::abs(fd), std::numeric_limits<double>::min());
}

std::vector<Tensor> values_of(std::span<const ad::Variable> vars) {
  std::vector<Tensor> out;
  for (const auto& v : vars) out.push_back(v.value());
  return out;
}

}  // namespace

std::vector<CheckRow> run_gradchecks(const GradcheckOptions& opt) {
  const MeshPtr mesh = build_unit_square_mesh(opt.nx, opt.ny);
  const std::size_t n = mesh->num_vertices();
  const Shape grid{opt.ny + 1, opt.nx + 1};
  const SolverOptions solver{.tol = opt.solver_tol};
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unit(0.5, 1.5);

  std::vector<double> fvals(n);
  for (double& v : fvals) v = unit(rng);
  const FeFunction f(mesh, fvals);
  const Tensor kappa0 = random_tensor(rng, {n}, 0.3);
  const Tensor w_dofs = random_tensor(rng, {n});
  const Tensor w_grid = random_tensor(rng, grid);

  std::vector<CheckRow> rows;
  auto fd_row = [&](std::string name, double err) {
    rows.push_back({std::move(name), "rel_error", err, opt.fd_tolerance, err < opt.fd_tolerance});
  };
  const double steps[] = {1e-2, 5e-3, 2.5e-3, 1.25e-3};
  const ad::TaylorOptions taylor{.gradient_scale = opt.inject_bug ? 0.5 : 1.0};
  auto taylor_row = [&](std::string name, const ad::TaylorResult& r) {
    rows.push_back({std::move(name), "min_order", r.exact ? 2.0 : r.min_order(), opt.min_order,
                    r.passed(opt.min_order)});
  };

  {
    ad::Tape tape;
    const auto kappa = tape.leaf(kappa0);
    const auto j = ad::inner(ad::pde_solve(kappa, f, solver), w_dofs);
    ad::ReducedFunctional rf(j, {kappa});
    fd_row("pde_solve", directional_fd_error(rf, {kappa0}, {random_tensor(rng, {n})}, opt.fd_step));
  }
  {
    ad::Tape tape;
    const auto a = tape.leaf(random_tensor(rng, {n}));
    const auto b = tape.leaf(random_tensor(rng, {n}));
    const auto j = ad::l2_lossq(mesh, a, b, 0.7);
    ad::ReducedFunctional rf(j, {a, b});
    fd_row("l2_lossq", directional_fd_error(rf, {a.value(), b.value()},
                                            {random_tensor(rng, {n}), random_tensor(rng, {n})}, opt.fd_step));
  }
  {
    ad::Tape tape;
    const auto kg = tape.leaf(kappa0.reshaped(grid));
    const auto u = ad::cast_to_grid(ad::pde_solve(ad::cast_to_dofs(kg, mesh), f, solver), mesh);
    ad::ReducedFunctional rf(ad::inner(u, w_grid), {kg});
    fd_row("cast_grid_pde_grid", directional_fd_error(rf, {kg.value()}, {random_tensor(rng, grid)}, opt.fd_step));
  }

  const nn::ModelConfig model = nn::ModelConfig::default_cnn(grid[0], grid[1]);
  const nn::ModelParams params = nn::init_params(model, opt.seed);
  std::vector<Tensor> param_dir;
  for (const auto& t : params.tensors()) param_dir.push_back(random_tensor(rng, t.value.shape()));
  {
    ad::Tape tape;
    const auto vars = nn::bind(tape, params);
    const auto out = nn::model_forward(model, vars, tape.constant(random_tensor(rng, grid)));
    ad::ReducedFunctional rf(ad::sum(out), vars);
    fd_row("model_forward", directional_fd_error(rf, values_of(vars), param_dir, opt.fd_step));
  }
  {
    ad::Tape tape;
    const auto kappa = tape.leaf(kappa0);
    const auto zero = tape.constant(Tensor({n}));
    const auto j = ad::l2_lossq(mesh, ad::pde_solve(kappa, f, solver), zero, 0.5);
    ad::ReducedFunctional rf(j, {kappa});
    const Tensor dir = random_tensor(rng, {n});
    taylor_row("taylor_pde_functional", ad::taylor_test(rf, std::vector<Tensor>{kappa0}, std::vector<Tensor>{dir},
                                                        steps, taylor));
  }
  {
    pipeline::GenConfig gen;
    gen.nx = opt.nx;
    gen.ny = opt.ny;
    gen.tol = opt.solver_tol;
    const FeFunction source = pipeline::source_term(gen, mesh);
    const pipeline::Sample sample = pipeline::generate_sample(opt.seed, gen, mesh, source);
    const pipeline::Sample norm_src[] = {sample};
    const pipeline::LossContext ctx{mesh,  std::make_shared<const SparseMatrix>(assemble_mass(*mesh)), source, model,
                                    pipeline::compute_normalization(norm_src), solver};
    ad::Tape tape;
    const auto vars = nn::bind(tape, params);
    const auto sl = pipeline::sample_loss(tape, ctx, vars, sample, 0.5);
    ad::ReducedFunctional rf(sl.loss, vars);
    taylor_row("taylor_sample_loss", ad::taylor_test(rf, values_of(vars), param_dir, steps, taylor));
  }
  return rows;
}

}  // namespace afem::verify
