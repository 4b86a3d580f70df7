#include <catch2/catch_amalgamated.hpp>
#include <random>

#include "perfhom/homogenize.hpp"
#include "perfhom/solver.hpp"

using namespace perfhom;

namespace {

// Problem on an inner box carved out of the grid box, no perforation.
ProblemSpec plain_box_problem(const OperatorSpec& op, const GridSpec& gs,
                              const std::function<double(const Vec3&)>& f) {
  ProblemSpec spec;
  spec.op = op;
  spec.grid = gs.make_grid();
  PerforationFamily none;
  none.cell_sizes = {1.0};
  none.c0 = 0.0;
  DomainMask mask = build_perforation(none, 1, gs);
  spec.free_mask = free_mask_perforated(mask);
  spec.boundary = ScalarField(spec.grid);
  for (std::int64_t id = 0; id < spec.grid.size(); ++id)
    spec.boundary[id] = f(spec.grid.x(id));
  return spec;
}

double linf_diff(const ScalarField& a, const ScalarField& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.v.size(); ++i)
    m = std::max(m, std::abs(a.v[i] - b.v[i]));
  return m;
}

}  // namespace

TEST_CASE("zero data gives the zero solution") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.5;
  gs.omega_halfwidth = 0.5;
  gs.h = 1.0 / 12;
  auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs,
                                [](const Vec3&) { return 0.0; });
  SolverOptions opt;
  auto rep = solve_dirichlet(spec, opt);
  CHECK(rep.converged);
  for (double v : rep.solution.v) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("linear boundary data is reproduced exactly") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.5;
  gs.omega_halfwidth = 0.5;
  gs.h = 1.0 / 16;
  auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs,
                                [](const Vec3& x) { return x[0]; });
  SolverOptions opt;
  auto rep = solve_dirichlet(spec, opt);
  CHECK(rep.converged);
  ScalarField exact(spec.grid);
  for (std::int64_t id = 0; id < spec.grid.size(); ++id)
    exact[id] = spec.grid.x(id)[0];
  CHECK(linf_diff(rep.solution, exact) < 1e-8);
}

TEST_CASE("radial profile across a spherical hole matches the 1-D solution") {
  // hole at level one, outer box boundary at level zero
  const double a = 0.15, W = 0.5;
  const int N = 64;
  Grid g;
  g.nn = {N + 1, N + 1, N + 1};
  g.h = 2.0 * W / N;
  g.origin = {-W, -W, -W};

  ProblemSpec spec;
  spec.op = OperatorSpec::pure(2.0);
  spec.grid = g;
  spec.boundary = ScalarField(g);
  spec.free_mask.assign(static_cast<std::size_t>(g.size()), 0);
  std::int64_t carrier_nodes = 0;
  for (std::int64_t id = 0; id < g.size(); ++id) {
    int i, j, k;
    g.decode(id, i, j, k);
    const Vec3 x = g.x(id);
    const double r = norm(x);
    const bool hole = r <= a + 1e-12;
    bool near_hole = hole;
    if (!hole) {
      static const int off[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                    {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
      for (const auto& o : off) {
        const int ii = i + o[0], jj = j + o[1], kk = k + o[2];
        if (ii < 0 || jj < 0 || kk < 0 || ii >= g.nn[0] || jj >= g.nn[1] ||
            kk >= g.nn[2])
          continue;
        if (norm(g.x(ii, jj, kk)) <= a + 1e-12) near_hole = true;
      }
    }
    if (near_hole) {
      spec.boundary[id] = 1.0;
      ++carrier_nodes;
    } else if (!g.boundary(i, j, k)) {
      spec.free_mask[static_cast<std::size_t>(id)] = 1;
    }
  }
  REQUIRE(carrier_nodes > 30);

  SolverOptions opt;
  auto rep = solve_dirichlet(spec, opt);
  REQUIRE(rep.converged);

  // 1-D oracle between the measured carrier radius and the box's
  // equivalent sphere
  // carrier volume gives the outer staircase radius; the element ramp to the
  // first free node puts the effective level surface half a cell inside it
  const double a_eff =
      std::cbrt(3.0 * double(carrier_nodes) * cube(g.h) / (4.0 * 3.14159265358979)) -
      0.5 * g.h;
  const double R_eff = 2.0 * W / 1.7475645946331822;
  auto radial = [&](double r) {
    return (1.0 / r - 1.0 / R_eff) / (1.0 / a_eff - 1.0 / R_eff);
  };
  for (double r : {0.25, 0.3, 0.35}) {
    double acc = 0;
    int cnt = 0;
    for (std::int64_t id = 0; id < g.size(); ++id) {
      const double rr = norm(g.x(id));
      if (std::abs(rr - r) <= 0.5 * g.h) {
        acc += rep.solution[id];
        ++cnt;
      }
    }
    REQUIRE(cnt > 0);
    const double measured = acc / cnt;
    CHECK(measured == Catch::Approx(radial(r)).epsilon(0.02));
  }
}

TEST_CASE("weak residual flags perturbations and scales with data changes") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 12;
  auto make = [&](double load) {
    auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs,
                                  [](const Vec3& x) { return x[0] + 0.3 * x[1]; });
    for (auto& f : spec.fvec) f = ScalarField(spec.grid, 0.0);
    for (std::int64_t id = 0; id < spec.grid.size(); ++id)
      spec.fvec[0][id] = load * spec.grid.x(id)[0];
    return spec;
  };
  auto spec = make(1.0);
  SolverOptions opt;
  auto rep = solve_dirichlet(spec, opt);
  REQUIRE(rep.converged);

  const double base = weak_residual(spec, rep.solution);

  // nudge one interior free node
  ScalarField bumped = rep.solution;
  std::int64_t target = -1;
  for (std::int64_t id = 0; id < spec.grid.size(); ++id)
    if (spec.free_mask[static_cast<std::size_t>(id)]) target = id;
  bumped[target] += 1.0;
  const double pert = weak_residual(spec, bumped);
  CHECK(pert > 100.0 * std::max(base, 1e-12));

  // solutions of problems with different divergence data leave defects
  // proportional to the data distance (linear flux)
  auto rep2 = solve_dirichlet(make(2.0), opt);
  const double cross1 = weak_residual(spec, rep2.solution);
  auto rep3 = solve_dirichlet(make(3.0), opt);
  const double cross2 = weak_residual(spec, rep3.solution);
  CHECK(cross1 > 1e3 * std::max(base, 1e-14));
  CHECK(cross2 == Catch::Approx(2.0 * cross1).epsilon(0.05));
}

TEST_CASE("limit solve without a density term equals the plain solve") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 12;
  auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs,
                                [](const Vec3& x) { return x[0] * x[1]; });
  SolverOptions opt;
  auto plain = solve_dirichlet(spec, opt);

  auto spec_zero = spec;
  spec_zero.density = std::make_shared<ZeroDensity>();
  auto limit = solve_limit(spec_zero, opt);
  CHECK(linf_diff(plain.solution, limit.solution) < 10 * opt.tol);
}

TEST_CASE("linear density with zero data keeps the zero solution") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 12;
  auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs,
                                [](const Vec3&) { return 0.0; });
  spec.density = std::make_shared<LinearDensity>(4.0);
  SolverOptions opt;
  auto rep = solve_limit(spec, opt);
  for (double v : rep.solution.v) CHECK(std::abs(v) <= 1e-10);
}

TEST_CASE("linear density drives the solution to the boundary level") {
  // flux divergence + kappa (f - u) with constant f: the constant solves it
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 12;
  auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs,
                                [](const Vec3&) { return 1.0; });
  spec.density = std::make_shared<LinearDensity>(5.0);
  SolverOptions opt;
  auto rep = solve_limit(spec, opt);
  for (std::int64_t id = 0; id < spec.grid.size(); ++id)
    CHECK(rep.solution[id] == Catch::Approx(1.0).margin(1e-8));
}

TEST_CASE("affine data with a linear density matches the independent solve") {
  // affine boundary data solves the limit equation exactly; compare against
  // a 7-point finite-difference solve assembled independently
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 10;
  const double kappa = 3.0;
  auto f = [](const Vec3& x) { return 1.0 + 0.1 * x[0]; };
  auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs, f);
  spec.density = std::make_shared<LinearDensity>(kappa);
  SolverOptions opt;
  auto rep = solve_limit(spec, opt);

  // route one: the affine field itself
  ScalarField exact(spec.grid);
  for (std::int64_t id = 0; id < spec.grid.size(); ++id)
    exact[id] = f(spec.grid.x(id));
  CHECK(linf_diff(rep.solution, exact) < 1e-8);

  // route two: Jacobi sweeps on the 7-point system  (-lap u + k u = k f)
  const Grid& g = spec.grid;
  ScalarField fd(g);
  for (std::int64_t id = 0; id < g.size(); ++id)
    fd[id] = spec.free_mask[static_cast<std::size_t>(id)] ? 0.0 : f(g.x(id));
  const double h2 = sq(g.h);
  for (int sweep = 0; sweep < 4000; ++sweep) {
    ScalarField nxt = fd;
    for (std::int64_t id = 0; id < g.size(); ++id) {
      if (!spec.free_mask[static_cast<std::size_t>(id)]) continue;
      int i, j, k;
      g.decode(id, i, j, k);
      const double nb = fd[g.idx(i + 1, j, k)] + fd[g.idx(i - 1, j, k)] +
                        fd[g.idx(i, j + 1, k)] + fd[g.idx(i, j - 1, k)] +
                        fd[g.idx(i, j, k + 1)] + fd[g.idx(i, j, k - 1)];
      nxt[id] = (nb + h2 * kappa * f(g.x(id))) / (6.0 + h2 * kappa);
    }
    fd.v.swap(nxt.v);
  }
  CHECK(linf_diff(rep.solution, fd) < 1e-7);
}

TEST_CASE("density handles are validated") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 10;
  auto spec = plain_box_problem(OperatorSpec::pure(2.0), gs,
                                [](const Vec3&) { return 1.0; });
  spec.density = std::make_shared<LinearDensity>(-2.0);  // decreasing
  SolverOptions opt;
  CHECK_THROWS_AS(solve_limit(spec, opt), InvalidDensityError);

  CHECK_THROWS_AS(TableDensity({1.0, 1.0}, {0.5, 0.5}), InvalidDensityError);
}

TEST_CASE("solves from different initial guesses agree") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 10;
  auto spec = plain_box_problem(OperatorSpec::pure(2.5), gs,
                                [](const Vec3& x) { return x[0] + 0.2; });
  SolverOptions opt;
  auto r1 = solve_dirichlet(spec, opt);
  ScalarField zero_guess(spec.grid, 0.0);
  for (std::int64_t id = 0; id < spec.grid.size(); ++id)
    if (!spec.free_mask[static_cast<std::size_t>(id)])
      zero_guess[id] = spec.boundary[id];
  auto r2 = solve_dirichlet(spec, opt, &zero_guess);
  const auto n1 = norms(r1.solution, spec.op.m);
  ScalarField diff = r1.solution;
  for (std::size_t i = 0; i < diff.v.size(); ++i) diff.v[i] -= r2.solution.v[i];
  const auto nd = norms(diff, spec.op.m);
  CHECK(nd.lp <= 10 * opt.tol * std::max(1.0, n1.lp));
}

TEST_CASE("continuation energies do not increase as the regularization drops") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 10;
  auto spec = plain_box_problem(OperatorSpec::pure(2.6), gs,
                                [](const Vec3& x) { return sq(x[0]) - 0.3 * x[1]; });
  SolverOptions opt;
  auto rep = solve_dirichlet(spec, opt);
  REQUIRE(rep.rung_energies.size() >= 2);
  for (std::size_t i = 1; i < rep.rung_energies.size(); ++i)
    CHECK(rep.rung_energies[i] <=
          rep.rung_energies[i - 1] + 1e-10 * std::abs(rep.rung_energies[i - 1]));
}

TEST_CASE("exhausted budgets raise a diagnostic error with history") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.25;
  gs.omega_halfwidth = 0.25;
  gs.h = 1.0 / 10;
  auto spec = plain_box_problem(OperatorSpec::pure(2.5), gs,
                                [](const Vec3& x) { return sq(x[0]) + 0.2 * x[1]; });
  SolverOptions opt;
  opt.newton_maxit = 1;
  bool threw = false;
  try {
    solve_dirichlet(spec, opt);
  } catch (const NonConvergenceError& e) {
    threw = true;
    CHECK_FALSE(e.residual_history.empty());
  }
  CHECK(threw);
}

TEST_CASE("energy stays below the a-priori bound") {
  GridSpec gs;
  gs.omega0_halfwidth = 1.5;
  gs.omega_halfwidth = 0.5;
  gs.h = 1.0 / 12;
  const Grid g = gs.make_grid();

  PerforationFamily fam;
  fam.cell_sizes = {0.5};
  fam.gamma = 0.0;
  fam.c0 = 1.0 / 6.0;
  DomainMask mask = build_perforation(fam, 1, gs);

  for (double m : {2.0, 2.5}) {
    ProblemSpec spec;
    spec.op = OperatorSpec::pure(m);
    spec.grid = g;
    spec.free_mask = free_mask_perforated(mask);
    spec.boundary = ScalarField(g);
    for (std::int64_t id = 0; id < g.size(); ++id) {
      const Vec3 x = g.x(id);
      spec.boundary[id] = 0.5 * x[0] + 0.1 * std::sin(3 * x[1]);
    }
    SolverOptions opt;
    auto rep = solve_dirichlet(spec, opt);
    REQUIRE(rep.converged);
    const auto nu = norms(rep.solution, m);
    const double measured = std::pow(nu.w1p_semi, m) + std::pow(nu.lp, m);
    const double bound = energy_bound_R(spec.op, spec.boundary, nullptr, gs);
    CHECK(measured <= bound);
  }
}
