#pragma once

// Variational capacities of compact sets: the m-energy capacity, capacitary
// potentials at prescribed levels, the operator capacity, homogeneity checks,
// the uniform cube-capacity scan over perforations, and the potential-decay
// estimate diagnostics.

#include "perfhom/core.hpp"
#include "perfhom/grid.hpp"
#include "perfhom/operator.hpp"
#include "perfhom/solver.hpp"

namespace perfhom {

// Alternating image sum for the origin-centered cube: the Dirichlet Green
// function regular part at the center is M/(8 pi L), so a centered cube of
// halfwidth L acts on small centered sets like a sphere of radius 2L/M.
inline constexpr double kCubeLatticeSum = 1.7475645946331822;

inline double cube_effective_radius(double halfwidth) {
  return 2.0 * halfwidth / kCubeLatticeSum;
}

// ---------------------------------------------------------------------------
// CompactSet: descriptor plus node realization inside the inner box.

struct CompactSet {
  enum class Kind { Empty, Ball, Cube, HolesInCube, Nodes };
  Kind kind = Kind::Empty;

  Vec3 center{0, 0, 0};
  double extent = 0.0;  // ball radius or cube halfwidth

  // holes-in-cube composite: perforation holes clipped to a cube
  Cube clip_cube;
  PerforationFamily family;
  int s_index = 1;
  double admission_halfwidth = 0.0;  // inner-box halfwidth admitting holes

  // explicit node realization
  std::vector<std::uint8_t> nodes;
  Grid nodes_grid;

  static CompactSet empty() { return {}; }
  static CompactSet ball(const Vec3& c, double r) {
    CompactSet f;
    f.kind = Kind::Ball;
    f.center = c;
    f.extent = r;
    return f;
  }
  static CompactSet cube(const Vec3& c, double hw) {
    CompactSet f;
    f.kind = Kind::Cube;
    f.center = c;
    f.extent = hw;
    return f;
  }
  static CompactSet holes_in_cube(const Cube& cube, const PerforationFamily& fam,
                                  int s, double admission_hw) {
    CompactSet f;
    f.kind = Kind::HolesInCube;
    f.clip_cube = cube;
    f.center = cube.center;
    f.extent = cube.halfwidth;
    f.family = fam;
    f.s_index = s;
    f.admission_halfwidth = admission_hw;
    return f;
  }
  static CompactSet from_nodes(const Grid& g, std::vector<std::uint8_t> mask) {
    CompactSet f;
    f.kind = Kind::Nodes;
    f.nodes = std::move(mask);
    f.nodes_grid = g;
    return f;
  }

  bool is_empty_descriptor() const { return kind == Kind::Empty; }

  std::vector<std::uint8_t> realize(const GridSpec& gs) const {
    const Grid g = gs.make_grid();
    std::vector<std::uint8_t> out(static_cast<std::size_t>(g.size()), 0);
    switch (kind) {
      case Kind::Empty:
        return out;
      case Kind::Ball:
      case Kind::Cube: {
        parallel_for(g.size(), [&](std::int64_t id) {
          const Vec3 x = g.x(id);
          const double dx = x[0] - center[0], dy = x[1] - center[1],
                       dz = x[2] - center[2];
          const double dist = kind == Kind::Ball
                                  ? std::sqrt(dx * dx + dy * dy + dz * dz)
                                  : std::max({std::abs(dx), std::abs(dy),
                                              std::abs(dz)});
          if (dist <= extent + 1e-12) out[static_cast<std::size_t>(id)] = 1;
        });
        break;
      }
      case Kind::HolesInCube: {
        const double d = family.cell_size(s_index);
        const double a = family.radius(s_index);
        parallel_for(g.size(), [&](std::int64_t id) {
          const Vec3 x = g.x(id);
          if (!clip_cube.contains(x)) return;
          Vec3 nc{family.anchor[0] + d * (std::floor((x[0] - family.anchor[0]) / d) + 0.5),
                  family.anchor[1] + d * (std::floor((x[1] - family.anchor[1]) / d) + 0.5),
                  family.anchor[2] + d * (std::floor((x[2] - family.anchor[2]) / d) + 0.5)};
          double dist;
          if (family.shape == HoleShape::Ball)
            dist = std::sqrt(sq(x[0] - nc[0]) + sq(x[1] - nc[1]) + sq(x[2] - nc[2]));
          else
            dist = std::max({std::abs(x[0] - nc[0]), std::abs(x[1] - nc[1]),
                             std::abs(x[2] - nc[2])});
          if (dist > a + 1e-12) return;
          for (int t = 0; t < 3; ++t)
            if (std::abs(nc[t]) + a > admission_halfwidth + 1e-12) return;
          out[static_cast<std::size_t>(id)] = 1;
        });
        break;
      }
      case Kind::Nodes: {
        if (!nodes_grid.same(g))
          throw InvalidInputError("CompactSet: node mask grid mismatch");
        out = nodes;
        break;
      }
    }
    return out;
  }

  // Containment and >= 2 cells of resolution in every direction.
  void check_resolved(const GridSpec& gs,
                      const std::vector<std::uint8_t>& realized) const {
    if (kind == Kind::Empty) return;
    const Grid g = gs.make_grid();
    int lo[3] = {1 << 30, 1 << 30, 1 << 30}, hi[3] = {-1, -1, -1};
    std::int64_t count = 0;
    for (std::int64_t id = 0; id < g.size(); ++id) {
      if (!realized[static_cast<std::size_t>(id)]) continue;
      ++count;
      int i, j, k;
      g.decode(id, i, j, k);
      const int c[3] = {i, j, k};
      const Vec3 x = g.x(id);
      if (!gs.inside_omega(x))
        throw InvalidInputError("CompactSet: set escapes the inner box");
      for (int d = 0; d < 3; ++d) {
        lo[d] = std::min(lo[d], c[d]);
        hi[d] = std::max(hi[d], c[d]);
      }
    }
    if (count == 0)
      throw ResolutionError(
          "CompactSet: descriptor realizes to zero nodes, refine the grid (h = " +
          std::to_string(g.h) + ")");
    if (kind == Kind::Ball && extent < 2.0 * g.h)
      throw ResolutionError("CompactSet: ball radius " + std::to_string(extent) +
                            " needs h <= " + std::to_string(extent / 2.0));
    for (int d = 0; d < 3; ++d)
      if (kind != Kind::HolesInCube && hi[d] - lo[d] < 1)
        throw ResolutionError("CompactSet: set thinner than 2 cells along axis " +
                              std::to_string(d));
  }
};

// ---------------------------------------------------------------------------
// Reports

struct CapacityReport {
  double value = 0.0;              // box-relative capacity (or operator capacity)
  double value_whole_space = 0.0;  // model-corrected estimate, 0 if not computed
  double q = 1.0;
  double m = 2.0;
  ScalarField potential;
  ScalarField energy_integrand;  // nodal a(x, grad v) . grad v density
  GridSpec box;
  int newton_iterations = 0;
  int pcg_iterations = 0;
  double solver_residual = 0.0;
};

// Flux-energy integral sum_j int a_j(x, grad u) d_j u dx over the whole box.
inline double flux_energy(const OperatorSpec& op, const ScalarField& u) {
  const Grid& g = u.grid;
  const auto& cq = cell_quad();
  const double W = cube(g.h) / 8.0;
  return detail::sum_cells(g, [&](int i, int j, int k) {
    double un[8];
    detail::gather(u, g, i, j, k, un);
    double e = 0.0;
    for (int gp = 0; gp < 8; ++gp) {
      Vec3 p{0, 0, 0};
      for (int a = 0; a < 8; ++a) {
        const double* d = cq.dphi[gp][a];
        p[0] += d[0] * un[a];
        p[1] += d[1] * un[a];
        p[2] += d[2] * un[a];
      }
      p[0] /= g.h;
      p[1] /= g.h;
      p[2] /= g.h;
      const Vec3 xg = detail::gauss_x(g, i, j, k, gp);
      e += dot(eval_flux(op, xg, p), p);
    }
    return W * e;
  });
}

// Nodal energy-integrand field (cell values averaged onto nodes).
inline ScalarField energy_integrand_field(const OperatorSpec& op,
                                          const ScalarField& u) {
  const Grid& g = u.grid;
  ScalarField out(g);
  std::vector<double> wsum(static_cast<std::size_t>(g.size()), 0.0);
  const auto& cq = cell_quad();
  detail::for_cells_colored(g, [&](int i, int j, int k) {
    double un[8];
    std::int64_t ids[8];
    detail::gather(u, g, i, j, k, un);
    detail::node_ids(g, i, j, k, ids);
    double e = 0.0;
    for (int gp = 0; gp < 8; ++gp) {
      Vec3 p{0, 0, 0};
      for (int a = 0; a < 8; ++a) {
        const double* d = cq.dphi[gp][a];
        p[0] += d[0] * un[a];
        p[1] += d[1] * un[a];
        p[2] += d[2] * un[a];
      }
      p[0] /= g.h;
      p[1] /= g.h;
      p[2] /= g.h;
      const Vec3 xg = detail::gauss_x(g, i, j, k, gp);
      e += dot(eval_flux(op, xg, p), p);
    }
    e /= 8.0;
    for (int a = 0; a < 8; ++a) {
      out[ids[a]] += e;
      wsum[static_cast<std::size_t>(ids[a])] += 1.0;
    }
  });
  parallel_for(g.size(), [&](std::int64_t id) {
    const auto s = static_cast<std::size_t>(id);
    if (wsum[s] > 0) out.v[s] /= wsum[s];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Capacitary potential at level q: interior equation div a(x, grad v) = 0 on
// the box minus the set, trace q*psi on the set and the outer boundary,
// extended by q on the set itself.

inline CapacityReport potential_v(const OperatorSpec& op, const CompactSet& F,
                                  double q, const BumpSpec& psi,
                                  const GridSpec& gs, const SolverOptions& opt,
                                  const ScalarField* initial = nullptr) {
  const Grid g = gs.make_grid();
  CapacityReport rep;
  rep.q = q;
  rep.m = op.m;
  rep.box = gs;

  if (q == 0.0 || F.is_empty_descriptor()) {
    rep.potential = ScalarField(g, 0.0);
    if (F.is_empty_descriptor() && q != 0.0) {
      // no set to hold the level: the zero field already solves the problem
    }
    rep.energy_integrand = ScalarField(g, 0.0);
    return rep;
  }

  auto set_nodes = F.realize(gs);
  F.check_resolved(gs, set_nodes);

  ProblemSpec prob;
  prob.op = op;
  prob.grid = g;
  prob.free_mask = free_mask_potential(g, set_nodes);
  prob.boundary = psi.make_field(gs);
  for (auto& x : prob.boundary.v) x *= q;
  // the trace is exactly q on set nodes regardless of the ramp shape
  parallel_for(g.size(), [&](std::int64_t id) {
    if (set_nodes[static_cast<std::size_t>(id)]) prob.boundary[id] = q;
  });

  SolveReport sol = solve_problem(prob, opt, initial);

  // level confinement: 0 <= v/q <= 1 nodewise, hard assertion up to round-off
  for (std::int64_t id = 0; id < g.size(); ++id) {
    const double ratio = sol.solution[id] / q;
    if (ratio < -1e-9 || ratio > 1.0 + 1e-9)
      throw Error("potential_v: level confinement violated at a node (v/q = " +
                  std::to_string(ratio) + ")");
  }

  rep.value = flux_energy(op, sol.solution) / q;
  rep.energy_integrand = energy_integrand_field(op, sol.solution);
  rep.potential = std::move(sol.solution);
  rep.newton_iterations = sol.newton_iterations;
  rep.pcg_iterations = sol.pcg_iterations;
  rep.solver_residual = sol.final_residual;
  return rep;
}

// ---------------------------------------------------------------------------
// m-capacity: minimum of int |grad phi|^m with phi = 1 on the set, 0 on the
// outer boundary.  Computed as the level-1 potential of the pure flux.

inline CapacityReport compute_Cm(const CompactSet& F, const GridSpec& gs,
                                 double m, const SolverOptions& opt,
                                 const ScalarField* initial = nullptr) {
  OperatorSpec op = OperatorSpec::pure(m);
  BumpSpec psi = default_bump(gs);
  CapacityReport rep = potential_v(op, F, 1.0, psi, gs, opt, initial);
  rep.m = m;
  return rep;
}

// Whole-space correction through the radial box model.  The box capacity of
// a centered set equals the whole-space value with the outer level surface
// pulled in to R_eff; inverting the radial solution gives the correction.
inline double whole_space_from_box(double c_box, double m, double r_eff) {
  if (c_box <= 0) return 0.0;
  const double n = 3.0;
  if (m >= n - 1e-9) return c_box;  // no whole-space limit at the border case
  const double S = 4.0 * 3.14159265358979323846;
  const double beta = (n - m) / (m - 1.0);
  const double y = std::pow(S * std::pow(beta, m - 1.0) / c_box, 1.0 / (m - 1.0));
  const double a_mb = y + std::pow(r_eff, -beta);  // a^{-beta}
  return S * std::pow(beta, m - 1.0) * std::pow(a_mb, -(m - 1.0));
}

struct CmExtrapolated {
  std::vector<double> h_values;
  std::vector<double> raw;        // box-relative value at each spacing
  std::vector<double> corrected;  // whole-space corrected at each spacing
  double value = 0.0;             // spacing-extrapolated corrected value
};

// Two-grid pipeline: solve at each spacing (cascading the coarse solution as
// the initial guess), correct the box bias, extrapolate linearly in h.
inline CmExtrapolated compute_Cm_extrapolated(const CompactSet& F, GridSpec gs,
                                              const std::vector<double>& h_list,
                                              double m, const SolverOptions& opt) {
  CmExtrapolated out;
  ScalarField prev;
  bool have_prev = false;
  const double r_eff = cube_effective_radius(gs.omega0_halfwidth);
  for (double h : h_list) {
    gs.h = h;
    std::unique_ptr<ScalarField> warm;
    if (have_prev) {
      warm = std::make_unique<ScalarField>(prolongate(prev, gs.make_grid()));
      // clamp the interpolated guess into the admissible level range
      for (auto& x : warm->v) x = std::clamp(x, 0.0, 1.0);
    }
    CapacityReport rep = compute_Cm(F, gs, m, opt, warm.get());
    out.h_values.push_back(h);
    out.raw.push_back(rep.value);
    out.corrected.push_back(whole_space_from_box(rep.value, m, r_eff));
    prev = std::move(rep.potential);
    have_prev = true;
  }
  if (out.corrected.size() >= 2) {
    const std::size_t k = out.corrected.size() - 1;
    const double h1 = out.h_values[k - 1], h2 = out.h_values[k];
    const double c1 = out.corrected[k - 1], c2 = out.corrected[k];
    out.value = c2 + (c2 - c1) * h2 / (h1 - h2);
  } else {
    out.value = out.corrected.back();
  }
  return out;
}

// Two-box fit: the same radial model with the effective radius treated as
// proportional to the box halfwidth; two box sizes pin both unknowns.
inline double whole_space_from_two_boxes(double c1, double L1, double c2,
                                         double L2, double m) {
  const double n = 3.0;
  const double S = 4.0 * 3.14159265358979323846;
  const double beta = (n - m) / (m - 1.0);
  auto y = [&](double c) {
    return std::pow(S * std::pow(beta, m - 1.0) / c, 1.0 / (m - 1.0));
  };
  const double y1 = y(c1), y2 = y(c2);
  const double ceff = (y1 - y2) / (std::pow(L2, -beta) - std::pow(L1, -beta));
  const double a_mb = y1 + ceff * std::pow(L1, -beta);
  if (!(a_mb > 0)) return 0.0;
  return S * std::pow(beta, m - 1.0) * std::pow(a_mb, -(m - 1.0));
}

// ---------------------------------------------------------------------------
// Operator capacity: flux energy of the level-q potential normalized by q.

inline CapacityReport compute_CA(const OperatorSpec& op, const CompactSet& F,
                                 double q, const GridSpec& gs,
                                 const SolverOptions& opt) {
  if (q == 0.0) {
    CapacityReport rep;
    rep.q = 0.0;
    rep.m = op.m;
    rep.box = gs;
    rep.potential = ScalarField(gs.make_grid(), 0.0);
    rep.energy_integrand = ScalarField(rep.potential.grid, 0.0);
    return rep;  // defined as zero at level zero
  }
  BumpSpec psi = default_bump(gs);
  return potential_v(op, F, q, psi, gs, opt);
}

// ---------------------------------------------------------------------------
// Homogeneity of the operator capacity in the level for odd homogeneous
// fluxes: C_A(F, t q) = |t|^{m-2} t C_A(F, q).

struct HomogeneityReport {
  double q = 1.0;
  double base_value = 0.0;
  std::vector<double> lambdas;
  std::vector<double> values;      // C_A(F, lambda q)
  std::vector<double> deviations;  // relative deviation from the scaling law
  double max_deviation = 0.0;
};

inline HomogeneityReport check_homogeneity(const OperatorSpec& op,
                                           const CompactSet& F, double q,
                                           const std::vector<double>& lambdas,
                                           const GridSpec& gs,
                                           const SolverOptions& opt) {
  if (!op.homogeneous())
    throw NotApplicableError(
        "check_homogeneity: flux is not homogeneous in the gradient");
  HomogeneityReport rep;
  rep.q = q;
  rep.lambdas = lambdas;
  const CapacityReport base = compute_CA(op, F, q, gs, opt);
  rep.base_value = base.value;
  for (double lam : lambdas) {
    const CapacityReport r = compute_CA(op, F, lam * q, gs, opt);
    rep.values.push_back(r.value);
    const double predicted =
        std::pow(std::abs(lam), op.m - 2.0) * lam * base.value;
    const double denom =
        std::abs(base.value) * std::pow(std::abs(lam), op.m - 1.0);
    const double dev = denom > 0 ? std::abs(r.value - predicted) / denom : 0.0;
    rep.deviations.push_back(dev);
    rep.max_deviation = std::max(rep.max_deviation, dev);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Scan of the uniform cube-capacity bound over a perforation: for sampled
// cube centers and radii, capacity of the holes clipped to the cube, per
// cube volume.  The fitted constant is the largest observed density.

struct ConditionBScanEntry {
  Vec3 center{0, 0, 0};
  double r = 0.0;
  int s = 0;
  double capacity = 0.0;  // whole-space corrected
  double density = 0.0;   // capacity / (2r)^n
};

struct ConditionBReport {
  std::vector<double> radii;
  std::vector<ConditionBScanEntry> entries;
  std::vector<double> per_radius_max;  // max density per radius
  double fitted_A = 0.0;
  double r_s = 0.0;  // smallest scanned radius
  std::vector<ConditionBScanEntry> violations;  // entries above expected_cap
};

struct ConditionBScanOptions {
  std::vector<double> radii;
  int centers_per_axis = 2;     // sampled offsets per axis within one period
  double local_margin = 1.0;    // outer margin of each local capacity box
  int target_nodes = 96;        // nodes per axis cap for local boxes
  double min_points_per_radius = 3.5;  // resolution of each hole
  double expected_cap = 0.0;    // 0 = report-only
  SolverOptions solver;
};

inline ConditionBReport scan_condition_B(const PerforationFamily& fam,
                                         const std::vector<int>& s_values,
                                         const GridSpec& gs_global, double m,
                                         const ConditionBScanOptions& opt) {
  ConditionBReport rep;
  rep.radii = opt.radii;
  if (opt.radii.empty())
    throw InvalidParameterError("condition scan: empty radius list");
  rep.r_s = *std::min_element(opt.radii.begin(), opt.radii.end());
  rep.per_radius_max.assign(opt.radii.size(), 0.0);

  const double W = gs_global.omega_halfwidth;
  for (int s : s_values) {
    const double d = fam.cell_size(s);
    const double a = fam.radius(s);
    for (std::size_t ri = 0; ri < opt.radii.size(); ++ri) {
      const double r = opt.radii[ri];
      for (int ox = 0; ox < opt.centers_per_axis; ++ox) {
        // hole-aligned centers staggered cell by cell along the diagonal, so
        // every sampled cube contains whole holes
        const double t = fam.anchor[0] + d * (ox + 0.5);
        const Vec3 x{t, t, t};
        bool fits = true;
        for (int dd = 0; dd < 3; ++dd)
          if (std::abs(x[dd]) + r + rep.r_s > W + 1e-12) fits = false;
        if (!fits) continue;

        if (fam.c0 == 0.0) {
          ConditionBScanEntry e;
          e.center = x;
          e.r = r;
          e.s = s;
          rep.entries.push_back(e);
          continue;
        }

        GridSpec local;
        local.center = x;
        local.omega_halfwidth = r + 2.0 * a;
        local.omega0_halfwidth = local.omega_halfwidth + opt.local_margin;
        double h = a / opt.min_points_per_radius;
        const double h_floor = 2.0 * local.omega0_halfwidth / (opt.target_nodes - 1);
        h = std::max(h, h_floor);
        if (h > a / 2.0) h = a / 2.0;
        local.h = h;

        CompactSet F = CompactSet::holes_in_cube({x, r}, fam, s, W);
        CapacityReport cm = compute_Cm(F, local, m, opt.solver);
        const double corrected = whole_space_from_box(
            cm.value, m, cube_effective_radius(local.omega0_halfwidth));
        ConditionBScanEntry e;
        e.center = x;
        e.r = r;
        e.s = s;
        e.capacity = corrected;
        e.density = corrected / std::pow(2.0 * r, 3);
        rep.entries.push_back(e);
        rep.per_radius_max[ri] = std::max(rep.per_radius_max[ri], e.density);
        rep.fitted_A = std::max(rep.fitted_A, e.density);
        if (opt.expected_cap > 0 && e.density > opt.expected_cap)
          rep.violations.push_back(e);
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Estimate diagnostics: empirical ratios for the sublevel-energy bound, the
// shell decay bound and the refined shell bound, with fitted constants.

struct EstimateReport {
  std::vector<double> mu_list;
  std::vector<double> sublevel_lhs;     // energy over the sublevel set
  std::vector<double> sublevel_ratio;   // lhs / (mu |q| (|q|+r)^{m-2} Cm)
  double K1 = 0.0;
  std::vector<double> shell_ratio;      // |v| / decay bound, outer shell
  double K2 = 0.0;
  double decay_exponent = 0.0;          // log-log slope of |v| vs distance
  std::vector<double> refined_ratio;    // |v| / (|q| (|q|+r)^{m-2} r^2)
  double K3 = 0.0;
  double cm_value = 0.0;
};

inline EstimateReport diagnostics_estimates(const OperatorSpec& op,
                                            const CompactSet& F, double q,
                                            const std::vector<double>& mu_list,
                                            double r, double A,
                                            const GridSpec& gs,
                                            const SolverOptions& opt) {
  EstimateReport rep;
  rep.mu_list = mu_list;

  const CapacityReport cm = compute_Cm(F, gs, op.m, opt);
  rep.cm_value = cm.value;

  // premises of the refined shell bound
  if (cm.value > A * std::pow(r, 3) + 1e-12)
    throw PremiseError("estimate diagnostics: capacity bound Cm(F) <= A r^n fails");
  if (std::pow(std::abs(q), op.m - 1.0) * r > 1.0 + 1e-12)
    throw PremiseError("estimate diagnostics: smallness bound |q|^{m-1} r <= 1 fails");

  const CapacityReport vrep = compute_CA(op, F, q, gs, opt);
  const ScalarField& v = vrep.potential;
  const Grid g = v.grid;

  if (q == 0.0) {
    rep.sublevel_lhs.assign(mu_list.size(), 0.0);
    rep.sublevel_ratio.assign(mu_list.size(), 0.0);
    return rep;
  }

  // sublevel energies by cell quadrature
  const auto& cq = cell_quad();
  const double Wq = cube(g.h) / 8.0;
  for (double mu : mu_list) {
    const double lhs = detail::sum_cells(g, [&](int i, int j, int k) {
      double un[8];
      detail::gather(v, g, i, j, k, un);
      double e = 0.0;
      for (int gp = 0; gp < 8; ++gp) {
        Vec3 p{0, 0, 0};
        double vg = 0;
        for (int a = 0; a < 8; ++a) {
          const double* dd = cq.dphi[gp][a];
          p[0] += dd[0] * un[a];
          p[1] += dd[1] * un[a];
          p[2] += dd[2] * un[a];
          vg += cq.phi[gp][a] * un[a];
        }
        p[0] /= g.h;
        p[1] /= g.h;
        p[2] /= g.h;
        if (std::abs(vg) <= mu) {
          const double gn = norm(p);
          e += std::pow(1.0 + gn, op.m - 2.0) * gn * gn;
        }
      }
      return Wq * e;
    });
    rep.sublevel_lhs.push_back(lhs);
    const double rhs = mu * std::abs(q) * std::pow(std::abs(q) + r, op.m - 2.0) *
                       cm.value;
    rep.sublevel_ratio.push_back(rhs > 0 ? lhs / rhs : 0.0);
    rep.K1 = std::max(rep.K1, rep.sublevel_ratio.back());
  }

  // shell samples
  const Cube K{F.center, r};
  std::vector<double> lr, lv;
  for (std::int64_t id = 0; id < g.size(); ++id) {
    const Vec3 x = g.x(id);
    const double dxm = std::max({std::abs(x[0] - F.center[0]),
                                 std::abs(x[1] - F.center[1]),
                                 std::abs(x[2] - F.center[2])});
    const double rho = dxm - r;  // distance to the cube (max-norm shells)
    const double av = std::abs(v[id]);
    if (dxm > r && dxm <= 3.0 * r && rho > 0.25 * g.h) {
      const double bound =
          std::abs(q) * std::pow(r / rho, 2.0) *
          std::pow(cm.value / std::pow(r, 3.0 - op.m), 1.0 / (op.m - 1.0));
      if (bound > 0) {
        rep.shell_ratio.push_back(av / bound);
        rep.K2 = std::max(rep.K2, rep.shell_ratio.back());
      }
      if (av > 1e-14) {
        lr.push_back(std::log(rho));
        lv.push_back(std::log(av));
      }
    }
    if (dxm > 1.5 * r && dxm <= 2.0 * r) {
      const double bound = std::abs(q) * std::pow(std::abs(q) + r, op.m - 2.0) * r * r;
      rep.refined_ratio.push_back(av / bound);
      rep.K3 = std::max(rep.K3, rep.refined_ratio.back());
    }
  }
  (void)K;

  // least-squares slope of log|v| against log distance
  if (lr.size() >= 8) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lr.size(); ++i) {
      sx += lr[i];
      sy += lv[i];
      sxx += lr[i] * lr[i];
      sxy += lr[i] * lv[i];
    }
    const double nn = static_cast<double>(lr.size());
    rep.decay_exponent = (nn * sxy - sx * sy) / (nn * sxx - sx * sx);
  }
  return rep;
}

}  // namespace perfhom
