#pragma once

// Subdivision schedules, cube decompositions of the inner box, the corrector
// built from localized capacitary potentials with level-set cut-offs, weak
// convergence probes, and the capacity-density estimator.

#include "perfhom/capacity.hpp"
#include "perfhom/core.hpp"
#include "perfhom/grid.hpp"
#include "perfhom/operator.hpp"
#include "perfhom/solver.hpp"

namespace perfhom {

// ---------------------------------------------------------------------------
// Schedule

enum class ScheduleMode { PaperFormula, DeskOverride };

struct Schedule {
  ScheduleMode mode = ScheduleMode::DeskOverride;
  std::vector<double> rho;
  std::vector<double> mu;           // mu_s = 1 / ln(1/rho_s)
  std::vector<long long> lambda;
  bool deviation_from_formula = false;

  int count() const { return static_cast<int>(rho.size()); }
  double rho_s(int s) const { return rho.at(static_cast<std::size_t>(s - 1)); }
  double mu_s(int s) const { return mu.at(static_cast<std::size_t>(s - 1)); }
  long long lambda_s(int s) const { return lambda.at(static_cast<std::size_t>(s - 1)); }
  double lambda_rho(int s) const { return double(lambda_s(s)) * rho_s(s); }
};

inline Schedule build_schedule(const std::vector<double>& rho_list, double m,
                               ScheduleMode mode,
                               const std::vector<long long>& lambda_override = {},
                               double condition_b_rs = 0.0) {
  if (rho_list.empty())
    throw InvalidScheduleError("schedule: empty scale list");
  for (std::size_t i = 0; i < rho_list.size(); ++i) {
    if (!(rho_list[i] > 0) || !(rho_list[i] < 1))
      throw InvalidScheduleError("schedule: scales must lie in (0,1)");
    if (i > 0 && !(rho_list[i] < rho_list[i - 1]))
      throw InvalidScheduleError("schedule: scales must strictly decrease");
    if (condition_b_rs > 0 && rho_list[i] < condition_b_rs - 1e-15)
      throw InvalidScheduleError(
          "schedule: scale fell below the validated perforation radius");
  }

  Schedule sch;
  sch.mode = mode;
  sch.rho = rho_list;
  for (double r : rho_list) sch.mu.push_back(1.0 / std::log(1.0 / r));

  if (mode == ScheduleMode::PaperFormula) {
    for (double r : rho_list) {
      const double ell = std::floor(std::log(1.0 / r));
      const double lam = std::floor(std::pow(ell, 2.0 * m));
      if (!(lam >= 1))
        throw InvalidScheduleError("schedule: formula gives no admissible block count");
      sch.lambda.push_back(static_cast<long long>(lam));
    }
  } else {
    if (lambda_override.size() != rho_list.size())
      throw InvalidScheduleError("schedule: override list length mismatch");
    sch.lambda = lambda_override;
    sch.deviation_from_formula = true;
  }

  for (std::size_t i = 0; i < sch.lambda.size(); ++i) {
    if (sch.lambda[i] < 3)
      throw InvalidScheduleError("schedule: block count must be >= 3");
    if (i > 0 && sch.lambda[i] < sch.lambda[i - 1])
      throw InvalidScheduleError("schedule: block counts must be nondecreasing");
    if (i > 0 && !(double(sch.lambda[i]) * sch.rho[i] <
                   double(sch.lambda[i - 1]) * sch.rho[i - 1]))
      throw InvalidScheduleError("schedule: lambda*rho must strictly decrease");
  }
  return sch;
}

// ---------------------------------------------------------------------------
// Subdivision of the inner box into lattice cubes of halfwidth lambda*rho.

struct Subdivision {
  int s = 1;
  double lambda_rho = 0.0;
  double rho = 0.0;
  long long lambda = 0;
  std::vector<std::array<long long, 3>> indices;  // admitted multi-indices
  double meas_omega = 0.0;
  double meas_union = 0.0;  // total measure of the admitted cubes
  double meas_leftover = 0.0;

  Vec3 center_of(std::size_t i) const {
    const auto& a = indices[i];
    const double p = 2.0 * lambda_rho;
    return {p * a[0], p * a[1], p * a[2]};
  }
  Cube cube_of(std::size_t i) const { return {center_of(i), lambda_rho}; }
  Cube inner_cube_of(std::size_t i) const {
    return {center_of(i), double(lambda - 2) * rho};
  }
  Cube big_cube_of(std::size_t i) const {
    return {center_of(i), 2.0 * lambda_rho};
  }
};

inline Subdivision build_subdivision(const Schedule& sch, int s,
                                     const GridSpec& gs) {
  Subdivision sub;
  sub.s = s;
  sub.rho = sch.rho_s(s);
  sub.lambda = sch.lambda_s(s);
  sub.lambda_rho = sch.lambda_rho(s);
  const double W = gs.omega_halfwidth;
  const double pitch = 2.0 * sub.lambda_rho;
  if (!(pitch <= 2.0 * W))
    throw DegenerateSubdivisionError("subdivision: cube exceeds the inner box");

  const long long kmax = static_cast<long long>(std::floor(W / pitch)) + 1;
  for (long long i = -kmax; i <= kmax; ++i)
    for (long long j = -kmax; j <= kmax; ++j)
      for (long long k = -kmax; k <= kmax; ++k) {
        const Vec3 c{pitch * i, pitch * j, pitch * k};
        bool ok = true;
        for (int d = 0; d < 3; ++d)
          if (std::abs(c[d]) + 2.0 * sub.lambda_rho > W + 1e-12) ok = false;
        if (ok) sub.indices.push_back({i, j, k});
      }
  if (sub.indices.empty())
    throw DegenerateSubdivisionError("subdivision: no interior cube fits");

  sub.meas_omega = cube(2.0 * W);
  sub.meas_union = double(sub.indices.size()) * cube(pitch);
  sub.meas_leftover = sub.meas_omega - sub.meas_union;
  return sub;
}

// ---------------------------------------------------------------------------
// Corrector

struct CorrectorSummand {
  std::array<long long, 3> alpha{0, 0, 0};
  double q_mean = 0.0;     // cell mean of q_s over the cube
  double q_level = 0.0;    // level actually used for the cut-off potential
  double mu_alpha = 0.0;   // cut-off threshold
  bool primed = false;     // |q_mean| above the 2*mu_s threshold
  bool empty_set = false;  // no holes inside the inner cube
  double support_extent = 0.0;  // max-norm radius of the cut-off support
  bool contained = true;   // support inside the (lambda-1)*rho cube
};

struct CorrectorField {
  int s = 1;
  double mu_s = 0.0;
  ScalarField r;  // the assembled corrector
  std::vector<CorrectorSummand> summands;
  bool support_warning = false;
  std::vector<std::pair<std::size_t, std::size_t>> overlapping_pairs;
  double grad_lm = 0.0;  // seminorm diagnostics filled by the caller
};

// Potentials are solved on the full outer box per summand; the cut-off is the
// clamped level-set ramp of the potential at the working level.
inline CorrectorField build_corrector(const OperatorSpec& op,
                                      const Subdivision& sub, const Schedule& sch,
                                      const ScalarField& q_field,
                                      const DomainMask& holes, const BumpSpec& psi,
                                      const GridSpec& gs,
                                      const SolverOptions& opt) {
  const Grid g = gs.make_grid();
  if (!holes.grid.same(g))
    throw InvalidInputError("corrector: hole mask grid mismatch");
  if (!q_field.grid.same(g))
    throw InvalidInputError("corrector: q field grid mismatch");

  CorrectorField out;
  out.s = sub.s;
  out.mu_s = sch.mu_s(sub.s);
  out.r = ScalarField(g, 0.0);

  struct SupportBox {
    int lo[3] = {1 << 30, 1 << 30, 1 << 30};
    int hi[3] = {-1, -1, -1};
    bool empty() const { return hi[0] < 0; }
    bool intersects(const SupportBox& o) const {
      if (empty() || o.empty()) return false;
      for (int d = 0; d < 3; ++d)
        if (hi[d] < o.lo[d] || o.hi[d] < lo[d]) return false;
      return true;
    }
  };
  std::vector<SupportBox> boxes(sub.indices.size());

  for (std::size_t ai = 0; ai < sub.indices.size(); ++ai) {
    CorrectorSummand sm;
    sm.alpha = sub.indices[ai];
    const Cube ks = sub.cube_of(ai);
    const Cube ksp = sub.inner_cube_of(ai);
    sm.q_mean = cell_mean(q_field, ks);
    sm.primed = std::abs(sm.q_mean) > 2.0 * out.mu_s;
    sm.q_level = sm.primed ? sm.q_mean : 2.0 * out.mu_s;
    sm.mu_alpha = out.mu_s * std::max(1.0, std::abs(sm.q_mean));

    // holes inside the shrunken cube
    std::vector<std::uint8_t> fmask(static_cast<std::size_t>(g.size()), 0);
    std::int64_t fcount = 0;
    for (std::int64_t id = 0; id < g.size(); ++id) {
      if (holes[id] == NodeClass::Hole && ksp.contains(g.x(id))) {
        fmask[static_cast<std::size_t>(id)] = 1;
        ++fcount;
      }
    }
    if (fcount == 0) {
      sm.empty_set = true;
      out.summands.push_back(sm);
      continue;  // zero potential, zero summand
    }
    CompactSet F = CompactSet::from_nodes(g, std::move(fmask));

    // cut-off potential at the working level
    const CapacityReport wrep = potential_v(op, F, sm.q_level, psi, gs, opt);
    const ScalarField& w = wrep.potential;

    // summand potential at the raw mean level (same field when primed)
    const ScalarField* vfield = &w;
    CapacityReport vrep;
    if (!sm.primed && sm.q_mean != sm.q_level) {
      if (sm.q_mean == 0.0) {
        out.summands.push_back(sm);
        continue;  // weight level is zero, summand vanishes
      }
      vrep = potential_v(op, F, sm.q_mean, psi, gs, opt);
      vfield = &vrep.potential;
    }

    // accumulate v * cutoff and record the support box
    SupportBox& bb = boxes[ai];
    const double half = sm.mu_alpha / 2.0;
    for (std::int64_t id = 0; id < g.size(); ++id) {
      const double aw = std::abs(w[id]);
      if (aw <= half) continue;
      const double cutoff = std::min(aw - half, half) / half;
      out.r[id] += (*vfield)[id] * cutoff;
      int i, j, k;
      g.decode(id, i, j, k);
      const int c[3] = {i, j, k};
      for (int d = 0; d < 3; ++d) {
        bb.lo[d] = std::min(bb.lo[d], c[d]);
        bb.hi[d] = std::max(bb.hi[d], c[d]);
      }
      const Vec3 x = g.x(id);
      const Vec3 cc = sub.center_of(ai);
      sm.support_extent = std::max(
          sm.support_extent, std::max({std::abs(x[0] - cc[0]), std::abs(x[1] - cc[1]),
                                       std::abs(x[2] - cc[2])}));
    }
    sm.contained = sm.support_extent <= double(sub.lambda - 1) * sub.rho + 1e-12;
    if (!sm.contained) out.support_warning = true;
    out.summands.push_back(sm);
  }

  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (std::size_t j = i + 1; j < boxes.size(); ++j)
      if (boxes[i].intersects(boxes[j])) {
        out.overlapping_pairs.emplace_back(i, j);
        out.support_warning = true;
      }
  return out;
}

// ---------------------------------------------------------------------------
// Weak-pairing probe: flux of the corrector gradient paired against test
// fields that vanish on the holes and outside the inner box.

struct ProbeReport {
  std::vector<double> pairings;  // one per test field
  double max_abs = 0.0;
};

inline void require_admissible_test_field(const ScalarField& z,
                                          const DomainMask& holes,
                                          const GridSpec& gs) {
  const Grid& g = z.grid;
  double vmax = 0.0;
  for (double x : z.v) vmax = std::max(vmax, std::abs(x));
  const double tol = 1e-12 * std::max(1.0, vmax);
  for (std::int64_t id = 0; id < g.size(); ++id) {
    if (holes[id] == NodeClass::Hole && std::abs(z[id]) > tol)
      throw InvalidTestFunctionError("probe: test field does not vanish on holes");
    if (!gs.inside_omega(g.x(id)) && std::abs(z[id]) > tol)
      throw InvalidTestFunctionError(
          "probe: test field does not vanish outside the inner box");
  }
}

inline ProbeReport convergence_probe(const OperatorSpec& op,
                                     const CorrectorField& corr,
                                     const std::vector<ScalarField>& z_battery,
                                     const DomainMask& holes, const GridSpec& gs) {
  ProbeReport rep;
  const Grid& g = corr.r.grid;
  const auto& cq = cell_quad();
  const double W = cube(g.h) / 8.0;
  for (const ScalarField& z : z_battery) {
    if (!z.grid.same(g))
      throw InvalidInputError("probe: test field grid mismatch");
    require_admissible_test_field(z, holes, gs);
    const double pairing = detail::sum_cells(g, [&](int i, int j, int k) {
      double rn[8], zn[8];
      detail::gather(corr.r, g, i, j, k, rn);
      detail::gather(z, g, i, j, k, zn);
      double e = 0.0;
      for (int gp = 0; gp < 8; ++gp) {
        Vec3 pr{0, 0, 0}, pz{0, 0, 0};
        for (int a = 0; a < 8; ++a) {
          const double* d = cq.dphi[gp][a];
          pr[0] += d[0] * rn[a];
          pr[1] += d[1] * rn[a];
          pr[2] += d[2] * rn[a];
          pz[0] += d[0] * zn[a];
          pz[1] += d[1] * zn[a];
          pz[2] += d[2] * zn[a];
        }
        for (int d = 0; d < 3; ++d) {
          pr[d] /= g.h;
          pz[d] /= g.h;
        }
        const Vec3 xg = detail::gauss_x(g, i, j, k, gp);
        e += dot(eval_flux(op, xg, pr), pz);
      }
      return W * e;
    });
    rep.pairings.push_back(pairing);
    rep.max_abs = std::max(rep.max_abs, std::abs(pairing));
  }
  return rep;
}

// Fixed battery of smooth lobes multiplied by a ramp vanishing on the holes.
inline std::vector<ScalarField> probe_battery(const DomainMask& holes,
                                              const GridSpec& gs, int count = 10) {
  const Grid g = gs.make_grid();
  const double W = gs.omega_halfwidth;

  // hole-distance ramp: 0 on holes and their face neighbors, 1 beyond 3 cells
  std::vector<double> dist(static_cast<std::size_t>(g.size()), 3.0);
  parallel_for(g.size(), [&](std::int64_t id) {
    if (holes[id] == NodeClass::Hole) dist[static_cast<std::size_t>(id)] = 0.0;
  });
  for (int sweep = 0; sweep < 3; ++sweep) {
    std::vector<double> next(dist);
    parallel_for(g.size(), [&](std::int64_t id) {
      int i, j, k;
      g.decode(id, i, j, k);
      double best = dist[static_cast<std::size_t>(id)];
      static const int off[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                    {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
      for (const auto& o : off) {
        const int ii = i + o[0], jj = j + o[1], kk = k + o[2];
        if (ii < 0 || jj < 0 || kk < 0 || ii >= g.nn[0] || jj >= g.nn[1] ||
            kk >= g.nn[2])
          continue;
        best = std::min(best, dist[static_cast<std::size_t>(g.idx(ii, jj, kk))] + 1.0);
      }
      next[static_cast<std::size_t>(id)] = best;
    });
    dist.swap(next);
  }

  // fixed lobe centers along a deterministic low-discrepancy-ish pattern
  std::vector<ScalarField> battery;
  for (int kf = 0; kf < count; ++kf) {
    const double t = (kf + 1.0) / (count + 1.0);
    const Vec3 c{W * (2 * t - 1) * 0.6, W * (2 * ((kf * 7) % count + 1.0) / (count + 1.0) - 1) * 0.6,
                 W * (2 * ((kf * 3) % count + 1.0) / (count + 1.0) - 1) * 0.6};
    const double rad = 0.35 * W;
    ScalarField z(g);
    parallel_for(g.size(), [&](std::int64_t id) {
      const Vec3 x = g.x(id);
      if (!gs.inside_omega(x)) return;
      // keep one cell layer of zeros inside the inner box boundary
      for (int d = 0; d < 3; ++d)
        if (std::abs(x[d]) > W - g.h + 1e-12) return;
      const double rr = std::sqrt(sq(x[0] - c[0]) + sq(x[1] - c[1]) + sq(x[2] - c[2])) / rad;
      if (rr >= 1.0) return;
      const double lobe = cube(1.0 - rr * rr);
      const double ramp = std::clamp(dist[static_cast<std::size_t>(id)] - 1.0, 0.0, 2.0) / 2.0;
      z[id] = lobe * ramp;
    });
    battery.push_back(std::move(z));
  }
  return battery;
}

// ---------------------------------------------------------------------------
// Capacity density: per-volume operator capacity of the holes in shrinking
// cubes, inner limit over the perforation ladder, outer limit over the cube
// radius.

struct DensitySample {
  Vec3 x{0, 0, 0};
  double q = 0.0;
  double r = 0.0;
  int s = 0;
  double c_est = 0.0;
  int holes = 0;
};

struct DensityTable {
  std::vector<DensitySample> samples;
  std::vector<Vec3> x_samples;
  std::vector<double> q_samples;
  std::vector<double> r_ladder;
  std::vector<int> s_ladder;
  // per (x, q): inner-limit stabilized values per r, then r-extrapolation
  std::vector<std::vector<double>> c_xq;  // [x][q], extrapolated
  bool stabilized = true;
  double stabilization_tol = 0.02;
  double uniformity_spread = 0.0;   // relative spread across x at fixed q
  double homogeneity_dev = 0.0;     // q-transport deviation for homogeneous ops
  double K6 = 0.0;                  // growth constant fitted at |q| = max
  double mean_c1 = 0.0;             // x-averaged level-1 density

  const DensitySample* find(std::size_t xi, double q, double r, int s) const {
    for (const auto& smp : samples) {
      if (smp.s == s && smp.q == q && smp.r == r &&
          norm(Vec3{smp.x[0] - x_samples[xi][0], smp.x[1] - x_samples[xi][1],
                    smp.x[2] - x_samples[xi][2]}) < 1e-12)
        return &smp;
    }
    return nullptr;
  }
};

struct DensityOptions {
  double stabilization_rel = 0.02;  // inner-limit stabilization threshold
  double local_margin = 1.0;
  int target_nodes = 96;
  double min_points_per_radius = 3.5;
  SolverOptions solver;
};

inline DensityTable estimate_density(const OperatorSpec& op,
                                     const PerforationFamily& fam,
                                     const GridSpec& gs_global,
                                     const std::vector<Vec3>& x_samples,
                                     const std::vector<double>& q_samples,
                                     const std::vector<double>& r_ladder,
                                     const std::vector<int>& s_ladder,
                                     const DensityOptions& opt) {
  DensityTable tab;
  tab.x_samples = x_samples;
  tab.q_samples = q_samples;
  tab.r_ladder = r_ladder;
  tab.s_ladder = s_ladder;
  tab.stabilization_tol = opt.stabilization_rel;

  const double W = gs_global.omega_halfwidth;
  for (double r : r_ladder)
    for (const Vec3& x : x_samples)
      for (int d = 0; d < 3; ++d)
        if (std::abs(x[d]) + r >= W)
          throw InvalidParameterError(
              "density: sample cube escapes the inner box");

  tab.c_xq.assign(x_samples.size(), std::vector<double>(q_samples.size(), 0.0));

  for (std::size_t xi = 0; xi < x_samples.size(); ++xi) {
    const Vec3 x = x_samples[xi];
    for (std::size_t qi = 0; qi < q_samples.size(); ++qi) {
      const double q = q_samples[qi];
      if (q == 0.0) {
        tab.c_xq[xi][qi] = 0.0;  // capacity at level zero vanishes
        continue;
      }
      std::vector<double> per_r;
      for (double r : r_ladder) {
        // inner ladder over the perforation index
        double prev = 0.0, value = 0.0;
        bool have_prev = false, settled = false;
        for (int s : s_ladder) {
          const double a = fam.radius(s);
          GridSpec local;
          local.center = x;
          local.omega_halfwidth = r + 2.0 * a;
          local.omega0_halfwidth = local.omega_halfwidth + opt.local_margin;
          double h = a / opt.min_points_per_radius;
          const double h_floor =
              2.0 * local.omega0_halfwidth / (opt.target_nodes - 1);
          h = std::max(h, h_floor);
          if (h > a / 2.0) h = a / 2.0;
          local.h = h;

          CompactSet F = CompactSet::holes_in_cube({x, r}, fam, s, W);
          const auto realized = F.realize(local);
          int nholes = 0;
          for (auto b : realized) nholes += b;
          CapacityReport ca = compute_CA(op, F, q, local, opt.solver);
          double cap = ca.value;
          if (op.homogeneous()) {
            // correct the box bias through the scaling-equivalent capacity
            const double qfac = std::pow(std::abs(q), op.m - 2.0) * q;
            const double cm_equiv = cap / qfac;
            cap = qfac * whole_space_from_box(
                             cm_equiv, op.m,
                             cube_effective_radius(local.omega0_halfwidth));
          }
          const double c_est = cap / cube(2.0 * r);

          DensitySample smp;
          smp.x = x;
          smp.q = q;
          smp.r = r;
          smp.s = s;
          smp.c_est = c_est;
          smp.holes = nholes > 0 ? 1 : 0;
          tab.samples.push_back(smp);

          if (have_prev && std::abs(c_est - prev) <=
                               opt.stabilization_rel * std::max(std::abs(c_est), 1e-30))
            settled = true;
          prev = c_est;
          value = c_est;
          have_prev = true;
        }
        if (!settled && s_ladder.size() > 1) tab.stabilized = false;
        per_r.push_back(value);
      }
      // outer limit: linear extrapolation to r = 0 from the two smallest radii
      double c_final;
      if (per_r.size() >= 2) {
        std::vector<std::size_t> order(per_r.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
          return r_ladder[a] < r_ladder[b];
        });
        const double r1 = r_ladder[order[0]], r2 = r_ladder[order[1]];
        const double c1 = per_r[order[0]], c2 = per_r[order[1]];
        c_final = (r2 * c1 - r1 * c2) / (r2 - r1);
      } else {
        c_final = per_r.back();
      }
      tab.c_xq[xi][qi] = c_final;
    }
  }

  // uniformity across sample points at each level
  for (std::size_t qi = 0; qi < q_samples.size(); ++qi) {
    if (q_samples[qi] == 0.0) continue;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo, mean = 0.0;
    for (std::size_t xi = 0; xi < x_samples.size(); ++xi) {
      lo = std::min(lo, tab.c_xq[xi][qi]);
      hi = std::max(hi, tab.c_xq[xi][qi]);
      mean += tab.c_xq[xi][qi];
    }
    mean /= double(x_samples.size());
    if (mean != 0)
      tab.uniformity_spread = std::max(tab.uniformity_spread, (hi - lo) / std::abs(mean));
  }

  // homogeneous transport of the q-dependence, and the level-1 mean
  double qref = 0.0;
  std::size_t qref_i = 0;
  for (std::size_t qi = 0; qi < q_samples.size(); ++qi)
    if (q_samples[qi] != 0.0 && (qref == 0.0 || std::abs(q_samples[qi] - 1.0) <
                                                    std::abs(qref - 1.0))) {
      qref = q_samples[qi];
      qref_i = qi;
    }
  if (qref != 0.0) {
    const double qfac_ref = std::pow(std::abs(qref), op.m - 2.0) * qref;
    for (std::size_t xi = 0; xi < x_samples.size(); ++xi) {
      tab.mean_c1 += tab.c_xq[xi][qref_i] / qfac_ref;
      for (std::size_t qi = 0; qi < q_samples.size(); ++qi) {
        const double q = q_samples[qi];
        if (q == 0.0 || qi == qref_i) continue;
        const double predicted =
            std::pow(std::abs(q / qref), op.m - 2.0) * (q / qref) *
            tab.c_xq[xi][qref_i];
        if (predicted != 0)
          tab.homogeneity_dev =
              std::max(tab.homogeneity_dev,
                       std::abs(tab.c_xq[xi][qi] - predicted) / std::abs(predicted));
      }
    }
    tab.mean_c1 /= double(x_samples.size());
  }

  // growth constant fitted at the largest sampled level, checked elsewhere
  double qmax = 0.0;
  std::size_t qmax_i = 0;
  for (std::size_t qi = 0; qi < q_samples.size(); ++qi)
    if (std::abs(q_samples[qi]) > std::abs(qmax)) {
      qmax = q_samples[qi];
      qmax_i = qi;
    }
  if (qmax != 0.0) {
    for (std::size_t xi = 0; xi < x_samples.size(); ++xi)
      tab.K6 = std::max(tab.K6, std::abs(tab.c_xq[xi][qmax_i]) /
                                    std::pow(std::abs(qmax), op.m - 1.0));
  }
  return tab;
}

// Density handle from the table: homogeneous transport of the x-averaged
// level-1 value for homogeneous fluxes, else interpolation in q.
inline std::shared_ptr<const DensityHandle> make_density_handle(
    const DensityTable& tab, const OperatorSpec& op) {
  if (op.homogeneous())
    return std::make_shared<PowerDensity>(tab.mean_c1, op.m);
  std::vector<double> qs, cs;
  for (std::size_t qi = 0; qi < tab.q_samples.size(); ++qi) {
    double mean = 0.0;
    for (std::size_t xi = 0; xi < tab.x_samples.size(); ++xi)
      mean += tab.c_xq[xi][qi];
    qs.push_back(tab.q_samples[qi]);
    cs.push_back(mean / double(tab.x_samples.size()));
  }
  return std::make_shared<TableDensity>(std::move(qs), std::move(cs));
}

// ---------------------------------------------------------------------------
// A-priori energy bound for the perforated solves, computed once from the
// data.  Deliberately generous constants; the solves must stay below it.

inline double energy_bound_R(const OperatorSpec& op, const ScalarField& f,
                             const std::array<ScalarField, 3>* fvec,
                             const GridSpec& gs) {
  const double m = op.m;
  const double mp = m / (m - 1.0);
  const Norms nf = norms(f, m);
  double fv_mp = 0.0;
  if (fvec && !(*fvec)[0].v.empty()) {
    const Grid& g = f.grid;
    fv_mp = parallel_sum(g.size(), [&](std::int64_t id) {
      const double mag = std::sqrt(sq((*fvec)[0][id]) + sq((*fvec)[1][id]) +
                                   sq((*fvec)[2][id]));
      return std::pow(mag, mp) * cube(g.h);
    });
  }
  const double grad_f_m = std::pow(nf.w1p_semi, m);
  const double f_m = std::pow(nf.lp, m);
  const double meas = cube(2.0 * gs.omega0_halfwidth);

  // coercivity floor: a(x,p).p >= nu1 (c_low |p|^m - 1)
  const double c_low = std::pow(2.0, -std::abs(m - 2.0));
  const double nu1 = op.nu1 * c_low;

  // Young splitting of the data pairings against the coercive term
  const double eps1 = nu1 * mp / 8.0, eps2 = nu1 * m / 8.0;
  const double grad_bound =
      (4.0 / nu1) * (std::pow(eps1, 1.0 - m) * std::pow(op.nu2, m) *
                         (grad_f_m + meas) / m +
                     std::pow(eps2, -1.0 / (m - 1.0)) * fv_mp / mp + fv_mp +
                     std::pow(op.nu2, mp) * (grad_f_m + meas) + op.nu1 * meas) +
      grad_f_m;

  const double poincare = 2.0 * gs.omega0_halfwidth;
  const double u_m = std::pow(
      nf.lp + poincare * std::pow(grad_bound + grad_f_m, 1.0 / m), m);
  (void)f_m;
  return 1.5 * (grad_bound + u_m) + 1.0;
}

}  // namespace perfhom
