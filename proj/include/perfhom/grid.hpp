#pragma once

// Geometry and field toolbox: the plateau bump on the inner box, periodic
// perforation masks, kernel averaging, cube means and discrete norms.

#include "perfhom/core.hpp"

namespace perfhom {

// ---------------------------------------------------------------------------
// BumpSpec: tensor ramp equal to 1 on the closed inner box, 0 within one cell
// of the outer boundary, transitioning with a cubic smoothstep.

struct BumpSpec {
  double transition_width = 1.0;
  int poly_order = 3;

  void validate(const GridSpec& gs) const {
    if (!(transition_width > 0))
      throw InvalidParameterError("BumpSpec: transition width must be positive");
    if (poly_order < 3)
      throw InvalidParameterError("BumpSpec: ramp order must be >= 3");
    const double avail = gs.omega0_halfwidth - gs.omega_halfwidth - gs.h;
    if (transition_width > avail + 1e-12)
      throw InvalidParameterError("BumpSpec: transition width exceeds box margin");
  }

  // 1D profile: 1 for t <= 0, 0 for t >= 1, C^2 ramp between.
  static double ramp(double t) {
    if (t <= 0) return 1.0;
    if (t >= 1) return 0.0;
    const double u = 1.0 - t;
    return u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
  }

  double value(const Vec3& x, const GridSpec& gs) const {
    double v = 1.0;
    for (int d = 0; d < 3; ++d) {
      const double t =
          (std::abs(x[d] - gs.center[d]) - gs.omega_halfwidth) / transition_width;
      v *= ramp(t);
    }
    return v;
  }

  ScalarField make_field(const GridSpec& gs) const {
    validate(gs);
    Grid g = gs.make_grid();
    ScalarField psi(g);
    parallel_for(g.size(), [&](std::int64_t id) { psi[id] = value(g.x(id), gs); });
    return psi;
  }
};

inline BumpSpec default_bump(const GridSpec& gs) {
  BumpSpec b;
  b.transition_width = std::min(1.0, gs.omega0_halfwidth - gs.omega_halfwidth - 2 * gs.h);
  if (b.transition_width <= 0) b.transition_width = 0.5 * (gs.omega0_halfwidth - gs.omega_halfwidth);
  return b;
}

// ---------------------------------------------------------------------------
// PerforationFamily: periodic lattice of closed holes (balls or cubes) with
// cell pitch d_s and radius a_s = c0 * d_s^gamma.

enum class HoleShape { Ball, Cube };

struct PerforationFamily {
  std::vector<double> cell_sizes;  // d_s, strictly decreasing
  double c0 = 0.0;
  double gamma = 3.0;  // n/(n-m) for n=3, m=2
  HoleShape shape = HoleShape::Ball;
  Vec3 anchor{0, 0, 0};  // lattice offset; hole centers at anchor + d*(k+1/2)

  static double critical_gamma(int n, double m) {
    return double(n) / (double(n) - m);
  }

  void validate() const {
    if (cell_sizes.empty())
      throw InvalidParameterError("perforation: empty cell-size ladder");
    for (std::size_t i = 0; i + 1 < cell_sizes.size(); ++i)
      if (!(cell_sizes[i + 1] < cell_sizes[i]))
        throw InvalidParameterError("perforation: cell sizes must strictly decrease");
    for (double d : cell_sizes) {
      if (!(d > 0)) throw InvalidParameterError("perforation: cell size must be positive");
      if (c0 > 0 && !(radius_for(d) < 0.5 * d))
        throw InvalidParameterError("perforation: holes must stay inside cells (a < d/2)");
    }
  }

  double cell_size(int s) const {
    if (s < 1 || s > static_cast<int>(cell_sizes.size()))
      throw InvalidParameterError("perforation: ladder index out of range");
    return cell_sizes[static_cast<std::size_t>(s - 1)];
  }
  double radius_for(double d) const { return c0 * std::pow(d, gamma); }
  double radius(int s) const { return radius_for(cell_size(s)); }
  int count() const { return static_cast<int>(cell_sizes.size()); }
};

// Hole centers whose closed hole fits inside the inner box.
inline std::vector<Vec3> hole_centers(const PerforationFamily& fam, int s,
                                      const GridSpec& gs) {
  std::vector<Vec3> out;
  if (fam.c0 == 0.0) return out;
  if (norm(gs.center) != 0.0)
    throw InvalidParameterError("perforation: inner box must be origin-centered");
  const double d = fam.cell_size(s);
  const double a = fam.radius(s);
  const double W = gs.omega_halfwidth;
  const int kmax = static_cast<int>(std::ceil(W / d)) + 1;
  for (int i = -kmax; i <= kmax; ++i)
    for (int j = -kmax; j <= kmax; ++j)
      for (int k = -kmax; k <= kmax; ++k) {
        Vec3 c{fam.anchor[0] + d * (i + 0.5), fam.anchor[1] + d * (j + 0.5),
               fam.anchor[2] + d * (k + 0.5)};
        bool fits = true;
        for (int t = 0; t < 3; ++t)
          if (std::abs(c[t]) + a > W + 1e-12) fits = false;
        if (fits) out.push_back(c);
      }
  return out;
}

// Node classification for the perforated inner box.  Holes are the closed
// a_s-neighborhoods (max-norm for cube holes) of the lattice centers.
inline DomainMask build_perforation(const PerforationFamily& fam, int s,
                                    const GridSpec& gs) {
  fam.validate();
  Grid g = gs.make_grid();
  DomainMask mask(g);
  mask.s_index = s;

  const double W = gs.omega_halfwidth;
  parallel_for(g.size(), [&](std::int64_t id) {
    const Vec3 x = g.x(id);
    if (std::abs(x[0]) > W + 1e-12 || std::abs(x[1]) > W + 1e-12 ||
        std::abs(x[2]) > W + 1e-12)
      mask.cls[static_cast<std::size_t>(id)] = NodeClass::OutsideOmega;
  });

  if (fam.c0 == 0.0) return mask;  // empty perforation

  const double d = fam.cell_size(s);
  const double a = fam.radius(s);
  mask.cell_size = d;
  mask.hole_radius = a;
  if (a < 2.0 * g.h && fam.shape == HoleShape::Ball)
    throw ResolutionError("perforation: hole radius " + std::to_string(a) +
                          " under-resolved, need spacing h <= " +
                          std::to_string(a / 2.0) + " (current h = " +
                          std::to_string(g.h) + ")");
  if (a < g.h && fam.shape == HoleShape::Cube)
    throw ResolutionError("perforation: cube hole halfwidth " + std::to_string(a) +
                          " under-resolved, need spacing h <= " + std::to_string(a));

  const auto centers = hole_centers(fam, s, gs);
  parallel_for(g.size(), [&](std::int64_t id) {
    auto& c = mask.cls[static_cast<std::size_t>(id)];
    if (c != NodeClass::Interior) return;
    const Vec3 x = g.x(id);
    // nearest lattice center, then verify it is one of the admitted holes
    Vec3 nc{fam.anchor[0] + d * (std::floor((x[0] - fam.anchor[0]) / d) + 0.5),
            fam.anchor[1] + d * (std::floor((x[1] - fam.anchor[1]) / d) + 0.5),
            fam.anchor[2] + d * (std::floor((x[2] - fam.anchor[2]) / d) + 0.5)};
    double dist;
    if (fam.shape == HoleShape::Ball) {
      dist = std::sqrt(sq(x[0] - nc[0]) + sq(x[1] - nc[1]) + sq(x[2] - nc[2]));
    } else {
      dist = std::max({std::abs(x[0] - nc[0]), std::abs(x[1] - nc[1]),
                       std::abs(x[2] - nc[2])});
    }
    if (dist <= a + 1e-12) {
      bool admitted = true;
      for (int t = 0; t < 3; ++t)
        if (std::abs(nc[t]) + a > gs.omega_halfwidth + 1e-12) admitted = false;
      if (admitted) c = NodeClass::Hole;
    }
  });
  (void)centers;
  return mask;
}

// ---------------------------------------------------------------------------
// MollifierSpec: radial polynomial kernel (1-t^2)^3 on |t|<1.  The discrete
// normalization is recomputed per (scale, grid) pair so constants are exact
// fixed points of the averaging.

struct MollifierSpec {
  // kernel profile before normalization
  static double profile(double t) {
    const double u = 1.0 - t * t;
    return (std::abs(t) < 1.0) ? u * u * u : 0.0;
  }

  // integral of profile(|x|) over R^3 is 64*pi/315
  static double analytic_constant() {
    return 315.0 / (64.0 * 3.14159265358979323846);
  }

  double value(double t) const { return analytic_constant() * profile(t); }
  double sup_bound() const { return analytic_constant(); }
};

// Kernel average at scale hk >= grid spacing.  Near the box boundary the
// kernel mass is renormalized over the available nodes.
inline ScalarField mollify(const ScalarField& u, double hk,
                           const MollifierSpec& kernel = {}) {
  const Grid& g = u.grid;
  if (!(hk >= g.h - 1e-14))
    throw InvalidParameterError("mollify: scale must be >= grid spacing");
  const int R = static_cast<int>(std::floor(hk / g.h + 1e-12));

  // precompute the stencil of kernel weights
  std::vector<double> w;
  std::vector<std::array<int, 3>> off;
  for (int dk = -R; dk <= R; ++dk)
    for (int dj = -R; dj <= R; ++dj)
      for (int di = -R; di <= R; ++di) {
        const double t = g.h * std::sqrt(double(di) * di + double(dj) * dj +
                                         double(dk) * dk) / hk;
        const double kv = kernel.profile(t);
        if (kv > 0) {
          w.push_back(kv);
          off.push_back({di, dj, dk});
        }
      }

  ScalarField out(g);
  parallel_for(g.size(), [&](std::int64_t id) {
    int i, j, k;
    g.decode(id, i, j, k);
    double num = 0.0, den = 0.0;
    for (std::size_t s = 0; s < w.size(); ++s) {
      const int ii = i + off[s][0], jj = j + off[s][1], kk = k + off[s][2];
      if (ii < 0 || jj < 0 || kk < 0 || ii >= g.nn[0] || jj >= g.nn[1] ||
          kk >= g.nn[2])
        continue;
      num += w[s] * u[g.idx(ii, jj, kk)];
      den += w[s];
    }
    out[id] = den > 0 ? num / den : u[id];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Cube means and norms

struct Cube {
  Vec3 center{0, 0, 0};
  double halfwidth = 0.0;

  bool contains(const Vec3& x, double tol = 1e-12) const {
    return std::abs(x[0] - center[0]) <= halfwidth + tol &&
           std::abs(x[1] - center[1]) <= halfwidth + tol &&
           std::abs(x[2] - center[2]) <= halfwidth + tol;
  }
};

// Node index range of the closed cube, clamped to the grid.
inline std::array<std::array<int, 2>, 3> cube_node_range(const Grid& g,
                                                         const Cube& c) {
  std::array<std::array<int, 2>, 3> r;
  for (int d = 0; d < 3; ++d) {
    const double lo = c.center[d] - c.halfwidth - g.origin[d];
    const double hi = c.center[d] + c.halfwidth - g.origin[d];
    r[d][0] = std::max(0, static_cast<int>(std::ceil(lo / g.h - 1e-9)));
    r[d][1] = std::min(g.nn[d] - 1, static_cast<int>(std::floor(hi / g.h + 1e-9)));
  }
  return r;
}

inline double cell_mean(const ScalarField& u, const Cube& c) {
  const Grid& g = u.grid;
  const auto r = cube_node_range(g, c);
  double sum = 0.0;
  std::int64_t count = 0;
  for (int k = r[2][0]; k <= r[2][1]; ++k)
    for (int j = r[1][0]; j <= r[1][1]; ++j)
      for (int i = r[0][0]; i <= r[0][1]; ++i) {
        sum += u[g.idx(i, j, k)];
        ++count;
      }
  if (count == 0)
    throw EmptyCellError("cell_mean: cube contains no grid nodes");
  return sum / double(count);
}

// Central-difference gradient, one-sided at the box boundary.
inline Vec3 node_gradient(const ScalarField& u, int i, int j, int k) {
  const Grid& g = u.grid;
  auto d1 = [&](int a, int b, int c, int axis) {
    int ip[3] = {a, b, c}, im[3] = {a, b, c};
    ip[axis] = std::min(ip[axis] + 1, g.nn[axis] - 1);
    im[axis] = std::max(im[axis] - 1, 0);
    const double dd = (ip[axis] - im[axis]) * g.h;
    return dd > 0 ? (u[g.idx(ip[0], ip[1], ip[2])] - u[g.idx(im[0], im[1], im[2])]) / dd
                  : 0.0;
  };
  return {d1(i, j, k, 0), d1(i, j, k, 1), d1(i, j, k, 2)};
}

struct Norms {
  double lp = 0.0;        // L_p norm
  double w1p_semi = 0.0;  // L_p norm of the gradient
};

// Composite nodal L_p norm (boundary nodes at half weight so constants and
// linear fields integrate exactly) and first-order seminorm.  An optional
// region mask restricts the sums (1 = include node).
inline Norms norms(const ScalarField& u, double p,
                   const std::vector<std::uint8_t>* region = nullptr) {
  if (!(p >= 1.0)) throw InvalidParameterError("norms: exponent must be >= 1");
  const Grid& g = u.grid;
  const double w0 = std::pow(g.h, 3);
  const std::int64_t N = g.size();
  auto weight = [&](int i, int j, int k) {
    double w = w0;
    if (i == 0 || i == g.nn[0] - 1) w *= 0.5;
    if (j == 0 || j == g.nn[1] - 1) w *= 0.5;
    if (k == 0 || k == g.nn[2] - 1) w *= 0.5;
    return w;
  };
  double sumv = parallel_sum(N, [&](std::int64_t id) {
    if (region && !(*region)[static_cast<std::size_t>(id)]) return 0.0;
    int i, j, k;
    g.decode(id, i, j, k);
    return std::pow(std::abs(u[id]), p) * weight(i, j, k);
  });
  double sumg = parallel_sum(N, [&](std::int64_t id) {
    if (region && !(*region)[static_cast<std::size_t>(id)]) return 0.0;
    int i, j, k;
    g.decode(id, i, j, k);
    const Vec3 gr = node_gradient(u, i, j, k);
    return std::pow(norm(gr), p) * weight(i, j, k);
  });
  return {std::pow(sumv, 1.0 / p), std::pow(sumg, 1.0 / p)};
}

// Region helper: nodes of the inner box.
inline std::vector<std::uint8_t> omega_region(const Grid& g, double omega_halfwidth) {
  std::vector<std::uint8_t> r(static_cast<std::size_t>(g.size()), 0);
  parallel_for(g.size(), [&](std::int64_t id) {
    const Vec3 x = g.x(id);
    if (std::abs(x[0]) <= omega_halfwidth + 1e-12 &&
        std::abs(x[1]) <= omega_halfwidth + 1e-12 &&
        std::abs(x[2]) <= omega_halfwidth + 1e-12)
      r[static_cast<std::size_t>(id)] = 1;
  });
  return r;
}

}  // namespace perfhom
