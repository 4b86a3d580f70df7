#pragma once

// Monotone flux families a(x,p), their scalar potentials for variational
// solves, flux Jacobians for Newton linearization, and sampling-based
// verification of the growth/monotonicity/continuity conditions.

#include <functional>
#include <optional>
#include <random>

#include "perfhom/core.hpp"

namespace perfhom {

enum class OperatorKind {
  PureMLaplacian,        // |p|^{m-2} p, odd and (m-1)-homogeneous
  RegularizedMLaplacian, // (1+|p|)^{m-2} p, no homogeneity
  WeightedMLaplacian,    // w(x) |p|^{m-2} p with bounded positive weight
  Custom                 // user flux hook, non-variational (tests only)
};

inline const char* to_string(OperatorKind k) {
  switch (k) {
    case OperatorKind::PureMLaplacian: return "pure-m-laplacian";
    case OperatorKind::RegularizedMLaplacian: return "regularized-m-laplacian";
    case OperatorKind::WeightedMLaplacian: return "weighted-m-laplacian";
    case OperatorKind::Custom: return "custom";
  }
  return "?";
}

using FluxFn = std::function<Vec3(const Vec3& x, const Vec3& p)>;

struct OperatorSpec {
  OperatorKind kind = OperatorKind::PureMLaplacian;
  double m = 2.0;
  double nu1 = 1.0;
  double nu2 = 1.0;
  int n = 3;
  std::optional<ScalarField> weight;  // weighted kind only
  FluxFn custom_flux;                 // custom kind only

  static OperatorSpec pure(double m) {
    OperatorSpec op;
    op.kind = OperatorKind::PureMLaplacian;
    op.m = m;
    op.nu1 = 1.0;
    op.nu2 = default_nu2(m);
    op.validate();
    return op;
  }
  static OperatorSpec regularized(double m) {
    OperatorSpec op;
    op.kind = OperatorKind::RegularizedMLaplacian;
    op.m = m;
    op.nu1 = 1.0;
    op.nu2 = default_nu2(m);
    op.validate();
    return op;
  }
  static OperatorSpec weighted(double m, ScalarField w) {
    OperatorSpec op;
    op.kind = OperatorKind::WeightedMLaplacian;
    op.m = m;
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (double x : w.v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    if (!(lo > 0)) throw InvalidParameterError("weighted operator: weight must be strictly positive");
    op.nu1 = lo;
    op.nu2 = std::max(hi, lo) * default_nu2(m);
    op.weight = std::move(w);
    op.validate();
    return op;
  }
  static OperatorSpec custom(FluxFn flux, double m) {
    OperatorSpec op;
    op.kind = OperatorKind::Custom;
    op.custom_flux = std::move(flux);
    op.m = m;
    op.nu1 = 1.0;
    op.nu2 = default_nu2(m);
    return op;
  }

  // Default continuity constant validated by the sampling suite on the
  // box |p|,|q| <= 10; sqrt(n)*(m-1) covers m >= 2, the floor of 4 covers
  // the singular range 1 < m < 2.
  static double default_nu2(double m) {
    return std::max(std::sqrt(3.0) * std::max(m - 1.0, 1.0), 4.0) * 1.05;
  }

  bool homogeneous() const {
    return kind == OperatorKind::PureMLaplacian ||
           kind == OperatorKind::WeightedMLaplacian;
  }
  bool variational() const { return kind != OperatorKind::Custom; }

  void validate(bool strict_paper = false) const {
    // the box problems stay well-posed up to m = n; only the whole-space
    // capacity interpretation needs m < n, and those paths guard themselves
    if (!(m > 1.0) || !(m <= double(n) + 1e-12))
      throw InvalidParameterError("operator: growth exponent must satisfy 1 < m <= n");
    if (strict_paper && (m < 2.0 || m >= double(n)))
      throw InvalidParameterError("operator: strict-paper mode requires 2 <= m < n");
    if (!(nu1 > 0) || !(nu2 > 0))
      throw InvalidParameterError("operator: ellipticity constants must be positive");
    if (kind == OperatorKind::WeightedMLaplacian) {
      if (!weight) throw InvalidParameterError("weighted operator: missing weight field");
      for (double x : weight->v) {
        if (!(x >= nu1 - 1e-12) || !(x <= nu2 + 1e-12))
          throw InvalidParameterError("weighted operator: weight escapes [nu1, nu2]");
      }
    }
  }

  // Trilinear weight lookup; callers pass points inside the weight grid.
  double weight_at(const Vec3& x) const;
};

namespace detail {

inline double trilinear(const ScalarField& f, const Vec3& x) {
  const Grid& g = f.grid;
  double fi = (x[0] - g.origin[0]) / g.h;
  double fj = (x[1] - g.origin[1]) / g.h;
  double fk = (x[2] - g.origin[2]) / g.h;
  int i = std::clamp(static_cast<int>(std::floor(fi)), 0, g.nn[0] - 2);
  int j = std::clamp(static_cast<int>(std::floor(fj)), 0, g.nn[1] - 2);
  int k = std::clamp(static_cast<int>(std::floor(fk)), 0, g.nn[2] - 2);
  double a = std::clamp(fi - i, 0.0, 1.0);
  double b = std::clamp(fj - j, 0.0, 1.0);
  double c = std::clamp(fk - k, 0.0, 1.0);
  auto v = [&](int di, int dj, int dk) {
    return f[f.grid.idx(i + di, j + dj, k + dk)];
  };
  double c00 = v(0, 0, 0) * (1 - a) + v(1, 0, 0) * a;
  double c10 = v(0, 1, 0) * (1 - a) + v(1, 1, 0) * a;
  double c01 = v(0, 0, 1) * (1 - a) + v(1, 0, 1) * a;
  double c11 = v(0, 1, 1) * (1 - a) + v(1, 1, 1) * a;
  double c0 = c00 * (1 - b) + c10 * b;
  double c1 = c01 * (1 - b) + c11 * b;
  return c0 * (1 - c) + c1 * c;
}

}  // namespace detail

inline double OperatorSpec::weight_at(const Vec3& x) const {
  return detail::trilinear(*weight, x);
}

// ---------------------------------------------------------------------------
// Flux, potential, Jacobian.  All take an optional regularization epsilon:
// |p| is replaced by sqrt(|p|^2 + eps^2) inside the homogeneous kinds, which
// is what the continuation ladder in the solver drives to zero.

inline Vec3 eval_flux_eps(const OperatorSpec& op, const Vec3& x, const Vec3& p,
                          double eps) {
  if (!finite(p) || !finite(x))
    throw InvalidInputError("eval_flux: non-finite input components");
  const double m = op.m;
  switch (op.kind) {
    case OperatorKind::PureMLaplacian: {
      const double s2 = dot(p, p) + eps * eps;
      if (s2 == 0.0) return {0, 0, 0};
      const double g = std::pow(s2, 0.5 * (m - 2.0));
      return {g * p[0], g * p[1], g * p[2]};
    }
    case OperatorKind::WeightedMLaplacian: {
      const double w = op.weight_at(x);
      const double s2 = dot(p, p) + eps * eps;
      if (s2 == 0.0) return {0, 0, 0};
      const double g = w * std::pow(s2, 0.5 * (m - 2.0));
      return {g * p[0], g * p[1], g * p[2]};
    }
    case OperatorKind::RegularizedMLaplacian: {
      const double t = std::sqrt(dot(p, p) + eps * eps);
      const double g = std::pow(1.0 + t, m - 2.0);
      return {g * p[0], g * p[1], g * p[2]};
    }
    case OperatorKind::Custom:
      return op.custom_flux(x, p);
  }
  return {0, 0, 0};
}

inline Vec3 eval_flux(const OperatorSpec& op, const Vec3& x, const Vec3& p) {
  return eval_flux_eps(op, x, p, 0.0);
}

// Scalar potential with gradient equal to the flux, normalized to vanish at
// p = 0.  Custom fluxes have no potential.
inline double eval_potential_eps(const OperatorSpec& op, const Vec3& x,
                                 const Vec3& p, double eps) {
  if (!finite(p) || !finite(x))
    throw InvalidInputError("eval_potential: non-finite input components");
  const double m = op.m;
  switch (op.kind) {
    case OperatorKind::PureMLaplacian:
    case OperatorKind::WeightedMLaplacian: {
      const double s2 = dot(p, p) + eps * eps;
      const double phi = (std::pow(s2, 0.5 * m) - std::pow(eps * eps, 0.5 * m)) / m;
      return op.kind == OperatorKind::WeightedMLaplacian ? op.weight_at(x) * phi
                                                         : phi;
    }
    case OperatorKind::RegularizedMLaplacian: {
      // antiderivative of (1+t)^{m-2} t:  (1+t)^m/m - (1+t)^{m-1}/(m-1)
      const double t = std::sqrt(dot(p, p) + eps * eps);
      auto prim = [m](double u) {
        return std::pow(1.0 + u, m) / m - std::pow(1.0 + u, m - 1.0) / (m - 1.0);
      };
      return prim(t) - prim(eps);
    }
    case OperatorKind::Custom:
      throw UnsupportedKindError(
          "eval_potential: custom flux has no scalar potential");
  }
  return 0.0;
}

inline double eval_potential(const OperatorSpec& op, const Vec3& x, const Vec3& p) {
  return eval_potential_eps(op, x, p, 0.0);
}

// Flux Jacobian in the form  D a(x,p) = alpha I + beta t t^T  with |t| = 1.
// Symmetric positive definite for m > 1 and eps > 0.
struct FluxJacobian {
  double alpha = 0.0;
  double beta = 0.0;
  Vec3 t{0, 0, 0};

  Vec3 apply(const Vec3& q) const {
    const double tq = dot(t, q);
    return {alpha * q[0] + beta * tq * t[0], alpha * q[1] + beta * tq * t[1],
            alpha * q[2] + beta * tq * t[2]};
  }
};

inline FluxJacobian flux_jacobian(const OperatorSpec& op, const Vec3& x,
                                  const Vec3& p, double eps) {
  FluxJacobian J;
  const double m = op.m;
  switch (op.kind) {
    case OperatorKind::PureMLaplacian:
    case OperatorKind::WeightedMLaplacian: {
      const double s2 = dot(p, p) + eps * eps;
      if (s2 == 0.0) {
        // degenerate point; callers keep eps > 0 whenever m != 2
        J.alpha = (m == 2.0) ? 1.0 : 0.0;
        if (op.kind == OperatorKind::WeightedMLaplacian) J.alpha *= op.weight_at(x);
        return J;
      }
      const double g = std::pow(s2, 0.5 * (m - 2.0));
      J.alpha = g;
      J.beta = (m - 2.0) * g * dot(p, p) / s2;
      if (dot(p, p) > 0) {
        const double ip = 1.0 / std::sqrt(dot(p, p));
        J.t = {p[0] * ip, p[1] * ip, p[2] * ip};
      }
      if (op.kind == OperatorKind::WeightedMLaplacian) {
        const double w = op.weight_at(x);
        J.alpha *= w;
        J.beta *= w;
      }
      return J;
    }
    case OperatorKind::RegularizedMLaplacian: {
      const double p2 = dot(p, p);
      const double t = std::sqrt(p2 + eps * eps);
      const double g = std::pow(1.0 + t, m - 2.0);
      J.alpha = g;
      if (t > 0.0) {
        // d/dp of g(|p|_eps) p:  g I + g'(t) / t * p p^T with t the
        // regularized magnitude
        const double gp = (m - 2.0) * std::pow(1.0 + t, m - 3.0);
        J.beta = gp / t * p2;
        if (p2 > 0) {
          const double ip = 1.0 / std::sqrt(p2);
          J.t = {p[0] * ip, p[1] * ip, p[2] * ip};
        }
      }
      return J;
    }
    case OperatorKind::Custom:
      throw UnsupportedKindError("flux_jacobian: custom flux not supported");
  }
  return J;
}

// ---------------------------------------------------------------------------
// Sampling verification of the structural conditions.  The report records
// worst-case margins; a violation keeps the offending triple.

struct ConditionViolation {
  Vec3 x{0, 0, 0};
  Vec3 p{0, 0, 0};
  Vec3 q{0, 0, 0};
  double lhs = 0.0;
  double rhs = 0.0;
  std::string which;
};

struct ConditionAReport {
  std::size_t samples = 0;
  // coercivity: min over samples of a(x,p).p / rhs(p)
  double coercivity_margin = std::numeric_limits<double>::infinity();
  // monotonicity: min over sampled pairs of [a(p)-a(q)].(p-q)
  double monotonicity_min = std::numeric_limits<double>::infinity();
  // continuity: max over samples of sum_j |a_j(p)-a_j(q)| / rhs(p,q)
  double continuity_margin = 0.0;
  std::vector<ConditionViolation> violations;

  bool ok() const { return violations.empty(); }
};

struct ConditionASample {
  Vec3 x, p, q;
};

inline std::vector<ConditionASample> condition_a_samples(std::size_t count,
                                                         double box,
                                                         std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(-box, box);
  std::uniform_real_distribution<double> X(-1.0, 1.0);
  std::vector<ConditionASample> s(count);
  for (auto& t : s) {
    t.x = {X(rng), X(rng), X(rng)};
    t.p = {U(rng), U(rng), U(rng)};
    t.q = {U(rng), U(rng), U(rng)};
  }
  return s;
}

// Generic form used by tests to inject adversarial fluxes.
inline ConditionAReport check_condition_A_flux(
    const FluxFn& flux, double m, double nu1, double nu2, bool homogeneous_form,
    const std::vector<ConditionASample>& samples) {
  if (samples.empty())
    throw InvalidInputError("check_condition_A: empty sample list");
  ConditionAReport rep;
  rep.samples = samples.size();
  const double slack = 1e-12;
  for (const auto& smp : samples) {
    const Vec3 ap = flux(smp.x, smp.p);
    const Vec3 aq = flux(smp.x, smp.q);
    const double pn = norm(smp.p);
    const double qn = norm(smp.q);

    // coercivity
    const double lhs_c = dot(ap, smp.p);
    const double rhs_c = homogeneous_form
                             ? nu1 * std::pow(pn, m)
                             : nu1 * std::pow(1.0 + pn, m - 2.0) * pn * pn;
    if (rhs_c > 0) {
      rep.coercivity_margin = std::min(rep.coercivity_margin, lhs_c / rhs_c);
      if (lhs_c < rhs_c - slack)
        rep.violations.push_back({smp.x, smp.p, smp.q, lhs_c, rhs_c, "coercivity"});
    }

    // monotonicity
    const Vec3 d{smp.p[0] - smp.q[0], smp.p[1] - smp.q[1], smp.p[2] - smp.q[2]};
    const Vec3 da{ap[0] - aq[0], ap[1] - aq[1], ap[2] - aq[2]};
    const double mono = dot(da, d);
    rep.monotonicity_min = std::min(rep.monotonicity_min, mono);
    if (mono < -slack)
      rep.violations.push_back({smp.x, smp.p, smp.q, mono, 0.0, "monotonicity"});

    // continuity
    const double l1 = std::abs(da[0]) + std::abs(da[1]) + std::abs(da[2]);
    const double base = homogeneous_form ? pn + qn : 1.0 + pn + qn;
    const double dn = norm(d);
    if (dn > 0 && base > 0) {
      const double rhs_k = nu2 * std::pow(base, m - 2.0) * dn;
      rep.continuity_margin = std::max(rep.continuity_margin, l1 / (rhs_k / nu2));
      if (l1 > rhs_k + slack)
        rep.violations.push_back({smp.x, smp.p, smp.q, l1, rhs_k, "continuity"});
    }
  }
  return rep;
}

inline ConditionAReport check_condition_A(
    const OperatorSpec& op, const std::vector<ConditionASample>& samples) {
  FluxFn f = [&op](const Vec3& x, const Vec3& p) { return eval_flux(op, x, p); };
  return check_condition_A_flux(f, op.m, op.nu1, op.nu2, op.homogeneous(), samples);
}

}  // namespace perfhom
