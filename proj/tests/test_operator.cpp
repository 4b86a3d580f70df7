#include <catch2/catch_amalgamated.hpp>

#include "perfhom/operator.hpp"

using namespace perfhom;

namespace {
const Vec3 kOrigin{0, 0, 0};
}

TEST_CASE("flux of the pure family") {
  auto op2 = OperatorSpec::pure(2.0);
  const Vec3 p{1, 2, 0};
  const Vec3 a = eval_flux(op2, kOrigin, p);
  CHECK(a[0] == Catch::Approx(1.0));
  CHECK(a[1] == Catch::Approx(2.0));
  CHECK(a[2] == Catch::Approx(0.0));

  auto op3 = OperatorSpec::pure(2.9);
  const Vec3 z = eval_flux(op3, kOrigin, {0, 0, 0});
  CHECK(z[0] == 0.0);
  CHECK(z[1] == 0.0);
  CHECK(z[2] == 0.0);
}

TEST_CASE("flux vanishes at zero gradient for every kind") {
  Grid g;
  g.nn = {8, 8, 8};
  g.h = 0.2;
  g.origin = {-0.7, -0.7, -0.7};
  ScalarField w(g, 1.3);
  for (const auto& op : {OperatorSpec::pure(2.5), OperatorSpec::regularized(2.2),
                         OperatorSpec::weighted(2.0, w)}) {
    const Vec3 z = eval_flux(op, {0.1, 0.0, -0.1}, {0, 0, 0});
    CHECK(norm(z) == 0.0);
  }
}

TEST_CASE("cubic growth example") {
  auto op = OperatorSpec::pure(3.0);
  const Vec3 a = eval_flux(op, kOrigin, {2, 0, 0});
  CHECK(a[0] == Catch::Approx(4.0));
  CHECK(a[1] == 0.0);
}

TEST_CASE("potential values and normalization") {
  auto op2 = OperatorSpec::pure(2.0);
  CHECK(eval_potential(op2, kOrigin, {1, 2, 0}) == Catch::Approx(2.5));
  CHECK(eval_potential(op2, kOrigin, {0, 0, 0}) == 0.0);

  auto opr = OperatorSpec::regularized(2.5);
  CHECK(eval_potential(opr, kOrigin, {0, 0, 0}) == 0.0);

  auto op3 = OperatorSpec::pure(3.0);
  CHECK(eval_potential(op3, kOrigin, {2, 0, 0}) == Catch::Approx(8.0 / 3.0));
}

TEST_CASE("potential of a custom flux is refused") {
  auto op = OperatorSpec::custom(
      [](const Vec3&, const Vec3& p) { return p; }, 2.0);
  CHECK_THROWS_AS(eval_potential(op, kOrigin, {1, 0, 0}), UnsupportedKindError);
}

TEST_CASE("non-finite inputs are rejected") {
  auto op = OperatorSpec::pure(2.0);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(eval_flux(op, kOrigin, {nan, 0, 0}), InvalidInputError);
  CHECK_THROWS_AS(eval_potential(op, {nan, 0, 0}, {1, 0, 0}), InvalidInputError);
}

TEST_CASE("gradient of the potential matches the flux") {
  Grid g;
  g.nn = {8, 8, 8};
  g.h = 0.2;
  g.origin = {-0.7, -0.7, -0.7};
  ScalarField w(g, 1.0);
  for (double& x : w.v) x = 1.0 + 0.5 * std::sin(double(&x - w.v.data()));

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> U(-10, 10);
  const double step = 1e-5;
  for (const auto& op :
       {OperatorSpec::pure(2.0), OperatorSpec::pure(2.7),
        OperatorSpec::regularized(2.5), OperatorSpec::weighted(2.3, w)}) {
    double worst = 0;
    for (int t = 0; t < 200; ++t) {
      Vec3 p{U(rng), U(rng), U(rng)};
      if (norm(p) > 10.0 || norm(p) < 1e-2) continue;
      const Vec3 x{0.05, -0.02, 0.01};
      const Vec3 a = eval_flux(op, x, p);
      Vec3 fd;
      for (int d = 0; d < 3; ++d) {
        Vec3 pp = p, pm = p;
        pp[d] += step;
        pm[d] -= step;
        fd[d] = (eval_potential(op, x, pp) - eval_potential(op, x, pm)) / (2 * step);
      }
      const Vec3 diff{fd[0] - a[0], fd[1] - a[1], fd[2] - a[2]};
      worst = std::max(worst, norm(diff) / std::max(norm(a), 1e-12));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("homogeneity of the pure and weighted families") {
  Grid g;
  g.nn = {8, 8, 8};
  g.h = 0.2;
  g.origin = {-0.7, -0.7, -0.7};
  ScalarField w(g, 2.0);
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(-3, 3);
  for (const auto& op : {OperatorSpec::pure(2.5), OperatorSpec::weighted(2.5, w)}) {
    for (double lam : {-2.0, -1.0, 0.5, 3.0}) {
      for (int t = 0; t < 50; ++t) {
        const Vec3 p{U(rng), U(rng), U(rng)};
        const Vec3 x{0.1, 0.1, 0.1};
        const Vec3 lhs = eval_flux(op, x, {lam * p[0], lam * p[1], lam * p[2]});
        const double fac = std::pow(std::abs(lam), op.m - 2.0) * lam;
        const Vec3 rhs = eval_flux(op, x, p);
        for (int d = 0; d < 3; ++d)
          CHECK(lhs[d] == Catch::Approx(fac * rhs[d]).margin(1e-12 * std::abs(fac)));
      }
    }
  }
}

TEST_CASE("structural conditions hold on random samples") {
  auto samples = condition_a_samples(1000, 10.0, 42);
  auto rep = check_condition_A(OperatorSpec::pure(2.0), samples);
  CHECK(rep.ok());
  CHECK(rep.monotonicity_min >= 0.0);

  // the linear flux has monotonicity pairing exactly |p-q|^2
  const auto& s = samples.front();
  const Vec3 d{s.p[0] - s.q[0], s.p[1] - s.q[1], s.p[2] - s.q[2]};
  auto op = OperatorSpec::pure(2.0);
  const Vec3 ap = eval_flux(op, s.x, s.p), aq = eval_flux(op, s.x, s.q);
  const Vec3 da{ap[0] - aq[0], ap[1] - aq[1], ap[2] - aq[2]};
  CHECK(dot(da, d) == Catch::Approx(dot(d, d)));
}

TEST_CASE("adversarial flux is caught by the monotonicity check") {
  auto samples = condition_a_samples(100, 5.0, 3);
  FluxFn bad = [](const Vec3&, const Vec3& p) {
    return Vec3{-p[0], -p[1], -p[2]};
  };
  auto rep = check_condition_A_flux(bad, 2.0, 1.0, 4.0, true, samples);
  REQUIRE_FALSE(rep.ok());
  bool mono = false;
  for (const auto& v : rep.violations)
    if (v.which == "monotonicity") mono = true;
  CHECK(mono);
}

TEST_CASE("default constants cover the regularized family on the sample box") {
  // frozen by a pre-build sampling sweep on |p|,|q| <= 10
  auto samples = condition_a_samples(10000, 10.0, 20240917);
  auto rep = check_condition_A(OperatorSpec::regularized(2.5), samples);
  CHECK(rep.ok());
  CHECK(rep.coercivity_margin >= 1.0 - 1e-12);
  CHECK(rep.continuity_margin < OperatorSpec::default_nu2(2.5));
}

TEST_CASE("operator validation") {
  CHECK_THROWS_AS(OperatorSpec::pure(1.0), InvalidParameterError);
  CHECK_THROWS_AS(OperatorSpec::pure(3.5), InvalidParameterError);
  CHECK_NOTHROW(OperatorSpec::pure(3.0));
  CHECK_THROWS_AS(OperatorSpec::pure(1.5).validate(true), InvalidParameterError);
  CHECK_THROWS_AS(OperatorSpec::pure(3.0).validate(true), InvalidParameterError);
  CHECK_NOTHROW(OperatorSpec::pure(1.5).validate(false));

  Grid g;
  g.nn = {8, 8, 8};
  g.h = 0.1;
  g.origin = {0, 0, 0};
  ScalarField w(g, 0.0);
  CHECK_THROWS_AS(OperatorSpec::weighted(2.0, w), InvalidParameterError);
}
