#include "perfhom/capacity.hpp"
#include <chrono>
#include <cstdio>
using namespace perfhom;
static double now() {
  static auto t0 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}
int main(int argc, char** argv) {
  runtime::set_threads(argc > 1 ? atoi(argv[1]) : 2);
  const double pi = 3.14159265358979323846;
  const double m = 2.5, a = 0.25;
  const double beta = (3.0-m)/(m-1.0);
  const double target = 4*pi*std::pow(beta, m-1)*std::pow(a, 3.0-m);
  SolverOptions opt;
  CompactSet F = CompactSet::ball({0,0,0}, a);
  double L1=1.3125, L2=1.969, c1=0, c2=0;
  for (int pass = 0; pass < 2; ++pass) {
    GridSpec gs; gs.omega0_halfwidth = pass? L2 : L1; gs.omega_halfwidth = gs.omega0_halfwidth - 1.0;
    gs.h = gs.omega0_halfwidth/ (pass? 31.5 : 21.0);  // ~42/63 cells
    auto r = compute_Cm(F, gs, m, opt);
    printf("[%5.1fs] m=2.5 L=%.3f h=%.4f raw=%.5f madelung=%.5f (err %+.2f%%)\n", now(),
      gs.omega0_halfwidth, gs.h, r.value,
      whole_space_from_box(r.value, m, cube_effective_radius(gs.omega0_halfwidth)),
      100*(whole_space_from_box(r.value, m, cube_effective_radius(gs.omega0_halfwidth))-target)/target);
    (pass? c2 : c1) = r.value;
  }
  double tb = whole_space_from_two_boxes(c1, L1, c2, L2, m);
  printf("[%5.1fs] two-box=%.5f err=%+.2f%% (target %.5f)\n", now(), tb, 100*(tb-target)/target, target);
  return 0;
}
