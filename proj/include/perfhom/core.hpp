#pragma once

// Core containers for the perforated-domain homogenization lab: uniform
// tensor grids, nodal scalar fields, node classification masks, error types
// and the small parallel-for used by the stencil kernels.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace perfhom {

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct InvalidInputError : Error { using Error::Error; };
struct InvalidParameterError : Error { using Error::Error; };
struct UnsupportedKindError : Error { using Error::Error; };
struct NotApplicableError : Error { using Error::Error; };
struct ResolutionError : Error { using Error::Error; };
struct EmptyCellError : Error { using Error::Error; };
struct InvalidDensityError : Error { using Error::Error; };
struct InvalidScheduleError : Error { using Error::Error; };
struct DegenerateSubdivisionError : Error { using Error::Error; };
struct InvalidTestFunctionError : Error { using Error::Error; };
struct PremiseError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

// Solver failure carrying the residual history for post-mortem reports.
struct NonConvergenceError : Error {
  std::vector<double> residual_history;
  NonConvergenceError(const std::string& msg, std::vector<double> hist)
      : Error(msg), residual_history(std::move(hist)) {}
};

// ---------------------------------------------------------------------------
// Runtime knobs (process-wide; set once by the CLI before running stages)

namespace runtime {

inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}

inline void set_threads(int n) { thread_count().store(n < 1 ? 1 : n); }
inline int threads() { return thread_count().load(); }

inline int log_level() {
  static int lvl = [] {
    const char* e = std::getenv("PERFHOM_LOG");
    if (!e) return 0;
    std::string s(e);
    if (s == "debug" || s == "2") return 2;
    if (s == "info" || s == "1") return 1;
    return 0;
  }();
  return lvl;
}

template <typename... Args>
inline void log(int level, const char* fmt, Args... args) {
  if (log_level() >= level) {
    std::fprintf(stderr, fmt, args...);
    std::fprintf(stderr, "\n");
  }
}

}  // namespace runtime

// ---------------------------------------------------------------------------
// Deterministic parallel loops.  Chunks are fixed by (n, nthreads) and partial
// results are combined in chunk order, so reductions do not depend on thread
// scheduling.

template <typename F>
void parallel_for(std::int64_t n, F&& body) {
  const int nt = runtime::threads();
  if (nt <= 1 || n < 4096) {
    for (std::int64_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nt);
  const std::int64_t chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &body] {
      for (std::int64_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

// Deterministic sum reduction: per-chunk partials added in index order.
template <typename F>
double parallel_sum(std::int64_t n, F&& term) {
  const int nt = runtime::threads();
  if (nt <= 1 || n < 4096) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += term(i);
    return s;
  }
  const std::int64_t chunk = (n + nt - 1) / nt;
  const int used = static_cast<int>((n + chunk - 1) / chunk);
  std::vector<double> partial(used, 0.0);
  std::vector<std::thread> pool;
  pool.reserve(used);
  for (int t = 0; t < used; ++t) {
    const std::int64_t lo = t * chunk;
    const std::int64_t hi = std::min<std::int64_t>(n, lo + chunk);
    pool.emplace_back([lo, hi, t, &partial, &term] {
      double s = 0.0;
      for (std::int64_t i = lo; i < hi; ++i) s += term(i);
      partial[t] = s;
    });
  }
  for (auto& th : pool) th.join();
  double s = 0.0;
  for (double p : partial) s += p;
  return s;
}

// ---------------------------------------------------------------------------
// Small numerics

using Vec3 = std::array<double, 3>;

inline double dot(const Vec3& a, const Vec3& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double sq(double x) { return x * x; }
inline double cube(double x) { return x * x * x; }

inline bool finite(double x) { return std::isfinite(x); }
inline bool finite(const Vec3& p) {
  return finite(p[0]) && finite(p[1]) && finite(p[2]);
}

// FNV-1a, used for provenance hashes in output manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 1469598103934665603ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}
inline std::uint64_t fnv1a64(const std::string& s) {
  return fnv1a64(s.data(), s.size());
}

// ---------------------------------------------------------------------------
// Grid: uniform tensor-product grid of nodes over a closed axis-aligned box.

struct Grid {
  std::array<int, 3> nn{0, 0, 0};  // nodes per axis
  double h = 0.0;                  // spacing, equal on all axes
  Vec3 origin{0.0, 0.0, 0.0};      // coordinates of node (0,0,0)

  std::int64_t size() const {
    return std::int64_t(nn[0]) * nn[1] * nn[2];
  }
  std::int64_t cells() const {
    return std::int64_t(nn[0] - 1) * (nn[1] - 1) * (nn[2] - 1);
  }
  std::int64_t idx(int i, int j, int k) const {
    return (std::int64_t(k) * nn[1] + j) * nn[0] + i;
  }
  void decode(std::int64_t id, int& i, int& j, int& k) const {
    i = static_cast<int>(id % nn[0]);
    j = static_cast<int>((id / nn[0]) % nn[1]);
    k = static_cast<int>(id / (std::int64_t(nn[0]) * nn[1]));
  }
  Vec3 x(int i, int j, int k) const {
    return {origin[0] + h * i, origin[1] + h * j, origin[2] + h * k};
  }
  Vec3 x(std::int64_t id) const {
    int i, j, k;
    decode(id, i, j, k);
    return x(i, j, k);
  }
  bool boundary(int i, int j, int k) const {
    return i == 0 || j == 0 || k == 0 || i == nn[0] - 1 || j == nn[1] - 1 ||
           k == nn[2] - 1;
  }
  bool same(const Grid& o) const {
    return nn == o.nn && h == o.h && origin == o.origin;
  }
};

// Symmetric box pair: outer computational box of halfwidth `omega0_halfwidth`
// and inner target box of halfwidth `omega_halfwidth`, both centered at the
// origin.  The outer-to-inner margin must be at least one model unit.
struct GridSpec {
  int n = 3;
  double omega0_halfwidth = 0.0;
  double omega_halfwidth = 0.0;
  double h = 0.0;
  Vec3 center{0.0, 0.0, 0.0};  // box center; local capacity boxes move it

  void validate() const {
    if (n != 3)
      throw InvalidParameterError("GridSpec: only spatial dimension 3 is supported");
    if (!(omega0_halfwidth > 0) || !(omega_halfwidth > 0) || !(h > 0))
      throw InvalidParameterError("GridSpec: halfwidths and spacing must be positive");
    if (omega0_halfwidth - omega_halfwidth < 1.0 - 1e-12)
      throw InvalidParameterError(
          "GridSpec: margin between outer and inner box must be >= 1 model unit");
    if (nodes_per_axis() < 8)
      throw InvalidParameterError("GridSpec: need at least 8 nodes per axis");
  }

  int cells_per_axis() const {
    return std::max(1, static_cast<int>(std::llround(2.0 * omega0_halfwidth / h)));
  }
  int nodes_per_axis() const { return cells_per_axis() + 1; }

  // The realized grid snaps the outer halfwidth to a whole number of cells.
  Grid make_grid() const {
    validate();
    Grid g;
    const int cells = cells_per_axis();
    g.nn = {cells + 1, cells + 1, cells + 1};
    g.h = h;
    const double half = 0.5 * cells * h;
    g.origin = {center[0] - half, center[1] - half, center[2] - half};
    return g;
  }

  bool inside_omega(const Vec3& p) const {
    return std::abs(p[0] - center[0]) <= omega_halfwidth + 1e-12 &&
           std::abs(p[1] - center[1]) <= omega_halfwidth + 1e-12 &&
           std::abs(p[2] - center[2]) <= omega_halfwidth + 1e-12;
  }
};

// ---------------------------------------------------------------------------
// ScalarField: nodal values plus an optional Dirichlet mask.  Value-like and
// cheap to move; the grid travels with the data so mismatches are detectable.

struct ScalarField {
  Grid grid;
  std::vector<double> v;
  std::vector<std::uint8_t> dirichlet;  // empty means "no constrained nodes"

  ScalarField() = default;
  explicit ScalarField(const Grid& g, double fill = 0.0)
      : grid(g), v(static_cast<std::size_t>(g.size()), fill) {}

  double& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

  bool has_dirichlet() const { return !dirichlet.empty(); }
  void ensure_dirichlet() {
    if (dirichlet.empty()) dirichlet.assign(v.size(), 0);
  }
  void check_finite(const char* what) const {
    for (double x : v)
      if (!std::isfinite(x))
        throw InvalidInputError(std::string("non-finite value in field: ") + what);
  }
};

// ---------------------------------------------------------------------------
// Node classification for perforated inner boxes.

enum class NodeClass : std::uint8_t {
  Interior = 0,   // inside the inner box and not in a hole
  Hole = 1,       // inside a hole
  OutsideOmega = 2  // in the outer box but outside the inner box
};

struct DomainMask {
  Grid grid;
  std::vector<NodeClass> cls;
  int s_index = 0;        // ladder index that produced this mask
  double hole_radius = 0; // realized hole radius (0 when no holes)
  double cell_size = 0;   // perforation lattice pitch (0 when no holes)

  DomainMask() = default;
  explicit DomainMask(const Grid& g)
      : grid(g), cls(static_cast<std::size_t>(g.size()), NodeClass::Interior) {}

  NodeClass operator[](std::int64_t i) const { return cls[static_cast<std::size_t>(i)]; }
  std::int64_t count(NodeClass c) const {
    std::int64_t n = 0;
    for (auto x : cls)
      if (x == c) ++n;
    return n;
  }
};

}  // namespace perfhom
