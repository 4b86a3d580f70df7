#pragma once

// Experiment configuration: one JSON document describing operator, geometry,
// perforation, schedule, data, ladders and tolerances.  The analytic data
// catalog covers the boundary traces and divergence data used by the
// experiments; field files can substitute for any entry.

#include "perfhom/homogenize.hpp"
#include "perfhom/io.hpp"

namespace perfhom {

struct DataEntry {
  std::string catalog = "const";  // const|affine|bump|sines|affine-plus-bump|file
  double c0 = 0.0;                // constant term
  Vec3 a{0, 0, 0};                // affine slope
  Vec3 center{0, 0, 0};           // bump center
  double radius = 1.0;            // bump radius
  double amplitude = 0.0;         // bump or sine amplitude
  Vec3 wave{1, 1, 1};             // sine mode counts
  std::string file;               // raw field path for catalog = file

  double eval(const Vec3& x, double box_halfwidth) const {
    if (catalog == "const") return c0;
    if (catalog == "affine") return c0 + dot(a, x);
    if (catalog == "bump") return c0 + amplitude * bump(x);
    if (catalog == "affine-plus-bump") return c0 + dot(a, x) + amplitude * bump(x);
    if (catalog == "sines") {
      const double pi = 3.14159265358979323846;
      double v = amplitude;
      for (int d = 0; d < 3; ++d)
        v *= std::sin(pi * wave[d] * (x[d] + box_halfwidth) / (2.0 * box_halfwidth));
      return c0 + v;
    }
    throw ConfigError("data catalog: unknown entry '" + catalog + "'");
  }

  double bump(const Vec3& x) const {
    const double rr = std::sqrt(sq(x[0] - center[0]) + sq(x[1] - center[1]) +
                                sq(x[2] - center[2])) / radius;
    return rr >= 1.0 ? 0.0 : cube(1.0 - rr * rr);
  }

  ScalarField make_field(const GridSpec& gs) const {
    if (catalog == "file") return read_field(file);
    const Grid g = gs.make_grid();
    ScalarField f(g);
    parallel_for(g.size(), [&](std::int64_t id) {
      f[id] = eval(g.x(id), gs.omega0_halfwidth);
    });
    return f;
  }
};

struct ExperimentConfig {
  // operator
  std::string op_kind = "pure-m-laplacian";
  double m = 2.0;
  double nu1 = 1.0;
  double nu2 = 0.0;  // 0 = default for the kind
  std::string weight_file;

  // geometry
  GridSpec grid;
  PerforationFamily perforation;

  // schedule
  std::vector<double> rho;
  std::vector<long long> lambda;
  std::string schedule_mode = "desk-override";

  // data
  DataEntry f;
  std::array<DataEntry, 3> fvec;
  bool has_fvec = false;
  DataEntry g_bump;  // smooth offset used by the mollified corrector mode
  std::string corrector_q_mode = "constant";  // constant|mollified
  double corrector_q_const = 1.0;

  // ladders
  std::vector<Vec3> x_samples;
  std::vector<double> q_samples;
  std::vector<double> r_ladder;
  std::vector<int> s_values;

  // condition scan
  std::vector<double> scan_radii;

  // tolerances and budgets
  SolverOptions solver;
  DensityOptions density;
  ConditionBScanOptions scan;

  // run controls
  std::string output_dir = "out";
  std::uint64_t seed = 1;
  int threads = 1;
  bool strict_paper = false;
  bool run_corrector = true;
  bool run_density = true;
  bool run_scan = true;

  std::uint64_t config_hash = 0;

  OperatorSpec make_operator() const {
    OperatorSpec op;
    if (op_kind == "pure-m-laplacian") {
      op = OperatorSpec::pure(m);
    } else if (op_kind == "regularized-m-laplacian") {
      op = OperatorSpec::regularized(m);
    } else if (op_kind == "weighted-m-laplacian") {
      if (weight_file.empty())
        throw ConfigError("operator: weighted kind requires weight-field file");
      op = OperatorSpec::weighted(m, read_field(weight_file));
    } else {
      throw ConfigError("operator: unknown kind '" + op_kind + "'");
    }
    if (nu1 > 0) op.nu1 = nu1;
    if (nu2 > 0) op.nu2 = nu2;
    op.validate(strict_paper);
    return op;
  }
};

namespace detail {

inline Vec3 vec3_of(const json& j, const char* where) {
  if (!j.is_array() || j.size() != 3)
    throw ConfigError(std::string(where) + ": expected [x,y,z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline DataEntry data_entry(const json& j, const char* where) {
  DataEntry e;
  if (j.is_number()) {
    e.catalog = "const";
    e.c0 = j.get<double>();
    return e;
  }
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected object");
  e.catalog = j.value("catalog", "const");
  e.c0 = j.value("c0", 0.0);
  if (j.contains("a")) e.a = vec3_of(j["a"], where);
  if (j.contains("center")) e.center = vec3_of(j["center"], where);
  e.radius = j.value("radius", 1.0);
  e.amplitude = j.value("amplitude", 0.0);
  if (j.contains("wave")) e.wave = vec3_of(j["wave"], where);
  e.file = j.value("file", "");
  return e;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig c;
  c.config_hash = fnv1a64(text);

  try {
    if (j.contains("operator")) {
      const auto& o = j["operator"];
      c.op_kind = o.value("kind", c.op_kind);
      c.m = o.value("m", c.m);
      c.nu1 = o.value("nu1", 0.0);
      c.nu2 = o.value("nu2", 0.0);
      c.weight_file = o.value("weight_field", "");
    }
    if (!j.contains("grid")) throw ConfigError("config: missing grid section");
    {
      const auto& g = j["grid"];
      c.grid.n = g.value("n", 3);
      c.grid.omega0_halfwidth = g.at("omega0_halfwidth").get<double>();
      c.grid.omega_halfwidth = g.at("omega_halfwidth").get<double>();
      if (g.contains("h"))
        c.grid.h = g["h"].get<double>();
      else if (g.contains("cells_per_axis"))
        c.grid.h = 2.0 * c.grid.omega0_halfwidth / g["cells_per_axis"].get<int>();
      else
        throw ConfigError("grid: need h or cells_per_axis");
      c.grid.validate();
    }
    if (j.contains("perforation")) {
      const auto& p = j["perforation"];
      if (p.contains("cell_sizes"))
        c.perforation.cell_sizes = p["cell_sizes"].get<std::vector<double>>();
      else if (p.contains("d0")) {
        const double d0 = p["d0"].get<double>();
        const double ratio = p.value("ratio", 0.8);
        const int count = p.value("count", 3);
        for (int s = 0; s < count; ++s)
          c.perforation.cell_sizes.push_back(d0 * std::pow(ratio, s));
      }
      c.perforation.c0 = p.value("c0", 0.0);
      c.perforation.gamma = p.value(
          "gamma", PerforationFamily::critical_gamma(3, c.m));
      const std::string shape = p.value("shape", "ball");
      if (shape == "ball")
        c.perforation.shape = HoleShape::Ball;
      else if (shape == "cube")
        c.perforation.shape = HoleShape::Cube;
      else
        throw ConfigError("perforation: unknown shape '" + shape + "'");
      if (p.contains("anchor"))
        c.perforation.anchor = detail::vec3_of(p["anchor"], "perforation.anchor");
      if (!c.perforation.cell_sizes.empty()) c.perforation.validate();
    }
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      c.rho = s.value("rho", std::vector<double>{});
      if (s.contains("lambda"))
        c.lambda = s["lambda"].get<std::vector<long long>>();
      c.schedule_mode = s.value("mode", "desk-override");
      if (c.schedule_mode != "desk-override" && c.schedule_mode != "paper-formula")
        throw ConfigError("schedule: unknown mode '" + c.schedule_mode + "'");
    }
    if (j.contains("data")) {
      const auto& d = j["data"];
      if (d.contains("f")) c.f = detail::data_entry(d["f"], "data.f");
      if (d.contains("fj")) {
        const auto& a = d["fj"];
        if (!a.is_array() || a.size() != 3)
          throw ConfigError("data.fj: expected 3 entries");
        for (int t = 0; t < 3; ++t)
          c.fvec[t] = detail::data_entry(a[t], "data.fj");
        c.has_fvec = true;
      }
      if (d.contains("g")) c.g_bump = detail::data_entry(d["g"], "data.g");
      c.corrector_q_mode = d.value("corrector_q_mode", "constant");
      c.corrector_q_const = d.value("corrector_q_const", 1.0);
    }
    if (j.contains("ladders")) {
      const auto& l = j["ladders"];
      if (l.contains("x_samples"))
        for (const auto& xx : l["x_samples"])
          c.x_samples.push_back(detail::vec3_of(xx, "ladders.x_samples"));
      c.q_samples = l.value("q_samples", std::vector<double>{1.0});
      c.r_ladder = l.value("r_ladder", std::vector<double>{});
      c.s_values = l.value("s_values", std::vector<int>{});
      c.scan_radii = l.value("scan_radii", std::vector<double>{});
    }
    if (j.contains("tolerances")) {
      const auto& t = j["tolerances"];
      c.solver.tol = t.value("solver_tol", c.solver.tol);
      c.solver.pcg_rtol = t.value("pcg_rtol", c.solver.pcg_rtol);
      c.solver.pcg_maxit = t.value("pcg_maxit", c.solver.pcg_maxit);
      c.solver.newton_maxit = t.value("newton_maxit", c.solver.newton_maxit);
      if (t.contains("eps_ladder"))
        c.solver.eps_ladder = t["eps_ladder"].get<std::vector<double>>();
      c.density.stabilization_rel =
          t.value("stabilization_rel", c.density.stabilization_rel);
      c.density.target_nodes = t.value("density_target_nodes", c.density.target_nodes);
      c.density.min_points_per_radius =
          t.value("density_points_per_radius", c.density.min_points_per_radius);
      for (auto* tolset : {&c.density.solver, &c.scan.solver}) *tolset = c.solver;
      c.scan.target_nodes = t.value("scan_target_nodes", c.scan.target_nodes);
      c.scan.expected_cap = t.value("scan_expected_cap", 0.0);
    } else {
      c.density.solver = c.solver;
      c.scan.solver = c.solver;
    }
    c.scan.radii = c.scan_radii;
    if (j.contains("run")) {
      const auto& r = j["run"];
      c.output_dir = r.value("output_dir", c.output_dir);
      c.seed = r.value("seed", std::uint64_t{1});
      c.threads = r.value("threads", 1);
      c.strict_paper = r.value("strict_paper", false);
      c.run_corrector = r.value("corrector", true);
      c.run_density = r.value("density", true);
      c.run_scan = r.value("scan", true);
    }

    // cross-checks
    if (!(c.solver.tol > 0) || !(c.solver.pcg_rtol > 0))
      throw ConfigError("tolerances: must be positive");
    c.make_operator();  // validates the operator section
    if (!c.rho.empty()) {
      const ScheduleMode mode = c.schedule_mode == "paper-formula"
                                    ? ScheduleMode::PaperFormula
                                    : ScheduleMode::DeskOverride;
      if (c.strict_paper && mode != ScheduleMode::PaperFormula)
        throw ConfigError("schedule: strict-paper run requires the formula mode");
      build_schedule(c.rho, c.m, mode, c.lambda);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config not found: " + path);
  return parse_config(read_file(path));
}

// Normalized echo used by config validation.
inline std::string config_echo(const ExperimentConfig& c) {
  json j;
  j["operator"] = {{"kind", c.op_kind}, {"m", c.m}};
  j["grid"] = {{"omega0_halfwidth", c.grid.omega0_halfwidth},
               {"omega_halfwidth", c.grid.omega_halfwidth},
               {"h", c.grid.h}};
  j["perforation"] = {{"cell_sizes", c.perforation.cell_sizes},
                      {"c0", c.perforation.c0},
                      {"gamma", c.perforation.gamma}};
  j["schedule"] = {{"mode", c.schedule_mode}, {"rho", c.rho}, {"lambda", c.lambda}};
  j["run"] = {{"output_dir", c.output_dir},
              {"seed", c.seed},
              {"threads", c.threads},
              {"strict_paper", c.strict_paper}};
  j["config_hash"] = hash_hex(c.config_hash);
  return j.dump(2) + "\n";
}

}  // namespace perfhom
