// Command-line front end: config validation, single solves, capacity
// evaluations, perforation scans, density estimation and full experiment
// runs.  All outputs are written atomically and carry the config hash.

#include <CLI11.hpp>

#include "perfhom/experiment.hpp"

using namespace perfhom;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::string output_dir;
  int threads = 0;
  std::uint64_t seed = 0;
  bool have_seed = false;
  bool strict_paper = false;
};

ExperimentConfig load_with_overrides(const GlobalArgs& g) {
  ExperimentConfig cfg = load_config(g.config_path);
  if (!g.output_dir.empty()) cfg.output_dir = g.output_dir;
  if (g.threads > 0) cfg.threads = g.threads;
  if (g.have_seed) cfg.seed = g.seed;
  if (g.strict_paper) cfg.strict_paper = true;
  cfg.make_operator();  // re-validate under overrides
  runtime::set_threads(cfg.threads);
  return cfg;
}

json capacity_report_json(const CapacityReport& rep, const ExperimentConfig& cfg) {
  json j;
  j["value"] = rep.value;
  j["value_whole_space"] = rep.value_whole_space;
  j["q"] = rep.q;
  j["m"] = rep.m;
  j["pcg_iterations"] = rep.pcg_iterations;
  j["newton_iterations"] = rep.newton_iterations;
  j["residual"] = rep.solver_residual;
  j["box_halfwidth"] = rep.box.omega0_halfwidth;
  j["h"] = rep.box.h;
  j["config_hash"] = hash_hex(cfg.config_hash);
  j["version"] = "0.1.0";
  return j;
}

int run_validate(const GlobalArgs& g) {
  ExperimentConfig cfg = load_with_overrides(g);
  std::fputs(config_echo(cfg).c_str(), stdout);
  return 0;
}

int run_solve(const GlobalArgs& g, bool with_density) {
  ExperimentConfig cfg = load_with_overrides(g);
  const GridSpec gs = cfg.grid;
  const Grid grid = gs.make_grid();

  DomainMask mask = [&] {
    if (cfg.perforation.c0 > 0 && !cfg.perforation.cell_sizes.empty())
      return build_perforation(cfg.perforation,
                               cfg.s_values.empty() ? 1 : cfg.s_values.front(), gs);
    PerforationFamily none;
    none.cell_sizes = {1.0};
    none.c0 = 0.0;
    return build_perforation(none, 1, gs);
  }();

  ProblemSpec spec;
  spec.op = cfg.make_operator();
  spec.grid = grid;
  spec.free_mask = free_mask_perforated(mask);
  spec.boundary = cfg.f.make_field(gs);
  if (cfg.has_fvec)
    for (int d = 0; d < 3; ++d) spec.fvec[d] = cfg.fvec[d].make_field(gs);

  SolveReport rep;
  if (with_density) {
    spec.density = std::make_shared<PowerDensity>(1.0, cfg.m);
    rep = solve_limit(spec, cfg.solver);
  } else {
    rep = solve_dirichlet(spec, cfg.solver);
  }

  fs::path dir(cfg.output_dir);
  fs::create_directories(dir);
  write_field(dir / "solution.f64", rep.solution);
  json j;
  j["converged"] = rep.converged;
  j["residual"] = rep.final_residual;
  j["energy"] = rep.energy;
  j["newton_iterations"] = rep.newton_iterations;
  j["pcg_iterations"] = rep.pcg_iterations;
  j["epsilon_used"] = rep.epsilon_used;
  j["config_hash"] = hash_hex(cfg.config_hash);
  j["version"] = "0.1.0";
  atomic_write_file(dir / "solve_report.json", j.dump(2) + "\n");
  std::printf("solve: residual %.3e, energy %.12g -> %s\n", rep.final_residual,
              rep.energy, (dir / "solution.f64").c_str());
  return rep.converged ? 0 : 1;
}

int run_capacity_cm(const GlobalArgs& g, double ball, int grid_cells,
                    bool extrapolate) {
  // quick one-off path when --ball is given without a config
  ExperimentConfig cfg;
  if (!g.config_path.empty()) cfg = load_with_overrides(g);
  if (!g.output_dir.empty()) cfg.output_dir = g.output_dir;
  runtime::set_threads(std::max(1, cfg.threads));

  GridSpec gs = cfg.grid;
  CompactSet F = CompactSet::empty();
  if (ball > 0) {
    gs.omega_halfwidth = std::max(ball + 0.0625, 0.3125);
    gs.omega0_halfwidth = gs.omega_halfwidth + 1.0;
    gs.h = 2.0 * gs.omega0_halfwidth / grid_cells;
    F = CompactSet::ball({0, 0, 0}, ball);
  } else {
    throw ConfigError("capacity cm: provide --ball R (set geometry)");
  }

  CsvWriter csv({"set", "m", "h", "box_halfwidth", "value_raw",
                 "value_whole_space", "value_extrapolated"});
  double raw = 0, whole = 0, extrap = 0;
  if (extrapolate) {
    auto ex = compute_Cm_extrapolated(F, gs, {gs.h * 4.0 / 3.0, gs.h}, cfg.m,
                                      cfg.solver);
    raw = ex.raw.back();
    whole = ex.corrected.back();
    extrap = ex.value;
  } else {
    auto rep = compute_Cm(F, gs, cfg.m, cfg.solver);
    raw = rep.value;
    whole = whole_space_from_box(rep.value, cfg.m,
                                 cube_effective_radius(gs.omega0_halfwidth));
    extrap = whole;
  }
  csv.row({"ball", CsvWriter::num(cfg.m), CsvWriter::num(gs.h),
           CsvWriter::num(gs.omega0_halfwidth), CsvWriter::num(raw),
           CsvWriter::num(whole), CsvWriter::num(extrap)});
  fs::path dir(cfg.output_dir);
  csv.save(dir / "capacity_cm.csv");
  std::printf("%s", csv.text().c_str());
  return 0;
}

int run_capacity_ca(const GlobalArgs& g, double ball, double q, int grid_cells) {
  ExperimentConfig cfg;
  if (!g.config_path.empty()) cfg = load_with_overrides(g);
  if (!g.output_dir.empty()) cfg.output_dir = g.output_dir;
  runtime::set_threads(std::max(1, cfg.threads));
  if (!(ball > 0)) throw ConfigError("capacity ca: provide --ball R");

  GridSpec gs;
  gs.omega_halfwidth = std::max(ball + 0.0625, 0.3125);
  gs.omega0_halfwidth = gs.omega_halfwidth + 1.0;
  gs.h = 2.0 * gs.omega0_halfwidth / grid_cells;
  CompactSet F = CompactSet::ball({0, 0, 0}, ball);
  OperatorSpec op = cfg.make_operator();
  auto rep = compute_CA(op, F, q, gs, cfg.solver);

  CsvWriter csv({"set", "kind", "m", "q", "h", "value"});
  csv.row({"ball", to_string(op.kind), CsvWriter::num(cfg.m), CsvWriter::num(q),
           CsvWriter::num(gs.h), CsvWriter::num(rep.value)});
  fs::path dir(cfg.output_dir);
  csv.save(dir / "capacity_ca.csv");
  atomic_write_file(dir / "capacity_ca.json",
                    capacity_report_json(rep, cfg).dump(2) + "\n");
  std::printf("%s", csv.text().c_str());
  return 0;
}

int run_scan(const GlobalArgs& g) {
  ExperimentConfig cfg = load_with_overrides(g);
  auto opts = cfg.scan;
  opts.solver = cfg.solver;
  if (opts.radii.empty())
    throw ConfigError("capacity scan-b: config needs ladders.scan_radii");
  std::vector<int> sv = cfg.s_values;
  if (sv.empty())
    for (int s = 1; s <= cfg.perforation.count(); ++s) sv.push_back(s);
  auto rep = scan_condition_B(cfg.perforation, sv, cfg.grid, cfg.m, opts);
  CsvWriter csv({"s", "x0", "x1", "x2", "r", "capacity", "density"});
  for (const auto& e : rep.entries)
    csv.row({CsvWriter::num(e.s), CsvWriter::num(e.center[0]),
             CsvWriter::num(e.center[1]), CsvWriter::num(e.center[2]),
             CsvWriter::num(e.r), CsvWriter::num(e.capacity),
             CsvWriter::num(e.density)});
  fs::path dir(cfg.output_dir);
  csv.save(dir / "condition_b.csv");
  std::printf("fitted A = %.6g over %zu cubes (smallest radius %.4g)\n",
              rep.fitted_A, rep.entries.size(), rep.r_s);
  return 0;
}

int run_diag(const GlobalArgs& g, double ball, double q, double r, double cap) {
  ExperimentConfig cfg = load_with_overrides(g);
  GridSpec gs = cfg.grid;
  CompactSet F = CompactSet::ball({0, 0, 0}, ball);
  auto rep = diagnostics_estimates(cfg.make_operator(), F, q,
                                   {0.25 * std::abs(q), 0.5 * std::abs(q),
                                    std::abs(q)},
                                   r, cap, gs, cfg.solver);
  CsvWriter csv({"mu", "sublevel_lhs", "sublevel_ratio"});
  for (std::size_t i = 0; i < rep.mu_list.size(); ++i)
    csv.row({CsvWriter::num(rep.mu_list[i]), CsvWriter::num(rep.sublevel_lhs[i]),
             CsvWriter::num(rep.sublevel_ratio[i])});
  fs::path dir(cfg.output_dir);
  csv.save(dir / "capacity_diag.csv");
  json j;
  j["K1"] = rep.K1;
  j["K2"] = rep.K2;
  j["K3"] = rep.K3;
  j["decay_exponent"] = rep.decay_exponent;
  j["cm_value"] = rep.cm_value;
  j["config_hash"] = hash_hex(cfg.config_hash);
  atomic_write_file(dir / "capacity_diag.json", j.dump(2) + "\n");
  std::printf("fitted K1=%.4g K2=%.4g K3=%.4g decay=%.3f\n", rep.K1, rep.K2,
              rep.K3, rep.decay_exponent);
  return 0;
}

int run_schedule(const GlobalArgs& g) {
  ExperimentConfig cfg = load_with_overrides(g);
  const ScheduleMode mode = cfg.schedule_mode == "paper-formula"
                                ? ScheduleMode::PaperFormula
                                : ScheduleMode::DeskOverride;
  Schedule sch = build_schedule(cfg.rho, cfg.m, mode, cfg.lambda);
  CsvWriter csv({"s", "rho", "mu", "lambda", "lambda_rho", "override"});
  for (int s = 1; s <= sch.count(); ++s)
    csv.row({CsvWriter::num(s), CsvWriter::num(sch.rho_s(s)),
             CsvWriter::num(sch.mu_s(s)), CsvWriter::num(sch.lambda_s(s)),
             CsvWriter::num(sch.lambda_rho(s)),
             CsvWriter::num(int(sch.deviation_from_formula))});
  fs::path dir(cfg.output_dir);
  csv.save(dir / "schedule.csv");
  std::printf("%s", csv.text().c_str());
  return 0;
}

int run_density_cmd(const GlobalArgs& g) {
  ExperimentConfig cfg = load_with_overrides(g);
  std::vector<int> sv = cfg.s_values;
  if (sv.empty())
    for (int s = 1; s <= cfg.perforation.count(); ++s) sv.push_back(s);
  std::vector<Vec3> xs = cfg.x_samples;
  if (xs.empty()) {
    const double d = cfg.perforation.cell_size(sv.front());
    xs.push_back({0.5 * d, 0.5 * d, 0.5 * d});
  }
  std::vector<double> rl = cfg.r_ladder;
  if (rl.empty()) {
    const double d = cfg.perforation.cell_size(sv.front());
    rl = {0.5 * d, d};
  }
  auto opts = cfg.density;
  opts.solver = cfg.solver;
  auto tab = estimate_density(cfg.make_operator(), cfg.perforation, cfg.grid, xs,
                              cfg.q_samples, rl, sv, opts);
  CsvWriter csv({"x0", "x1", "x2", "q", "r", "s", "c_est"});
  for (const auto& e : tab.samples)
    csv.row({CsvWriter::num(e.x[0]), CsvWriter::num(e.x[1]),
             CsvWriter::num(e.x[2]), CsvWriter::num(e.q), CsvWriter::num(e.r),
             CsvWriter::num(e.s), CsvWriter::num(e.c_est)});
  fs::path dir(cfg.output_dir);
  csv.save(dir / "density.csv");
  std::printf("density: c1 = %.6g (stabilized=%d, K6=%.4g, spread=%.3g)\n",
              tab.mean_c1, int(tab.stabilized), tab.K6, tab.uniformity_spread);
  return tab.stabilized ? 0 : 1;
}

int run_corrector_cmd(const GlobalArgs& g) {
  ExperimentConfig cfg = load_with_overrides(g);
  cfg.run_density = false;
  cfg.run_scan = false;
  ExperimentReport rep = run_experiment(cfg);
  write_experiment_outputs(cfg, rep, cfg.output_dir);
  return rep.all_ok ? 0 : 1;
}

int run_full(const GlobalArgs& g) {
  ExperimentConfig cfg = load_with_overrides(g);
  ExperimentReport rep = run_experiment(cfg);
  write_experiment_outputs(cfg, rep, cfg.output_dir);
  std::printf("experiment %s -> %s\n", rep.all_ok ? "complete" : "FAILED",
              cfg.output_dir.c_str());
  return rep.all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"perfhom: nonlinear Dirichlet problems in perforated boxes"};
  app.require_subcommand(1);

  GlobalArgs g;
  app.add_option("--config", g.config_path, "experiment config (JSON)");
  app.add_option("--output", g.output_dir, "output directory override");
  app.add_option("--threads", g.threads, "worker thread cap");
  auto* seed_opt = app.add_option("--seed", g.seed, "sampling seed override");
  app.add_flag("--strict-paper", g.strict_paper,
               "restrict the exponent range and schedule mode");

  auto* validate = app.add_subcommand("validate-config", "parse and echo a config");
  auto* solve = app.add_subcommand("solve", "one Dirichlet solve from the config");
  bool solve_density = false;
  solve->add_flag("--limit", solve_density, "include the zeroth-order term");

  auto* capacity = app.add_subcommand("capacity", "capacity computations");
  capacity->require_subcommand(1);
  auto* cm = capacity->add_subcommand("cm", "m-capacity of a set");
  double ball = 0.0, q_level = 1.0, diag_r = 0.3, diag_cap = 1e6;
  int grid_cells = 64;
  bool extrapolate = false;
  cm->add_option("--ball", ball, "ball radius");
  cm->add_option("--grid", grid_cells, "cells per axis");
  cm->add_flag("--extrapolate", extrapolate, "two-grid extrapolation");
  auto* ca = capacity->add_subcommand("ca", "operator capacity of a set");
  ca->add_option("--ball", ball, "ball radius");
  ca->add_option("--q", q_level, "level");
  ca->add_option("--grid", grid_cells, "cells per axis");
  auto* scanb = capacity->add_subcommand("scan-b", "uniform cube-capacity scan");
  auto* diag = capacity->add_subcommand("diag", "potential estimate diagnostics");
  diag->add_option("--ball", ball, "ball radius");
  diag->add_option("--q", q_level, "level");
  diag->add_option("--r", diag_r, "enclosing cube halfwidth");
  diag->add_option("--cap", diag_cap, "capacity premise constant");

  auto* homog = app.add_subcommand("homog", "homogenization experiments");
  homog->require_subcommand(1);
  auto* sched = homog->add_subcommand("schedule", "build and print the schedule");
  auto* corr = homog->add_subcommand("corrector", "corrector ladder only");
  auto* dens = homog->add_subcommand("density", "capacity-density table only");
  auto* runx = homog->add_subcommand("run", "full experiment");

  CLI11_PARSE(app, argc, argv);
  g.have_seed = seed_opt->count() > 0;

  try {
    if (validate->parsed()) return run_validate(g);
    if (solve->parsed()) return run_solve(g, solve_density);
    if (capacity->parsed()) {
      if (cm->parsed()) return run_capacity_cm(g, ball, grid_cells, extrapolate);
      if (ca->parsed()) return run_capacity_ca(g, ball, q_level, grid_cells);
      if (scanb->parsed()) return run_scan(g);
      if (diag->parsed()) return run_diag(g, ball, q_level, diag_r, diag_cap);
    }
    if (homog->parsed()) {
      if (sched->parsed()) return run_schedule(g);
      if (corr->parsed()) return run_corrector_cmd(g);
      if (dens->parsed()) return run_density_cmd(g);
      if (runx->parsed()) return run_full(g);
    }
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const NonConvergenceError& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 1;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "unexpected error: %s\n", e.what());
    return 1;
  }
  return 2;
}
