#pragma once

// End-to-end experiment driver: perforated solves along the ladder, the
// capacity-density estimate, the limit solve with the zeroth-order term, the
// corrector trends, and the report files.

#include <chrono>
#include <map>

#include "perfhom/config.hpp"
#include "perfhom/homogenize.hpp"
#include "perfhom/io.hpp"

namespace perfhom {

struct StageStatus {
  std::string name;
  bool ok = false;
  bool ran = false;
  std::string message;
  double seconds = 0.0;
};

struct PerforatedSolveRow {
  int s = 0;
  double err_u0 = 0.0;      // distance to the limit solution over the inner box
  double err_uD = 0.0;      // distance to the plain hole-free solve
  double energy_measured = 0.0;
  double energy_bound = 0.0;
  std::vector<double> weak_pairings;  // (u_s - u0) against the smooth battery
};

struct CorrectorRow {
  int s = 0;
  double norm_lm = 0.0;        // corrector L_m norm over the inner box
  double grad_lp = 0.0;        // gradient L_{m-1/2} norm
  double grad_lm = 0.0;        // gradient L_m norm
  double probe_max = 0.0;      // largest |flux pairing| over the battery
  bool support_warning = false;
};

struct ExperimentReport {
  std::vector<StageStatus> stages;
  Schedule schedule;
  ConditionBReport bscan;
  DensityTable density;
  std::vector<PerforatedSolveRow> per_s;
  std::vector<CorrectorRow> corrector;
  double u0_energy = 0.0;
  double density_c1 = 0.0;
  bool all_ok = true;
  std::string failed_stage;
  // solution fields, written out with the report
  std::vector<ScalarField> u_s;
  ScalarField u0, uD;
};

namespace detail {

class StageTimer {
 public:
  StageTimer(ExperimentReport& rep, const std::string& name)
      : rep_(rep), t0_(std::chrono::steady_clock::now()) {
    rep_.stages.push_back({name, false, true, "", 0.0});
  }
  template <typename F>
  bool run(F&& body) {
    StageStatus& st = rep_.stages.back();
    try {
      body();
      st.ok = true;
    } catch (const std::exception& e) {
      st.ok = false;
      st.message = e.what();
      rep_.all_ok = false;
      if (rep_.failed_stage.empty()) rep_.failed_stage = st.name;
    }
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                               t0_)
                     .count();
    runtime::log(1, "stage %-12s %s (%.1fs) %s", st.name.c_str(),
                 st.ok ? "ok" : "FAILED", st.seconds, st.message.c_str());
    return st.ok;
  }

 private:
  ExperimentReport& rep_;
  std::chrono::steady_clock::time_point t0_;
};

// Smooth lobes over the inner box for the weak-convergence pairings.
inline std::vector<ScalarField> smooth_battery(const GridSpec& gs, int count) {
  const Grid g = gs.make_grid();
  const double W = gs.omega_halfwidth;
  std::vector<ScalarField> out;
  for (int kf = 0; kf < count; ++kf) {
    const double t = (kf + 1.0) / (count + 1.0);
    const Vec3 c{W * (2 * t - 1) * 0.6,
                 W * (2 * ((kf * 7) % count + 1.0) / (count + 1.0) - 1) * 0.6,
                 W * (2 * ((kf * 3) % count + 1.0) / (count + 1.0) - 1) * 0.6};
    const double rad = 0.4 * W;
    ScalarField z(g);
    parallel_for(g.size(), [&](std::int64_t id) {
      const Vec3 x = g.x(id);
      if (!gs.inside_omega(x)) return;
      const double rr =
          std::sqrt(sq(x[0] - c[0]) + sq(x[1] - c[1]) + sq(x[2] - c[2])) / rad;
      if (rr < 1.0) z[id] = cube(1.0 - rr * rr);
    });
    out.push_back(std::move(z));
  }
  return out;
}

inline double l2_pairing(const ScalarField& a, const ScalarField& b,
                         const std::vector<std::uint8_t>& region) {
  const Grid& g = a.grid;
  return parallel_sum(g.size(), [&](std::int64_t id) {
           if (!region[static_cast<std::size_t>(id)]) return 0.0;
           return a[id] * b[id] * cube(g.h);
         });
}

}  // namespace detail

inline ExperimentReport run_experiment(const ExperimentConfig& cfg) {
  ExperimentReport rep;
  runtime::set_threads(cfg.threads);

  OperatorSpec op;
  GridSpec gs = cfg.grid;
  Grid grid;
  ScalarField f_field;
  std::array<ScalarField, 3> fvec;
  BumpSpec psi{};
  std::vector<int> s_values = cfg.s_values;

  {
    detail::StageTimer t(rep, "setup");
    if (!t.run([&] {
          op = cfg.make_operator();
          gs.validate();
          grid = gs.make_grid();
          f_field = cfg.f.make_field(gs);
          if (cfg.has_fvec)
            for (int d = 0; d < 3; ++d) fvec[d] = cfg.fvec[d].make_field(gs);
          psi = default_bump(gs);
          if (s_values.empty())
            for (int s = 1; s <= cfg.perforation.count(); ++s)
              s_values.push_back(s);
        }))
      return rep;
  }

  {
    detail::StageTimer t(rep, "schedule");
    if (!cfg.rho.empty()) {
      t.run([&] {
        const ScheduleMode mode = cfg.schedule_mode == "paper-formula"
                                      ? ScheduleMode::PaperFormula
                                      : ScheduleMode::DeskOverride;
        rep.schedule = build_schedule(cfg.rho, cfg.m, mode, cfg.lambda);
      });
    } else {
      rep.stages.back().ok = true;
      rep.stages.back().ran = false;
    }
  }

  const bool perforated = cfg.perforation.c0 > 0 && !cfg.perforation.cell_sizes.empty();

  if (cfg.run_scan && perforated && !cfg.scan.radii.empty()) {
    detail::StageTimer t(rep, "scan");
    t.run([&] {
      auto opts = cfg.scan;
      opts.solver = cfg.solver;
      rep.bscan = scan_condition_B(cfg.perforation, s_values, gs, cfg.m, opts);
    });
  }

  // perforated solves along the ladder
  std::vector<ScalarField>& u_s = rep.u_s;
  std::vector<DomainMask> masks;
  {
    detail::StageTimer t(rep, "solve-us");
    if (!t.run([&] {
          const double bound = energy_bound_R(op, f_field,
                                              cfg.has_fvec ? &fvec : nullptr, gs);
          for (int s : s_values) {
            DomainMask mask = perforated
                                  ? build_perforation(cfg.perforation, s, gs)
                                  : [&] {
                                      PerforationFamily none;
                                      none.cell_sizes = {1.0};
                                      none.c0 = 0.0;
                                      return build_perforation(none, 1, gs);
                                    }();
            ProblemSpec spec;
            spec.op = op;
            spec.grid = grid;
            spec.free_mask = free_mask_perforated(mask);
            spec.boundary = f_field;
            if (cfg.has_fvec) spec.fvec = fvec;
            SolveReport sol = solve_dirichlet(spec, cfg.solver);
            PerforatedSolveRow row;
            row.s = s;
            row.energy_bound = bound;
            const auto nsol = norms(sol.solution, cfg.m);
            row.energy_measured =
                std::pow(nsol.w1p_semi, cfg.m) + std::pow(nsol.lp, cfg.m);
            rep.per_s.push_back(row);
            u_s.push_back(std::move(sol.solution));
            masks.push_back(std::move(mask));
          }
        }))
      return rep;
  }

  // capacity density of the perforation
  std::shared_ptr<const DensityHandle> density = std::make_shared<ZeroDensity>();
  if (cfg.run_density && perforated) {
    detail::StageTimer t(rep, "density");
    t.run([&] {
      std::vector<Vec3> xs = cfg.x_samples;
      if (xs.empty()) {
        const double d = cfg.perforation.cell_size(s_values.front());
        xs.push_back({cfg.perforation.anchor[0] + 0.5 * d,
                      cfg.perforation.anchor[1] + 0.5 * d,
                      cfg.perforation.anchor[2] + 0.5 * d});
      }
      std::vector<double> rl = cfg.r_ladder;
      if (rl.empty()) {
        const double d = cfg.perforation.cell_size(s_values.front());
        rl = {0.5 * d, d};
      }
      auto opts = cfg.density;
      opts.solver = cfg.solver;
      rep.density = estimate_density(op, cfg.perforation, gs, xs, cfg.q_samples,
                                     rl, s_values, opts);
      rep.density_c1 = rep.density.mean_c1;
      density = make_density_handle(rep.density, op);
    });
  }

  // limit solve and the plain hole-free solve
  ScalarField& u0 = rep.u0;
  ScalarField& uD = rep.uD;
  {
    detail::StageTimer t(rep, "solve-u0");
    if (!t.run([&] {
          PerforationFamily none;
          none.cell_sizes = {1.0};
          none.c0 = 0.0;
          DomainMask mask = build_perforation(none, 1, gs);
          ProblemSpec spec;
          spec.op = op;
          spec.grid = grid;
          spec.free_mask = free_mask_perforated(mask);
          spec.boundary = f_field;
          if (cfg.has_fvec) spec.fvec = fvec;

          SolveReport plain = solve_dirichlet(spec, cfg.solver);
          uD = std::move(plain.solution);

          spec.density = density;
          SolveReport lim = solve_limit(spec, cfg.solver);
          rep.u0_energy = lim.energy;
          u0 = std::move(lim.solution);
        }))
      return rep;
  }

  // error columns and weak pairings
  {
    detail::StageTimer t(rep, "errors");
    t.run([&] {
      const auto region = omega_region(grid, gs.omega_halfwidth);
      const auto battery = detail::smooth_battery(gs, 10);
      for (std::size_t i = 0; i < u_s.size(); ++i) {
        ScalarField d0 = u_s[i], dD = u_s[i];
        for (std::size_t n = 0; n < d0.v.size(); ++n) {
          d0.v[n] -= u0.v[n];
          dD.v[n] -= uD.v[n];
        }
        rep.per_s[i].err_u0 = norms(d0, cfg.m, &region).lp;
        rep.per_s[i].err_uD = norms(dD, cfg.m, &region).lp;
        for (const auto& z : battery)
          rep.per_s[i].weak_pairings.push_back(detail::l2_pairing(d0, z, region));
      }
    });
  }

  // corrector ladder and flux pairings
  if (cfg.run_corrector && perforated && rep.schedule.count() > 0) {
    detail::StageTimer t(rep, "corrector");
    t.run([&] {
      const auto region = omega_region(grid, gs.omega_halfwidth);
      for (std::size_t i = 0; i < u_s.size(); ++i) {
        const int s = s_values[i];
        if (s > rep.schedule.count()) continue;
        Subdivision sub = build_subdivision(rep.schedule, s, gs);
        ScalarField q_field(grid, cfg.corrector_q_const);
        if (cfg.corrector_q_mode == "mollified") {
          const double hk = std::max(rep.schedule.lambda_rho(s), 2.0 * grid.h);
          ScalarField fs = mollify(f_field, hk);
          ScalarField u0s = mollify(u0, hk);
          ScalarField gb = cfg.g_bump.make_field(gs);
          for (std::int64_t id = 0; id < grid.size(); ++id)
            q_field[id] = fs[id] - u0s[id] - gb[id];
        }
        CorrectorField corr = build_corrector(op, sub, rep.schedule, q_field,
                                              masks[i], psi, gs, cfg.solver);
        CorrectorRow row;
        row.s = s;
        row.support_warning = corr.support_warning;
        row.norm_lm = norms(corr.r, cfg.m, &region).lp;
        row.grad_lp = norms(corr.r, std::max(1.0, cfg.m - 0.5), &region).w1p_semi;
        row.grad_lm = norms(corr.r, cfg.m, &region).w1p_semi;
        auto battery = probe_battery(masks[i], gs, 10);
        auto probe = convergence_probe(op, corr, battery, masks[i], gs);
        row.probe_max = probe.max_abs;
        rep.corrector.push_back(row);
      }
    });
  }

  return rep;
}

// ---------------------------------------------------------------------------
// Report files

inline void write_experiment_outputs(const ExperimentConfig& cfg,
                                     const ExperimentReport& rep,
                                     const fs::path& dir) {
  fs::create_directories(dir);

  if (rep.schedule.count() > 0) {
    CsvWriter csv({"s", "rho", "mu", "lambda", "lambda_rho"});
    for (int s = 1; s <= rep.schedule.count(); ++s)
      csv.row({CsvWriter::num(s), CsvWriter::num(rep.schedule.rho_s(s)),
               CsvWriter::num(rep.schedule.mu_s(s)),
               CsvWriter::num(rep.schedule.lambda_s(s)),
               CsvWriter::num(rep.schedule.lambda_rho(s))});
    csv.save(dir / "schedule.csv");
  }

  if (!rep.bscan.entries.empty()) {
    CsvWriter csv({"s", "x0", "x1", "x2", "r", "capacity", "density"});
    for (const auto& e : rep.bscan.entries)
      csv.row({CsvWriter::num(e.s), CsvWriter::num(e.center[0]),
               CsvWriter::num(e.center[1]), CsvWriter::num(e.center[2]),
               CsvWriter::num(e.r), CsvWriter::num(e.capacity),
               CsvWriter::num(e.density)});
    csv.save(dir / "condition_b.csv");
  }

  if (!rep.density.samples.empty()) {
    CsvWriter csv({"x0", "x1", "x2", "q", "r", "s", "c_est"});
    for (const auto& e : rep.density.samples)
      csv.row({CsvWriter::num(e.x[0]), CsvWriter::num(e.x[1]),
               CsvWriter::num(e.x[2]), CsvWriter::num(e.q), CsvWriter::num(e.r),
               CsvWriter::num(e.s), CsvWriter::num(e.c_est)});
    csv.save(dir / "density.csv");
  }

  if (!rep.per_s.empty()) {
    std::vector<std::string> cols{"s",      "err_u0",          "err_uD",
                                  "energy", "energy_bound"};
    const std::size_t npair =
        rep.per_s.front().weak_pairings.size();
    for (std::size_t k = 0; k < npair; ++k)
      cols.push_back("pairing_" + std::to_string(k));
    CsvWriter csv(cols);
    for (const auto& r : rep.per_s) {
      std::vector<std::string> row{
          CsvWriter::num(r.s), CsvWriter::num(r.err_u0), CsvWriter::num(r.err_uD),
          CsvWriter::num(r.energy_measured), CsvWriter::num(r.energy_bound)};
      for (double p : r.weak_pairings) row.push_back(CsvWriter::num(p));
      while (row.size() < cols.size()) row.push_back(CsvWriter::num(0.0));
      csv.row(row);
    }
    csv.save(dir / "per_s.csv");
  }

  if (!rep.corrector.empty()) {
    CsvWriter csv({"s", "norm_lm", "grad_lp", "grad_lm", "probe_max",
                   "support_warning"});
    for (const auto& r : rep.corrector)
      csv.row({CsvWriter::num(r.s), CsvWriter::num(r.norm_lm),
               CsvWriter::num(r.grad_lp), CsvWriter::num(r.grad_lm),
               CsvWriter::num(r.probe_max),
               CsvWriter::num(int(r.support_warning))});
    csv.save(dir / "corrector.csv");
  }

  for (std::size_t i = 0; i < rep.u_s.size(); ++i)
    write_field(dir / ("u_s" + std::to_string(i + 1) + ".f64"), rep.u_s[i]);
  if (!rep.u0.v.empty()) write_field(dir / "u0.f64", rep.u0);
  if (!rep.uD.v.empty()) write_field(dir / "uD.f64", rep.uD);

  json man;
  man["artifact"] = "perfhom";
  man["version"] = "0.1.0";
  man["config_hash"] = hash_hex(cfg.config_hash);
  man["seed"] = cfg.seed;
  man["threads"] = cfg.threads;
  man["strict_paper"] = cfg.strict_paper;
  man["all_ok"] = rep.all_ok;
  if (!rep.failed_stage.empty()) man["failed_stage"] = rep.failed_stage;
  json stages = json::array();
  for (const auto& st : rep.stages)
    stages.push_back({{"name", st.name},
                      {"ok", st.ok},
                      {"ran", st.ran},
                      {"message", st.message}});
  man["stages"] = stages;
  json fitted;
  fitted["condition_b_A"] = rep.bscan.fitted_A;
  fitted["density_c1"] = rep.density_c1;
  fitted["density_K6"] = rep.density.K6;
  fitted["density_uniformity_spread"] = rep.density.uniformity_spread;
  fitted["density_homogeneity_dev"] = rep.density.homogeneity_dev;
  man["fitted"] = fitted;
  json dev = json::array();
  if (rep.schedule.deviation_from_formula)
    dev.push_back("schedule: desk-override block counts");
  man["deviations"] = dev;
  man["u0_energy"] = rep.u0_energy;
  atomic_write_file(dir / "manifest.json", man.dump(2) + "\n");
}

}  // namespace perfhom
