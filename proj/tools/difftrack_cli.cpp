#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "difftrack/errors.hpp"
#include "difftrack/harness.hpp"
#include "difftrack/obsmaps.hpp"
#include "difftrack/qvest.hpp"
#include "difftrack/sdesim.hpp"
#include "difftrack/symmetry.hpp"
#include "difftrack/trackers.hpp"

namespace {

using namespace difftrack;

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot open output file " + path);
  return out;
}

Path load_path(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open input file " + path);
  return read_path_csv(in);
}

ObsPath as_obs(const Path& p) {
  ObsPath obs;
  obs.times = p.times;
  obs.values = p.states;
  obs.dim = p.dim;
  obs.dt = p.dt;
  return obs;
}

struct GlobalOpts {
  std::uint64_t seed = 1;
  std::string out;
  bool quiet = false;
  int jobs = 1;
};

int run(int argc, char** argv) {
  CLI::App app{"Hidden-state reconstruction from quadratic-variation data"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalOpts g;
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--out", g.out, "Output file or directory");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");
  app.add_option("--jobs", g.jobs, "Worker threads for experiments");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Simulate a path, write CSV");
  std::string sim_sde = "bm";
  int sim_dim = 1;
  double sim_dt = 1e-4, sim_tend = 1.0, sim_x0 = 0.0;
  sim->add_option("--sde", sim_sde, "Diffusion name (bm, sine)");
  sim->add_option("--dim", sim_dim, "Dimension (bm only)");
  sim->add_option("--dt", sim_dt, "Grid step");
  sim->add_option("--t-end", sim_tend, "Horizon");
  sim->add_option("--x0", sim_x0, "Initial state");

  // observe
  auto* obs_cmd = app.add_subcommand("observe", "Apply a map to a path CSV");
  std::string obs_map = "cubic", obs_in;
  std::vector<double> obs_a;
  obs_cmd->add_option("--map", obs_map,
                      "Map name (cubic, square, expsum, example2d)");
  obs_cmd->add_option("--a", obs_a, "Expsum coefficients");
  obs_cmd->add_option("--in", obs_in, "Input path CSV")->required();

  // qv
  auto* qv_cmd = app.add_subcommand("qv", "Quadratic-variation rate series");
  std::string qv_in;
  double qv_window = 0.0;
  int qv_skip = 1;
  std::size_t qv_stride = 1;
  qv_cmd->add_option("--in", qv_in, "Observation CSV")->required();
  qv_cmd->add_option("--window", qv_window, "Window (seconds, 0 = auto)");
  qv_cmd->add_option("--skip", qv_skip, "Increment stride");
  qv_cmd->add_option("--stride", qv_stride, "Output stride");

  // track
  auto* tr_cmd = app.add_subcommand("track", "Track a hidden 1-D state");
  std::string tr_map = "cubic", tr_sde = "bm", tr_in;
  double tr_x0 = 1.0;
  tr_cmd->add_option("--map", tr_map, "Piecewise map name (cubic, square)");
  tr_cmd->add_option("--sde", tr_sde, "Diffusion name (bm, sine)");
  tr_cmd->add_option("--in", tr_in, "Observation CSV")->required();
  tr_cmd->add_option("--x0", tr_x0, "Known initial state");

  // reconstruct
  auto* rc_cmd =
      app.add_subcommand("reconstruct", "Invert an exponential-sum series");
  std::vector<double> rc_a;
  std::string rc_series;
  double rc_tol = 1e-8;
  rc_cmd->add_option("--a", rc_a, "Coefficients")->required();
  rc_cmd->add_option("--series", rc_series,
                     "File with one log-series value per line")->required();
  rc_cmd->add_option("--tol", rc_tol, "Peeling tolerance");

  // symmetry
  auto* sy_cmd = app.add_subcommand("symmetry", "Symmetry scan of a map");
  std::string sy_map = "cubic";
  std::vector<double> sy_a;
  double sy_lo = -2.0, sy_hi = 2.0, sy_tol = 1e-6;
  sy_cmd->add_option("--map", sy_map,
                     "Map name (cubic, square, cos, expsum, example2d)");
  sy_cmd->add_option("--a", sy_a, "Expsum coefficients");
  sy_cmd->add_option("--lo", sy_lo, "Domain lower bound");
  sy_cmd->add_option("--hi", sy_hi, "Domain upper bound");
  sy_cmd->add_option("--tol", sy_tol, "Detection tolerance");

  // experiment
  auto* ex_cmd = app.add_subcommand("experiment", "Run or summarize studies");
  ex_cmd->require_subcommand(1);
  auto* ex_run = ex_cmd->add_subcommand("run", "Run a JSON experiment config");
  std::string ex_config;
  ex_run->add_option("config", ex_config, "Config JSON path")->required();
  auto* ex_table =
      ex_cmd->add_subcommand("table", "Convergence table from a summary");
  std::string ex_summary, ex_metric = "sup_error";
  ex_table->add_option("summary", ex_summary, "summary.json path")->required();
  ex_table->add_option("--metric", ex_metric, "Metric column");

  CLI11_PARSE(app, argc, argv);

  if (sim->parsed()) {
    Path path;
    if (sim_sde == "bm") {
      const std::vector<double> start(static_cast<std::size_t>(sim_dim),
                                      sim_x0);
      path = simulate_bm(sim_dim, sim_tend, sim_dt, g.seed, &start);
    } else {
      const SdeSpec1D spec = registry_sde(sim_sde, sim_x0);
      path = simulate_sde_1d(spec, sim_tend, sim_dt, g.seed);
    }
    if (g.out.empty()) {
      write_path_csv(path, std::cout);
    } else {
      auto out = open_out(g.out);
      write_path_csv(path, out);
    }
    return 0;
  }

  if (obs_cmd->parsed()) {
    const Path path = load_path(obs_in);
    ObsPath obs;
    if (obs_map == "expsum") {
      if (obs_a.empty()) throw ConfigError("observe: expsum needs --a");
      obs = observe(expsum_observation_map(make_expsum_map(obs_a)), path);
    } else if (obs_map == "example2d") {
      obs = observe(make_example2d_map(), path);
    } else {
      obs = observe_scalar(registry_piecewise_map(obs_map).h, path);
    }
    if (g.out.empty()) {
      write_obs_csv(obs, std::cout);
    } else {
      auto out = open_out(g.out);
      write_obs_csv(obs, out);
    }
    return 0;
  }

  if (qv_cmd->parsed()) {
    const ObsPath obs = as_obs(load_path(qv_in));
    const double window =
        qv_window > 0.0 ? qv_window : default_qv_window(obs.dt);
    const RateSeries series = rate_matrix(obs, window, qv_skip, qv_stride);
    if (g.out.empty()) {
      write_rate_series_csv(series, std::cout);
    } else {
      auto out = open_out(g.out);
      write_rate_series_csv(series, out);
    }
    return 0;
  }

  if (tr_cmd->parsed()) {
    const ObsPath obs = as_obs(load_path(tr_in));
    const PiecewiseMonotoneMap pmap = registry_piecewise_map(tr_map);
    const SdeSpec1D spec = registry_sde(tr_sde, tr_x0);
    const TrackResult res =
        tr_sde == "bm" ? track_piecewise(pmap, spec, obs, tr_x0)
                       : track_general(pmap, spec, obs, tr_x0);
    const std::string base = g.out.empty() ? std::string("track") : g.out;
    {
      auto out = open_out(base + ".csv");
      write_track_csv(res, out);
    }
    {
      auto out = open_out(base + "_branches.json");
      write_branch_log_json(res, out);
    }
    if (!g.quiet)
      std::cerr << "crossings: " << res.branch_log.size() << ", ambiguous: "
                << (res.ambiguous_from ? "yes" : "no") << '\n';
    return 0;
  }

  if (rc_cmd->parsed()) {
    std::ifstream in(rc_series);
    if (!in) throw ConfigError("cannot open series file " + rc_series);
    std::vector<double> logs;
    double v;
    while (in >> v) logs.push_back(v);
    const ExpSumMap map = make_expsum_map(rc_a);
    const std::vector<double> x = reconstruct_expsum(map, logs, rc_tol);
    for (std::size_t j = 0; j < x.size(); ++j)
      std::cout << format_double(x[j]) << (j + 1 < x.size() ? "," : "\n");
    return 0;
  }

  if (sy_cmd->parsed()) {
    SymmetryReport report;
    if (sy_map == "cos") {
      report = detect_symmetries_1d([](double x) { return std::cos(x); },
                                    sy_lo, sy_hi, 2000, sy_tol);
    } else if (sy_map == "expsum") {
      if (sy_a.empty()) throw ConfigError("symmetry: expsum needs --a");
      const ExpSumMap em = make_expsum_map(sy_a);
      Box box{Eigen::VectorXd::Constant(em.dim(), sy_lo),
              Eigen::VectorXd::Constant(em.dim(), sy_hi)};
      report = detect_reflections_nd(expsum_observation_map(em), box, 10,
                                     sy_tol, g.seed);
    } else if (sy_map == "example2d") {
      Box box{Eigen::VectorXd::Constant(2, sy_lo),
              Eigen::VectorXd::Constant(2, sy_hi)};
      report =
          detect_reflections_nd(make_example2d_map(), box, 10, sy_tol, g.seed);
    } else {
      const ScalarFunc h = registry_piecewise_map(sy_map).h;
      report = detect_symmetries_1d(h, sy_lo, sy_hi, 2000, sy_tol);
    }
    if (g.out.empty()) {
      write_symmetry_report_json(report, std::cout);
    } else {
      auto out = open_out(g.out);
      write_symmetry_report_json(report, out);
    }
    if (!g.quiet) std::cerr << "verdict: " << to_string(report.verdict) << '\n';
    return 0;
  }

  if (ex_run->parsed()) {
    ExperimentConfig config = load_experiment_config(ex_config);
    if (!g.out.empty()) config.out_dir = g.out;
    const ExperimentSummary summary = run_experiment(config, g.jobs);
    if (!g.quiet)
      std::cerr << "cells: " << summary.cells.size()
                << (summary.any_failed ? " (some failed)" : " (all ok)")
                << ", outputs in " << config.out_dir << '\n';
    return summary.any_failed ? 4 : 0;
  }

  if (ex_table->parsed()) {
    std::ifstream in(ex_summary);
    if (!in) throw ConfigError("cannot open summary " + ex_summary);
    nlohmann::json j;
    in >> j;
    ExperimentSummary summary;
    try {
      summary.experiment = j.at("experiment").get<std::string>();
      summary.metric_names =
          j.at("metric_names").get<std::vector<std::string>>();
      for (const auto& cj : j.at("cells")) {
        CellResult c;
        c.dt = cj.at("dt").get<double>();
        c.seed = cj.at("seed").get<std::uint64_t>();
        c.ok = cj.at("ok").get<bool>();
        for (const std::string& name : summary.metric_names) {
          const auto& m = cj.at("metrics").at(name);
          c.metrics.push_back(m.is_null()
                                  ? std::numeric_limits<double>::quiet_NaN()
                                  : m.get<double>());
        }
        summary.cells.push_back(std::move(c));
      }
    } catch (const nlohmann::json::exception& ex) {
      throw ConfigError(std::string("summary: ") + ex.what());
    }
    const auto rows = convergence_table(summary, ex_metric);
    if (g.out.empty()) {
      write_convergence_csv(rows, std::cout);
    } else {
      auto out = open_out(g.out);
      write_convergence_csv(rows, out);
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << '\n';
    return 2;
  } catch (const ParameterError& ex) {
    std::cerr << "config error: " << ex.what() << '\n';
    return 2;
  } catch (const Error& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 3;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 3;
  }
}
