#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "difftrack/obsmaps.hpp"
#include "difftrack/sdesim.hpp"
#include "difftrack/trackers.hpp"

namespace difftrack {

/// One experiment run over a (dt list) x (seed count) grid. Parsed from a
/// single JSON document; unknown keys are rejected so that typos fail loudly
/// instead of silently falling back to defaults.
struct ExperimentConfig {
  std::string experiment;  // E1_tracker_convergence .. E5_symmetry_scan
  std::string map_name;    // registry: cubic, square, cos, expsum, example2d
  std::vector<double> map_a;  // expsum coefficients
  std::string sde_name = "bm";  // registry: bm, sine
  std::vector<double> dts;      // strictly decreasing
  double t_end = 1.0;
  int seed_count = 1;
  std::uint64_t master_seed = 1;
  double x0 = 1.0;
  TrackerParams tracker;
  double window = 0.0;  // qv window; 0 = default_qv_window(dt)
  int series_n = 40;    // power-series length for reconstruction
  int state_dim = 2;    // hidden dimension where the map does not fix it
  std::string out_dir = "out";
};

ExperimentConfig parse_experiment_config(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

/// Named map registry used by configs and the CLI.
PiecewiseMonotoneMap registry_piecewise_map(const std::string& name);
SdeSpec1D registry_sde(const std::string& name, double x0);

struct CellResult {
  double dt = 0.0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::vector<double> metrics;  // aligned with ExperimentSummary::metric_names
};

struct ExperimentSummary {
  std::string experiment;
  std::vector<std::string> metric_names;
  std::vector<CellResult> cells;  // every (dt, seed) pair exactly once
  bool any_failed = false;
};

/// Runs all cells (optionally across threads), writes cells.csv,
/// summary.json and report.txt under config.out_dir, plus metadata.json
/// carrying the only timestamp. Cell failures are recorded, not fatal.
ExperimentSummary run_experiment(const ExperimentConfig& config, int jobs = 1);

struct ConvergenceRow {
  double dt = 0.0;
  double median = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
  std::optional<double> order;  // vs the previous (coarser) row
};

/// Per-dt quartiles of one metric with empirical convergence order
/// log(err_prev/err)/log(dt_prev/dt).
std::vector<ConvergenceRow> convergence_table(const ExperimentSummary& summary,
                                              const std::string& metric);

void write_cells_csv(const ExperimentSummary& summary, std::ostream& out);
void write_summary_json(const ExperimentSummary& summary, std::ostream& out);
void write_convergence_csv(const std::vector<ConvergenceRow>& rows,
                           std::ostream& out);

/// Quantile of a sample (linear interpolation); used for experiment
/// aggregation and the acceptance harness.
double quantile(std::vector<double> values, double q);

}  // namespace difftrack
