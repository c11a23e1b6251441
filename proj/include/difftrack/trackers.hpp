#pragma once

#include <iosfwd>
#include <optional>
#include <vector>

#include "difftrack/obsmaps.hpp"
#include "difftrack/path.hpp"
#include "difftrack/sdesim.hpp"

namespace difftrack {

/// Explicit inverse of the joint map (h,q) for h = e^{x1}-e^{x2},
/// q = e^{2x1}+e^{2x2}, on the domain {y2 > y1^2}. The result carries a
/// forward round-trip check so that inconsistent (noisy) pairs can be
/// rejected by widening rt_tol.
struct Invert2dResult {
  double x1 = 0.0;
  double x2 = 0.0;
  double roundtrip_rel_err = 0.0;
  bool consistent = false;
};

Invert2dResult invert_2d_example(double y1, double y2, double rt_tol = 1e-10);

struct TrackerParams {
  double eta = 3.0;            // decision margin in bootstrap-sd units
  int decision_steps = 200;    // base decision window (grid steps)
  int max_window_doublings = 3;  // extend up to 8x while inconclusive
  int max_inconclusive = 3;    // consecutive inconclusive windows allowed
  double band_factor = 5.0;    // critical band width multiplier
  int qv_steps = 0;            // forward qv window in steps; 0 = auto
  double domain_lo = -10.0;    // search domain for unbounded branches
  double domain_hi = 10.0;
};

/// One critical-point crossing: the two candidate continuations, the
/// integrated squared mismatch between empirical and predicted rates for
/// each, and the decision.
struct BranchDecision {
  double time = 0.0;        // band-exit time of the crossing
  double critical = 0.0;    // the critical point crossed
  double cand_stay = 0.0;   // candidate on the entry side
  double cand_reflect = 0.0;
  double stat_stay = 0.0;
  double stat_reflect = 0.0;
  double gap = 0.0;     // |stat_stay - stat_reflect|
  double margin = 0.0;  // eta * bootstrap sd of the gap
  int chosen = -1;      // 0 = stay, 1 = reflect, -1 = undecided
  bool ambiguous = false;
};

struct TrackResult {
  std::vector<double> times;
  std::vector<double> estimates;  // NaN after ambiguous_from
  std::vector<int> branch;        // monotone-region index per step
  std::vector<BranchDecision> branch_log;
  std::optional<double> ambiguous_from;
};

/// Reconstructs the hidden state from observations alone. Within a monotone
/// region the estimate is the branch inverse of the observation; at each
/// critical-band crossing both candidate continuations are propagated over a
/// decision window and the branch whose predicted rate (g h')^2 best matches
/// the empirical quadratic-variation rate is kept, provided the statistic
/// gap clears eta times its bootstrap noise scale.
TrackResult track_piecewise(const PiecewiseMonotoneMap& pmap,
                            const SdeSpec1D& spec, const ObsPath& obs,
                            double x0, const TrackerParams& params = {});

/// General-diffusion tracking via the Lamperti reduction: the problem is
/// transformed to unit noise with map h o Phi^{-1} and derivative
/// (g h') o Phi^{-1}, tracked there, and mapped back.
TrackResult track_general(const PiecewiseMonotoneMap& pmap,
                          const SdeSpec1D& spec, const ObsPath& obs, double x0,
                          const TrackerParams& params = {});

/// One peeled level of the power-sum series: value w and its level-set mass
/// b (a partial sum of the a_j^{-2}).
struct PeelLevel {
  double w = 0.0;
  double b = 0.0;
};

struct PeelResult {
  std::vector<PeelLevel> levels;  // strictly decreasing in w
  double residual = 0.0;          // relative series mass left unexplained
};

/// Iteratively extracts the ordered distinct values w_k and masses b_k from
/// the power-sum series (given as logs: log_series[n-1] = log h_n). The top
/// value is the stabilized ratio h_{n+1}/h_n, its mass the stabilized
/// h_n / w^n; the level is subtracted and the procedure repeats while the
/// running mass total is below bbar - tol. All arithmetic is in the log
/// domain. The stabilized estimates are then polished jointly by
/// Gauss-Newton on the log-residuals.
PeelResult peel_levels_log(const std::vector<double>& log_series, double bbar,
                           double tol);

/// Convenience wrapper taking raw positive series values.
PeelResult peel_levels(const ExpSumMap& map, const std::vector<double>& series,
                       double tol);

/// Recovers the indicator c in {0,1}^d with |beta(c) - b_value| <= tol,
/// where beta(c) = sum_j c_j a_j^{-2}. Unique by the coefficient condition.
std::vector<int> beta_inverse(const ExpSumMap& map, double b_value,
                              double tol);

/// Full reconstruction: peel the series, invert each level mass to its
/// coordinate indicator, assemble w_j per coordinate, and return
/// x_j = log(w_j / a_j^2) / a_j. Verifies the round trip against the input
/// series.
std::vector<double> reconstruct_expsum(const ExpSumMap& map,
                                       const std::vector<double>& log_series,
                                       double tol);

/// log h_n series for a hidden state, n = 1..N (forward oracle for tests
/// and experiments).
std::vector<double> expsum_log_series(const ExpSumMap& map,
                                      std::span<const double> x, int N);

/// CSV `t,estimate,branch,ambiguous`; JSON sidecar for the branch log.
void write_track_csv(const TrackResult& result, std::ostream& out);
void write_branch_log_json(const TrackResult& result, std::ostream& out);

}  // namespace difftrack
