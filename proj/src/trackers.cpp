#include "difftrack/trackers.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <utility>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <nlohmann/json.hpp>

#include "difftrack/errors.hpp"
#include "difftrack/qvest.hpp"
#include "difftrack/rng.hpp"
#include "difftrack/rootfind.hpp"

namespace difftrack {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// 2-D explicit inverter

}  // namespace

Invert2dResult invert_2d_example(double y1, double y2, double rt_tol) {
  if (!(y2 - y1 * y1 > 1e-12 * std::max(1.0, std::abs(y2))))
    throw RangeError("invert_2d_example: y2 <= y1^2, outside the inverse domain");
  const double s = std::sqrt(2.0 * y2 - y1 * y1);
  const double u = 0.5 * (s + y1);  // e^{x1}
  const double v = 0.5 * (s - y1);  // e^{x2}
  Invert2dResult res;
  res.x1 = std::log(u);
  res.x2 = std::log(v);
  const double h = u - v;
  const double q = u * u + v * v;
  res.roundtrip_rel_err = std::max(std::abs(h - y1) / (1.0 + std::abs(y1)),
                                   std::abs(q - y2) / (1.0 + std::abs(y2)));
  res.consistent = res.roundtrip_rel_err <= rt_tol;
  return res;
}

// ---------------------------------------------------------------------------
// Piecewise-monotone tracker

namespace {

// Forward-looking realized-variance rate at grid index k (germ fields are
// right limits; the decision statistic only uses data after the crossing).
double forward_qv(const ObsPath& obs, std::size_t k, int steps) {
  const std::size_t last = obs.size() - 1;
  if (k >= last) k = last - 1;
  const std::size_t end = std::min(last, k + static_cast<std::size_t>(steps));
  double sum = 0.0;
  for (std::size_t i = k; i < end; ++i) {
    const double d = obs.values[i + 1] - obs.values[i];
    sum += d * d;
  }
  return sum / (static_cast<double>(end - k) * obs.dt);
}

class PiecewiseTracker {
 public:
  PiecewiseTracker(const PiecewiseMonotoneMap& pmap, const SdeSpec1D& spec,
                   const ObsPath& obs, double x0, const TrackerParams& params)
      : pmap_(pmap), spec_(spec), obs_(obs), x0_(x0), p_(params) {
    if (obs.dim != 1)
      throw ParameterError("track_piecewise: observation must be scalar");
    if (obs.size() < 3) throw ParameterError("track_piecewise: path too short");
    for (double c : pmap.criticals)
      if (std::abs(x0 - c) < 1e-9)
        throw ParameterError("track_piecewise: x0 is a critical point");
    const double y0 = obs.values[0];
    if (std::abs(pmap.h(x0) - y0) > 1e-6 * (1.0 + std::abs(y0)))
      throw ParameterError("track_piecewise: h(x0) does not match obs[0]");
    qv_steps_ = p_.qv_steps > 0
                    ? p_.qv_steps
                    : std::max<int>(20, static_cast<int>(std::ceil(
                                            default_qv_window(obs.dt) / obs.dt)));
  }

  TrackResult run() {
    const std::size_t n = obs_.size();
    res_.times = obs_.times;
    res_.estimates.assign(n, kNaN);
    res_.branch.assign(n, -1);

    region_ = region_of(x0_);
    xhat_ = x0_;
    res_.estimates[0] = x0_;
    res_.branch[0] = region_;

    std::size_t k = 1;
    while (k < n) {
      const double y = obs_.values[k];
      const int ci = band_entry(k, y);
      if (ci >= 0) {
        k = handle_crossing(k, ci);
        if (res_.ambiguous_from) break;
        continue;
      }
      try {
        xhat_ = invert_region(region_, y);
      } catch (const RangeError&) {
        // Observation left the range of the hypothesised region: an earlier
        // sub-margin alias choice was wrong and cannot be repaired at this
        // resolution. Abandon from the first unresolved crossing.
        res_.ambiguous_from =
            pending_from_ ? pending_from_ : std::optional<double>(obs_.times[k]);
        const std::size_t from = pending_from_ ? pending_index_ : k;
        for (std::size_t j = from; j < n; ++j) {
          res_.estimates[j] = kNaN;
          res_.branch[j] = -1;
        }
        break;
      }
      res_.estimates[k] = xhat_;
      res_.branch[k] = region_;
      ++k;
    }
    return std::move(res_);
  }

 private:
  double predicted_rate(double x) const {
    const double v = spec_.diffusion(x) * pmap_.hprime(x);
    const double r = v * v;
    if (!std::isfinite(r))
      throw ModelError("track_piecewise: predicted rate is not finite");
    return r;
  }

  int region_of(double x) const {
    int r = 0;
    for (double c : pmap_.criticals)
      if (x > c) ++r;
    return r;
  }

  double region_lo(int region) const {
    return region == 0 ? p_.domain_lo
                       : pmap_.criticals[static_cast<std::size_t>(region - 1)];
  }

  double region_hi(int region) const {
    return region == static_cast<int>(pmap_.criticals.size())
               ? p_.domain_hi
               : pmap_.criticals[static_cast<std::size_t>(region)];
  }

  double invert_region(int region, double y) const {
    return branch_inverse(pmap_, region_lo(region), region_hi(region), y);
  }

  // delta_c: must dominate the one-step observation fluctuation.
  double band_width(std::size_t ci, std::size_t k) const {
    const double c = pmap_.criticals[ci];
    const auto [l, r] = pmap_.brackets[ci];
    const double range = std::min(std::abs(pmap_.h(l) - pmap_.h(c)),
                                  std::abs(pmap_.h(r) - pmap_.h(c)));
    const double rate = forward_qv(obs_, k, qv_steps_);
    return std::max(p_.band_factor * std::sqrt(std::max(rate, 0.0) * obs_.dt),
                    1e-4 * range);
  }

  // Returns the index of the critical point whose band the observation has
  // entered, or -1. Only criticals bounding the current region and whose
  // bracket contains the running estimate are eligible.
  int band_entry(std::size_t k, double y) {
    for (int ci : {region_ - 1, region_}) {
      if (ci < 0 || ci >= static_cast<int>(pmap_.criticals.size())) continue;
      const auto su = static_cast<std::size_t>(ci);
      const auto [l, r] = pmap_.brackets[su];
      if (!(xhat_ > l && xhat_ < r)) continue;
      const double hc = pmap_.h(pmap_.criticals[su]);
      if (std::abs(y - hc) < band_width(su, k)) return ci;
    }
    return -1;
  }

  struct ExcursionStat {
    double stat_stay = 0.0;
    double stat_reflect = 0.0;
    double gap = 0.0;
    double margin = 0.0;
    double max_dev = 0.0;       // max |y - h(c)| over the excursion
    double power = 0.0;         // gap the excursion would show alias-free
    std::size_t end = 0;        // one past the last index consumed
    std::size_t used = 0;       // complete comparison blocks
    bool any = false;           // any statistic data at all
    bool left_bracket = false;  // stopped at the bracket level boundary
  };

  // Statistic over one excursion away from the band: blockwise comparison of
  // the realized quadratic variation of Y with the integrated predicted rate
  // along each candidate alias. Blocks are one qv correlation length, so
  // their contributions are independent; a trailing partial block enters the
  // statistic (variance-scaled) but not the bootstrap. The scan stops at
  // band re-entry, at the bracket level boundary, or at the end of the data.
  ExcursionStat excursion_statistic(std::size_t start, std::size_t ci,
                                    double delta, bool entry_left) {
    const double c = pmap_.criticals[ci];
    const auto [l, r] = pmap_.brackets[ci];
    const double hc = pmap_.h(c);
    const double hl = pmap_.h(l);
    const double dt = obs_.dt;
    const std::size_t L = static_cast<std::size_t>(qv_steps_);
    const std::size_t n = obs_.size();

    ExcursionStat ws;
    std::vector<double> contrib;
    double realized = 0.0, pred_stay = 0.0, pred_reflect = 0.0;
    std::size_t in_block = 0;
    std::size_t u = start;
    for (; u < n; ++u) {
      const double y = obs_.values[u];
      if (std::abs(y - hc) < delta) break;  // band re-entry
      if ((y - hc) * (hl - hc) < 0.0 ||
          std::abs(y - hc) > std::abs(hl - hc)) {
        ws.left_bracket = true;
        break;
      }
      ws.max_dev = std::max(ws.max_dev, std::abs(y - hc));
      if (u + 1 >= n) { ++u; break; }  // no increment left
      const double dy = obs_.values[u + 1] - obs_.values[u];
      realized += dy * dy;
      const double cand_l = branch_inverse(pmap_, l, c, y);
      const double cand_r = branch_inverse(pmap_, c, r, y);
      const double rl = predicted_rate(cand_l) * dt;
      const double rr = predicted_rate(cand_r) * dt;
      pred_stay += entry_left ? rl : rr;
      pred_reflect += entry_left ? rr : rl;
      if (++in_block == L) {
        const double e_stay = (realized - pred_stay) * (realized - pred_stay);
        const double e_refl =
            (realized - pred_reflect) * (realized - pred_reflect);
        ws.stat_stay += e_stay;
        ws.stat_reflect += e_refl;
        ws.power += (pred_stay - pred_reflect) * (pred_stay - pred_reflect);
        contrib.push_back(e_stay - e_refl);
        ++ws.used;
        ws.any = true;
        realized = pred_stay = pred_reflect = 0.0;
        in_block = 0;
      }
    }
    ws.end = u;
    if (in_block >= 4) {
      const double scale =
          static_cast<double>(L) / static_cast<double>(in_block);
      ws.stat_stay += scale * (realized - pred_stay) * (realized - pred_stay);
      ws.stat_reflect +=
          scale * (realized - pred_reflect) * (realized - pred_reflect);
      ws.any = true;
    }
    ws.gap = std::abs(ws.stat_stay - ws.stat_reflect);

    // Bootstrap noise scale of the block contrast sum.
    const std::size_t m = contrib.size();
    if (m > 1) {
      SplitMix64 boot(0x5DEECE66Dull + start);
      const int B = 64;
      double mean = 0.0, m2 = 0.0;
      for (int b = 0; b < B; ++b) {
        double sum = 0.0;
        for (std::size_t i = 0; i < m; ++i)
          sum += contrib[boot.next_u64() % m];
        const double d = sum - mean;
        mean += d / (b + 1);
        m2 += d * (sum - mean);
      }
      ws.margin = p_.eta * std::sqrt(m2 / (B - 1));
    }
    // Floor against round-off in the branch inverses: an exactly even map
    // gives a gap at solver-noise level, never a decision.
    ws.margin = std::max(
        ws.margin, 1e-6 * std::max(ws.stat_stay, ws.stat_reflect));
    return ws;
  }

  // A decision needs enough blocks, a gap beyond the noise margin, and an
  // excursion that could have produced such a gap if one alias were exact.
  bool decisive(const ExcursionStat& ws) const {
    return ws.used >= 8 && ws.gap > ws.margin && ws.power > ws.margin;
  }

  // A band visit plus the following excursion. Fills the consumed stretch
  // with the assigned alias and returns the resume index. A decisive
  // excursion is logged as a branch decision; a sub-margin one gets the
  // maximum-likelihood alias, and if it was informative (a material
  // excursion) it counts toward the permanent-ambiguity rule.
  std::size_t handle_crossing(std::size_t k_enter, int ci_signed) {
    const std::size_t n = obs_.size();
    const auto ci = static_cast<std::size_t>(ci_signed);
    const double c = pmap_.criticals[ci];
    const auto [l, r] = pmap_.brackets[ci];
    const double hc = pmap_.h(c);
    const double hl = pmap_.h(l);
    const double delta = band_width(ci, k_enter);
    const bool entry_left = xhat_ < c;

    // Scan through the band.
    std::size_t k = k_enter;
    while (k < n && std::abs(obs_.values[k] - hc) < delta) ++k;
    const std::size_t k_exit = k;
    if (!pending_from_) {
      pending_from_ = obs_.times[std::min(k_exit, n - 1)];
      pending_index_ = k_enter;
    }
    if (k_exit == n) {
      // Path ends inside the band; fill with the entry side.
      fill(k_enter, n, ci, entry_left, entry_left);
      return n;
    }

    const ExcursionStat ws = excursion_statistic(k_exit, ci, delta, entry_left);

    bool stay = true;
    if (decisive(ws)) {
      stay = ws.stat_stay <= ws.stat_reflect;
      BranchDecision dec = make_decision(ws, ci, k_exit, entry_left);
      dec.chosen = stay ? 0 : 1;
      dec.ambiguous = false;
      res_.branch_log.push_back(dec);
      strikes_ = 0;
      pending_from_.reset();
    } else {
      // Below one complete block the statistic is noise; a micro visit
      // keeps the entry side.
      stay = ws.used == 0 || ws.stat_stay <= ws.stat_reflect;
      // An obstructed excursion: long enough to decide, yet the aliases
      // predict indistinguishable rates. Repeated ones mean the map cannot
      // disambiguate this crossing at all.
      const bool obstructed =
          (ws.used >= 8 || ws.left_bracket) && ws.power <= 0.1 * ws.margin;
      if (obstructed)
        strikes_ += std::max<int>(1, static_cast<int>(ws.used) / 8);
      if (obstructed && strikes_ >= p_.max_inconclusive) {
        BranchDecision dec = make_decision(ws, ci, k_exit, entry_left);
        dec.chosen = -1;
        dec.ambiguous = true;
        res_.branch_log.push_back(dec);
        res_.ambiguous_from = pending_from_;
        for (std::size_t j = pending_index_; j < n; ++j) {
          res_.estimates[j] = kNaN;
          res_.branch[j] = -1;
        }
        return n;
      }
    }

    fill(k_enter, k_exit, ci, entry_left, stay);          // band stretch
    fill_excursion(k_exit, ws.end, ci, entry_left, stay);  // excursion stretch
    const int side_region = region_for(ci, entry_left == stay);
    region_ = side_region;
    if (ws.end > k_enter) xhat_ = res_.estimates[ws.end - 1];
    return std::max(ws.end, k_enter + 1);
  }

  BranchDecision make_decision(const ExcursionStat& ws, std::size_t ci,
                               std::size_t k_exit, bool entry_left) const {
    const double c = pmap_.criticals[ci];
    const auto [l, r] = pmap_.brackets[ci];
    BranchDecision dec;
    dec.time = obs_.times[k_exit];
    dec.critical = c;
    const double hc = pmap_.h(c);
    const double lim = pmap_.h(l) - hc;
    double dy = obs_.values[k_exit] - hc;
    if (dy * lim < 0.0) dy = 0.0;  // wrong side of the level: at the critical
    if (std::abs(dy) > std::abs(lim)) dy = lim;
    const double y = hc + dy;
    const double cl = branch_inverse(pmap_, l, c, y);
    const double cr = branch_inverse(pmap_, c, r, y);
    dec.cand_stay = entry_left ? cl : cr;
    dec.cand_reflect = entry_left ? cr : cl;
    dec.stat_stay = ws.stat_stay;
    dec.stat_reflect = ws.stat_reflect;
    dec.gap = ws.gap;
    dec.margin = ws.margin;
    return dec;
  }

  // Region index on the given side of critical ci.
  int region_for(std::size_t ci, bool left) const {
    return left ? static_cast<int>(ci) : static_cast<int>(ci) + 1;
  }

  // Fill a band stretch with the in-bracket alias on the assigned side.
  void fill(std::size_t from, std::size_t to, std::size_t ci, bool entry_left,
            bool stay) {
    const double c = pmap_.criticals[ci];
    const auto [l, r] = pmap_.brackets[ci];
    const bool left = entry_left == stay;
    const double blo = left ? l : c;
    const double bhi = left ? c : r;
    const int reg = region_for(ci, left);
    const double hc = pmap_.h(c);
    const double lim = pmap_.h(l) - hc;
    for (std::size_t j = from; j < to; ++j) {
      double dy = obs_.values[j] - hc;
      if (dy * lim < 0.0) dy = 0.0;
      if (std::abs(dy) > std::abs(lim)) dy = lim;
      res_.estimates[j] = branch_inverse(pmap_, blo, bhi, hc + dy);
      res_.branch[j] = reg;
    }
  }

  void fill_excursion(std::size_t from, std::size_t to, std::size_t ci,
                      bool entry_left, bool stay) {
    fill(from, to, ci, entry_left, stay);
  }

  const PiecewiseMonotoneMap& pmap_;
  const SdeSpec1D& spec_;
  const ObsPath& obs_;
  double x0_;
  TrackerParams p_;
  int qv_steps_ = 0;

  TrackResult res_;
  int region_ = 0;
  double xhat_ = 0.0;
  int strikes_ = 0;
  std::optional<double> pending_from_;  // first unresolved crossing time
  std::size_t pending_index_ = 0;
};

}  // namespace

TrackResult track_piecewise(const PiecewiseMonotoneMap& pmap,
                            const SdeSpec1D& spec, const ObsPath& obs,
                            double x0, const TrackerParams& params) {
  return PiecewiseTracker(pmap, spec, obs, x0, params).run();
}

TrackResult track_general(const PiecewiseMonotoneMap& pmap,
                          const SdeSpec1D& spec, const ObsPath& obs, double x0,
                          const TrackerParams& params) {
  const LampertiTable table(spec, params.domain_lo, params.domain_hi);

  const ScalarFunc g = spec.diffusion;
  const ScalarFunc h = pmap.h;
  const ScalarFunc hp = pmap.hprime;
  ScalarFunc h_t = [&table, h](double u) { return h(table.inverse(u)); };
  ScalarFunc hp_t = [&table, g, hp](double u) {
    const double x = table.inverse(u);
    return g(x) * hp(x);
  };
  std::vector<double> criticals_t;
  std::vector<std::pair<double, double>> brackets_t;
  for (std::size_t i = 0; i < pmap.criticals.size(); ++i) {
    criticals_t.push_back(table.phi(pmap.criticals[i]));
    brackets_t.emplace_back(table.phi(pmap.brackets[i].first),
                            table.phi(pmap.brackets[i].second));
  }
  const PiecewiseMonotoneMap pmap_t =
      make_piecewise_map(h_t, hp_t, criticals_t, brackets_t);

  SdeSpec1D unit;
  unit.drift = [](double) { return 0.0; };
  unit.diffusion = [](double) { return 1.0; };
  unit.diffusion_prime = [](double) { return 0.0; };
  unit.g_min = 0.5;
  unit.g_max = 2.0;
  unit.gprime_max = 1.0;
  unit.x0 = table.phi(x0);

  TrackerParams params_t = params;
  params_t.domain_lo = table.phi(params.domain_lo);
  params_t.domain_hi = table.phi(params.domain_hi);

  TrackResult res = track_piecewise(pmap_t, unit, obs, unit.x0, params_t);

  // Map the transformed-coordinate results back.
  for (double& e : res.estimates)
    if (std::isfinite(e)) e = table.inverse(e);
  for (BranchDecision& d : res.branch_log) {
    d.critical = table.inverse(d.critical);
    d.cand_stay = table.inverse(d.cand_stay);
    d.cand_reflect = table.inverse(d.cand_reflect);
  }
  return res;
}

// ---------------------------------------------------------------------------
// Exponential-sum power peeling

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// log(e^a - e^b) for a > b; -inf when the difference is lost to cancellation.
double log_sub(double a, double b) {
  if (b == kNegInf) return a;
  const double d = b - a;
  if (d >= -1e-15) return kNegInf;
  return a + std::log1p(-std::exp(d));
}

struct PeelState {
  std::vector<double> lr;     // log residual series, index i <-> n = i+1
  std::vector<double> floor_;  // accumulated cancellation noise floor (log)
};

// Indices still carrying signal: a contiguous prefix, since the residual of
// a peeled level decays geometrically relative to what was subtracted.
std::size_t valid_prefix(const PeelState& st) {
  std::size_t m = 0;
  const double head = std::log(10.0);
  while (m < st.lr.size() && std::isfinite(st.lr[m]) &&
         st.lr[m] > st.floor_[m] + head)
    ++m;
  return m;
}

// Joint fit of K geometric components to the log-residual prefix lr[0..m)
// via a Prony linear-recurrence least-squares fit. Returns the fitted levels
// and the max log-residual on the prefix, or nullopt when the fit is invalid
// (complex, non-positive, or coincident rates; non-positive masses).
std::optional<std::pair<std::vector<PeelLevel>, double>> prony_remaining(
    const PeelState& st, std::size_t m, std::size_t K, double mass) {
  if (!(mass > 0.0)) return std::nullopt;
  if (K == 1) {
    // One level of known mass: its rate is a weighted regression of
    // (lr_n - log mass) / n, the weight favouring the low-noise early terms.
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double n = static_cast<double>(i + 1);
      const double sigma = std::max(1e-15, std::exp(st.floor_[i] - st.lr[i]));
      const double wt = (n / sigma) * (n / sigma);
      num += wt * (st.lr[i] - std::log(mass)) / n;
      den += wt;
    }
    const double lnw = num / den;
    if (!std::isfinite(lnw)) return std::nullopt;
    std::vector<PeelLevel> levels{{std::exp(lnw), mass}};
    double max_rel = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double lmodel = std::log(mass) + static_cast<double>(i + 1) * lnw;
      const double allow = 3.0 * std::exp(st.floor_[i] - st.lr[i]);
      max_rel = std::max(max_rel, std::abs(lmodel - st.lr[i]) - allow);
    }
    return std::make_pair(std::move(levels), std::max(0.0, max_rel));
  }
  if (m + 1 < 2 * K) return std::nullopt;
  // Normalize by the mean slope so the working values stay O(1) at the ends.
  // The known mass is the n = 0 moment; index n maps to s[n].
  const double c =
      (st.lr[m - 1] - st.lr[0]) / static_cast<double>(m - 1);
  std::vector<double> s(m + 1), snoise(m + 1);
  s[0] = mass;
  snoise[0] = 1e-12 * mass;
  for (std::size_t n = 1; n <= m; ++n) {
    s[n] = std::exp(st.lr[n - 1] - static_cast<double>(n) * c);
    snoise[n] =
        s[n] * std::max(1e-14,
                        3.0 * std::exp(st.floor_[n - 1] - st.lr[n - 1]));
  }

  // Recurrence rows, whitened by the noise of their target moment.
  const std::size_t rows = m + 1 - K;
  Eigen::MatrixXd A(static_cast<Eigen::Index>(rows),
                    static_cast<Eigen::Index>(K));
  Eigen::VectorXd rhs(static_cast<Eigen::Index>(rows));
  for (std::size_t i = 0; i < rows; ++i) {
    const double wt = 1.0 / snoise[i + K];
    for (std::size_t k = 0; k < K; ++k)
      A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) =
          wt * s[i + K - 1 - k];
    rhs[static_cast<Eigen::Index>(i)] = wt * s[i + K];
  }
  const Eigen::VectorXd coef = A.colPivHouseholderQr().solve(rhs);

  // Recurrence roots are the normalized rates.
  Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(K),
                                               static_cast<Eigen::Index>(K));
  for (std::size_t k = 0; k < K; ++k)
    comp(0, static_cast<Eigen::Index>(k)) = coef[static_cast<Eigen::Index>(k)];
  for (std::size_t k = 1; k < K; ++k)
    comp(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(k - 1)) = 1.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(comp);
  std::vector<double> rho(K);
  for (std::size_t k = 0; k < K; ++k) {
    const std::complex<double> z = es.eigenvalues()[static_cast<Eigen::Index>(k)];
    if (std::abs(z.imag()) > 1e-8 * (1.0 + std::abs(z.real())))
      return std::nullopt;
    if (!(z.real() > 0.0)) return std::nullopt;
    rho[k] = z.real();
  }
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = i + 1; j < K; ++j)
      if (std::abs(rho[i] - rho[j]) <= 1e-8 * std::max(rho[i], rho[j]))
        return std::nullopt;

  // Masses by relative-weighted linear least squares on the prefix, with the
  // known remaining mass as an equality constraint (the last mass is
  // eliminated).
  Eigen::MatrixXd M(static_cast<Eigen::Index>(m + 1),
                    static_cast<Eigen::Index>(K - 1));
  Eigen::VectorXd rhs2(static_cast<Eigen::Index>(m + 1));
  for (std::size_t n = 0; n <= m; ++n) {
    const double wt = 1.0 / snoise[n];
    const double plast = std::pow(rho[K - 1], static_cast<double>(n));
    for (std::size_t k = 0; k + 1 < K; ++k)
      M(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)) =
          wt * (std::pow(rho[k], static_cast<double>(n)) - plast);
    rhs2[static_cast<Eigen::Index>(n)] = wt * (s[n] - mass * plast);
  }
  const Eigen::VectorXd bfit = M.colPivHouseholderQr().solve(rhs2);

  std::vector<PeelLevel> levels(K);
  double bsum = 0.0;
  for (std::size_t k = 0; k + 1 < K; ++k) {
    const double bk = bfit[static_cast<Eigen::Index>(k)];
    if (!(bk > 0.0)) return std::nullopt;
    levels[k] = {rho[k] * std::exp(c), bk};
    bsum += bk;
  }
  if (!(mass - bsum > 0.0)) return std::nullopt;
  levels[K - 1] = {rho[K - 1] * std::exp(c), mass - bsum};
  // Residual in excess of the per-index noise allowance implied by the
  // accumulated cancellation floor.
  double max_rel = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    double lmodel = kNegInf;
    for (const PeelLevel& lv : levels)
      lmodel = log_add(lmodel, std::log(lv.b) +
                                   static_cast<double>(i + 1) * std::log(lv.w));
    const double allow = 3.0 * std::exp(st.floor_[i] - st.lr[i]);
    max_rel =
        std::max(max_rel, std::abs(lmodel - st.lr[i]) - allow);
  }
  return std::make_pair(std::move(levels), std::max(0.0, max_rel));
}

// Joint Gauss-Newton polish of (log w_k, log b_k) against log h_n at the
// given powers n. noise[i] is the expected log-residual scale at point i;
// rows are whitened by it.
void polish_levels_at(std::vector<PeelLevel>& levels,
                      const std::vector<double>& ns,
                      const std::vector<double>& logvals,
                      const std::vector<double>* noise = nullptr) {
  const std::size_t m = levels.size();
  const std::size_t N = logvals.size();
  if (m == 0 || N < 2 * m) return;
  Eigen::VectorXd theta(2 * m);
  for (std::size_t k = 0; k < m; ++k) {
    theta[static_cast<Eigen::Index>(2 * k)] = std::log(levels[k].w);
    theta[static_cast<Eigen::Index>(2 * k + 1)] = std::log(levels[k].b);
  }
  const auto eval = [&](const Eigen::VectorXd& th, Eigen::MatrixXd* J,
                        Eigen::VectorXd& res) -> double {
    for (std::size_t i = 0; i < N; ++i) {
      const double n = ns[i];
      double lmax = kNegInf;
      std::vector<double> terms(m);
      for (std::size_t k = 0; k < m; ++k) {
        terms[k] = th[static_cast<Eigen::Index>(2 * k + 1)] +
                   n * th[static_cast<Eigen::Index>(2 * k)];
        lmax = std::max(lmax, terms[k]);
      }
      double s = 0.0;
      for (std::size_t k = 0; k < m; ++k) s += std::exp(terms[k] - lmax);
      const double lmodel = lmax + std::log(s);
      const double wgt = noise ? 1.0 / (*noise)[i] : 1.0;
      res[static_cast<Eigen::Index>(i)] = wgt * (logvals[i] - lmodel);
      if (J)
        for (std::size_t k = 0; k < m; ++k) {
          const double p = std::exp(terms[k] - lmodel);
          (*J)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(2 * k)) =
              wgt * n * p;
          (*J)(static_cast<Eigen::Index>(i),
               static_cast<Eigen::Index>(2 * k + 1)) = wgt * p;
        }
    }
    return 0.5 * res.squaredNorm();
  };

  // Levenberg-Marquardt: steps are only accepted when the cost drops, so a
  // start outside the quadratic basin cannot run away.
  Eigen::MatrixXd J(N, 2 * m);
  Eigen::VectorXd res(N), res_try(N);
  double cost = eval(theta, &J, res);
  double lambda = 1e-10;
  for (int it = 0; it < 200; ++it) {
    // Augmented least squares keeps the step solve at the conditioning of J
    // itself rather than of J^T J.
    const Eigen::Index p = static_cast<Eigen::Index>(2 * m);
    Eigen::MatrixXd Aug(static_cast<Eigen::Index>(N) + p, p);
    Eigen::VectorXd raug(static_cast<Eigen::Index>(N) + p);
    Aug.topRows(static_cast<Eigen::Index>(N)) = J;
    raug.head(static_cast<Eigen::Index>(N)) = res;
    Aug.bottomRows(p).setZero();
    for (Eigen::Index k = 0; k < p; ++k)
      Aug(static_cast<Eigen::Index>(N) + k, k) =
          std::sqrt(lambda * (J.col(k).squaredNorm() + 1e-12));
    raug.tail(p).setZero();
    const Eigen::VectorXd step = Aug.colPivHouseholderQr().solve(raug);
    if (!step.allFinite()) break;
    const Eigen::VectorXd theta_try = theta + step;
    const double cost_try = eval(theta_try, nullptr, res_try);
    if (std::isfinite(cost_try) && cost_try <= cost) {
      theta = theta_try;
      cost = cost_try;
      lambda = std::max(lambda * 0.3, 1e-12);
      eval(theta, &J, res);
      if (step.lpNorm<Eigen::Infinity>() < 1e-14) break;
    } else {
      lambda *= 10.0;
      if (lambda > 1e10) break;
    }
  }
  for (std::size_t k = 0; k < m; ++k) {
    levels[k].w = std::exp(theta[static_cast<Eigen::Index>(2 * k)]);
    levels[k].b = std::exp(theta[static_cast<Eigen::Index>(2 * k + 1)]);
  }
}

void polish_levels(std::vector<PeelLevel>& levels,
                   const std::vector<double>& log_series) {
  std::vector<double> ns(log_series.size());
  for (std::size_t i = 0; i < ns.size(); ++i)
    ns[i] = static_cast<double>(i + 1);
  polish_levels_at(levels, ns, log_series);
}

}  // namespace

PeelResult peel_levels_log(const std::vector<double>& log_series, double bbar,
                           double tol) {
  const std::size_t N = log_series.size();
  if (N < 12)
    throw ParameterError("peel_levels: series too short (need N >= 12)");
  if (!(tol > 0.0)) throw ParameterError("peel_levels: tol must be positive");
  for (double v : log_series)
    if (!std::isfinite(v))
      throw ParameterError("peel_levels: series must be strictly positive");

  PeelState st;
  st.lr = log_series;
  // The series arrives as log values; each carries rounding noise of a few
  // ulps of its own magnitude.
  const auto ulp_of = [&log_series](std::size_t i) {
    return 4e-16 * std::max(1.0, std::abs(log_series[i]));
  };
  st.floor_.resize(N);
  for (std::size_t i = 0; i < N; ++i)
    st.floor_[i] = log_series[i] + std::log(ulp_of(i));

  PeelResult result;
  double btot = 0.0;
  // The polish refines masses to machine precision; discovery only has to
  // explain the mass budget to well below the smallest credible level.
  while (bbar - btot > std::max(tol, 1e-6 * std::max(1.0, bbar))) {
    const std::size_t m = valid_prefix(st);
    if (m < 4) {
      // A tiny mass defect here is a peel estimation artifact; the global
      // polish and the final conservation check settle whether it was real.
      if (bbar - btot <= 1e-2 * std::max(1.0, bbar)) break;
      throw ConvergenceError(
          "peel_levels: series exhausted with unexplained mass " +
          std::to_string(bbar - btot));
    }
    // Ratio-window spread over r_i = exp(lr[i+1]-lr[i]): a diagnostic of how
    // close the prefix is to a single geometric rate, reported on failure.
    std::vector<double> ratio(m - 1);
    for (std::size_t i = 0; i + 1 < m; ++i)
      ratio[i] = std::exp(st.lr[i + 1] - st.lr[i]);
    const std::size_t wlen = std::min<std::size_t>(5, m - 1);
    double best_spread = std::numeric_limits<double>::infinity();
    for (std::size_t e = wlen - 1; e < m - 1; ++e) {
      double rmin = ratio[e], rmax = ratio[e];
      for (std::size_t i = e + 1 - wlen; i <= e; ++i) {
        rmin = std::min(rmin, ratio[i]);
        rmax = std::max(rmax, ratio[i]);
      }
      best_spread = std::min(best_spread, (rmax - rmin) / rmax);
    }

    std::vector<PeelLevel> found;
    double eps = 1e-12;
    {
      // Fit the remaining levels jointly; a single stabilized ratio is the
      // K = 1 case. Committing one level from a low-spread window alone is
      // unsafe: a nearby smaller level inflates its mass and the poisoned
      // residual is no longer a positive exponential sum. If no order fits,
      // retry on the prefix extended to the bare noise floor.
      std::size_t m_ext = 0;
      while (m_ext < N && std::isfinite(st.lr[m_ext]) &&
             st.lr[m_ext] > st.floor_[m_ext])
        ++m_ext;
      bool ok = false;
      std::vector<PeelLevel> best_fit;
      double best_res = 0.3;  // beyond this the polish basin is not credible
      for (std::size_t mm : {m, m_ext}) {
        // The fit residual is the excess beyond the 3-sigma allowance, so a
        // correct order scores near zero while an under-order fit that
        // merges levels scores small but decisively worse. Scan every order
        // and keep the smallest K within a factor 10 of the best residual.
        std::vector<std::pair<std::size_t, std::pair<std::vector<PeelLevel>,
                                                     double>>> fits;
        double scan_best = std::numeric_limits<double>::infinity();
        for (std::size_t K = 1;
             K <= std::max<std::size_t>(
                      1, std::min<std::size_t>((mm + 1) / 2, 12));
             ++K) {
          auto fit = prony_remaining(st, mm, K, bbar - btot);
          if (!fit) continue;
          scan_best = std::min(scan_best, fit->second);
          if (fit->second < best_res) {
            best_res = fit->second;
            best_fit = fit->first;
          }
          fits.emplace_back(K, std::move(*fit));
        }
        const double band = std::max(10.0 * scan_best, 1e-12);
        for (auto& [K, fit] : fits) {
          if (fit.second <= 1e-7 && fit.second <= band) {
            found = std::move(fit.first);
            eps = std::max(eps, std::max(fit.second, 1e-6));
            ok = true;
            break;
          }
        }
        if (ok) break;
      }
      if (!ok) {
        // No fit passes the strict gate. Refine the best candidate with a
        // noise-weighted fit against the residual prefix, raising the order
        // by splitting the heaviest level until the prefix is explained
        // within its noise.
        if (best_fit.empty()) {
          auto fit = prony_remaining(st, std::max(m, m_ext), 1, bbar - btot);
          if (fit) best_fit = std::move(fit->first);
        }
        if (!best_fit.empty()) {
          const std::size_t mm = std::max(m, m_ext);
          // The known remaining mass is the n = 0 point of the residual
          // series; with near-zero noise it pins the fit to the
          // mass-conserving manifold.
          std::vector<double> ns{0.0}, vals{std::log(bbar - btot)},
              nse{1e-12};
          for (std::size_t i = 0; i < mm; ++i) {
            ns.push_back(static_cast<double>(i + 1));
            vals.push_back(st.lr[i]);
            nse.push_back(
                std::max(1e-14, 3.0 * std::exp(st.floor_[i] - st.lr[i])));
          }
          const auto excess = [&](const std::vector<PeelLevel>& lv) {
            double r = 0.0;
            for (std::size_t i = 1; i < ns.size(); ++i) {
              double lmodel = kNegInf;
              for (const PeelLevel& l : lv)
                lmodel = log_add(lmodel, std::log(l.b) + ns[i] * std::log(l.w));
              r = std::max(r, std::abs(lmodel - vals[i]) - nse[i]);
            }
            return std::max(0.0, r);
          };
          std::vector<PeelLevel> cand = best_fit;
          polish_levels_at(cand, ns, vals, &nse);
          double r = excess(cand);
          while (r > 1e-4 && 2 * (cand.size() + 1) <= ns.size()) {
            std::vector<PeelLevel> best_next;
            double best_r2 = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < cand.size(); ++k)
              for (double f : {1.3, 2.0, 3.0}) {
                std::vector<PeelLevel> next = cand;
                const PeelLevel h = next[k];
                next[k] = {h.w * f, 0.5 * h.b};
                next.push_back({h.w / f, 0.5 * h.b});
                polish_levels_at(next, ns, vals, &nse);
                const double r2 = excess(next);
                if (r2 < best_r2) {
                  best_r2 = r2;
                  best_next = std::move(next);
                }
              }
            if (!(best_r2 < r)) break;
            cand = std::move(best_next);
            r = best_r2;
          }
          if (r > 1e-4) {
            // Variable projection: masses are linear given rates, so search
            // only rate space. Deterministic random sampling seeds a
            // coordinate descent on log-rates.
            const std::size_t K = cand.size();
            const auto varpro = [&](const std::vector<double>& ws,
                                    std::vector<PeelLevel>* out) {
              Eigen::MatrixXd A(static_cast<Eigen::Index>(ns.size()),
                                static_cast<Eigen::Index>(K));
              Eigen::VectorXd rhs(static_cast<Eigen::Index>(ns.size()));
              for (std::size_t i = 0; i < ns.size(); ++i) {
                const double wt = 1.0 / nse[i];
                for (std::size_t k = 0; k < K; ++k)
                  A(static_cast<Eigen::Index>(i),
                    static_cast<Eigen::Index>(k)) =
                      wt * std::exp(ns[i] * std::log(ws[k]) - vals[i]);
                rhs[static_cast<Eigen::Index>(i)] = wt;
              }
              const Eigen::VectorXd bs = A.colPivHouseholderQr().solve(rhs);
              std::vector<PeelLevel> lv(K);
              for (std::size_t k = 0; k < K; ++k) {
                const double bk = bs[static_cast<Eigen::Index>(k)];
                if (!(bk > 0.0) || !std::isfinite(bk))
                  return std::numeric_limits<double>::infinity();
                lv[k] = {ws[k], bk};
              }
              const double e = excess(lv);
              if (out) *out = std::move(lv);
              return e;
            };
            double rcap = 0.0;
            for (std::size_t i = 0; i + 1 < mm; ++i)
              rcap = std::max(rcap, std::exp(st.lr[i + 1] - st.lr[i]));
            rcap *= 2.0;
            std::mt19937_64 gen(0x9e3779b97f4a7c15ull);
            std::uniform_real_distribution<double> unif(std::log(1e-4 * rcap),
                                                        std::log(rcap));
            std::vector<std::pair<double, std::vector<double>>> top;
            for (int trial = 0; trial < 4000; ++trial) {
              std::vector<double> ws(K);
              for (double& w : ws) w = std::exp(unif(gen));
              std::sort(ws.begin(), ws.end(), std::greater<>());
              const double e = varpro(ws, nullptr);
              if (!std::isfinite(e)) continue;
              top.emplace_back(e, ws);
            }
            std::sort(top.begin(), top.end(),
                      [](const auto& a, const auto& b) {
                        return a.first < b.first;
                      });
            if (top.size() > 20) top.resize(20);
            for (auto& [e0, ws] : top) {
              double e = e0;
              double step = 0.3;
              for (int sweep = 0; sweep < 400 && step > 1e-12 && e > 1e-10;
                   ++sweep) {
                bool improved = false;
                for (std::size_t k = 0; k < K; ++k)
                  for (double sgn : {1.0, -1.0}) {
                    std::vector<double> trial_ws = ws;
                    trial_ws[k] *= std::exp(sgn * step);
                    const double e2 = varpro(trial_ws, nullptr);
                    if (e2 < e) {
                      e = e2;
                      ws = std::move(trial_ws);
                      improved = true;
                    }
                  }
                if (!improved) step *= 0.5;
              }
              std::vector<PeelLevel> lv;
              if (varpro(ws, &lv) < r) {
                r = e;
                cand = std::move(lv);
              }
              if (r <= 1e-8) break;
            }
          }
          if (r <= 1e-2) {
            found = std::move(cand);
            eps = std::max(eps, std::max(r, 1e-6));
            ok = true;
          }
        }
      }
      if (!ok)
        throw ConvergenceError(
            "peel_levels: rates failed to separate; best window spread " +
            std::to_string(best_spread) + " on a prefix of " +
            std::to_string(m) + " usable terms");
    }

    for (const PeelLevel& lv : found) {
      result.levels.push_back(lv);
      const double lb = std::log(lv.b);
      const double lw = std::log(lv.w);
      for (std::size_t i = 0; i < N; ++i) {
        const double sub = lb + static_cast<double>(i + 1) * lw;
        st.floor_[i] = log_add(st.floor_[i], sub + std::log(eps));
        st.lr[i] = log_sub(st.lr[i], sub);
      }
    }
    if (result.levels.size() > 64)
      throw ConvergenceError("peel_levels: level count exceeded 64");
    btot = 0.0;
    for (const PeelLevel& lv : result.levels) btot += lv.b;

    // Re-anchor: wherever the undiscovered remainder contaminates the series
    // by less than 1e-3, the point constrains the found levels, with the
    // remainder share as its noise scale. A whitened polish there pins each
    // found level from its own dominance window and stops peel error from
    // compounding across levels. Residual and floor are rebuilt from the
    // polished model.
    {
      // The full mass budget enters as the n = 0 point of the series, under
      // the same undiscovered-share noise rule as every other point.
      std::vector<double> ns, vals, noise;
      {
        const double share0 = (bbar - btot) / bbar;
        if (share0 <= 1e-3) {
          ns.push_back(0.0);
          vals.push_back(std::log(bbar));
          noise.push_back(std::max(1e-15, share0));
        }
      }
      for (std::size_t i = 0; i < N; ++i) {
        const double share =
            st.lr[i] == kNegInf ? 0.0 : std::exp(st.lr[i] - log_series[i]);
        if (share > 1e-3) continue;
        ns.push_back(static_cast<double>(i + 1));
        vals.push_back(log_series[i]);
        noise.push_back(std::max(1e-15, share));
      }
      if (ns.size() >= 2 * result.levels.size() + 2) {
        polish_levels_at(result.levels, ns, vals, &noise);
        auto model_at = [&](double n) {
          double v = kNegInf;
          for (const PeelLevel& lv : result.levels)
            v = log_add(v, std::log(lv.b) + n * std::log(lv.w));
          return v;
        };
        // Post-polish accuracy in units of each point's own rounding noise,
        // read off the points the remainder cannot reach.
        double kappa = 3.0;
        for (std::size_t j = 0; j < ns.size(); ++j) {
          if (ns[j] < 1.0) continue;
          const std::size_t i = static_cast<std::size_t>(ns[j]) - 1;
          if (noise[j] <= ulp_of(i))
            kappa = std::max(
                kappa, std::abs(vals[j] - model_at(ns[j])) / ulp_of(i));
        }
        for (std::size_t i = 0; i < N; ++i) {
          const double lmodel = model_at(static_cast<double>(i + 1));
          st.lr[i] = log_sub(log_series[i], lmodel);
          st.floor_[i] = lmodel + std::log(kappa * ulp_of(i));
        }
      }
    }
    btot = 0.0;
    for (const PeelLevel& lv : result.levels) btot += lv.b;
  }

  // Final polish against the full series with the mass as the n = 0 point,
  // whitened by each point's rounding noise.
  {
    std::vector<double> ns{0.0}, vals{std::log(bbar)}, noise{1e-14};
    for (std::size_t i = 0; i < N; ++i) {
      ns.push_back(static_cast<double>(i + 1));
      vals.push_back(log_series[i]);
      noise.push_back(ulp_of(i));
    }
    polish_levels_at(result.levels, ns, vals, &noise);
  }
  std::sort(result.levels.begin(), result.levels.end(),
            [](const PeelLevel& a, const PeelLevel& b) { return a.w > b.w; });
  // Merge levels the polish could not separate.
  for (std::size_t k = 0; k + 1 < result.levels.size();) {
    if (result.levels[k].w - result.levels[k + 1].w <
        1e-8 * result.levels[k].w) {
      result.levels[k].b += result.levels[k + 1].b;
      result.levels[k].w =
          0.5 * (result.levels[k].w + result.levels[k + 1].w);
      result.levels.erase(result.levels.begin() +
                          static_cast<std::ptrdiff_t>(k + 1));
    } else {
      ++k;
    }
  }

  double bsum = 0.0;
  for (const PeelLevel& lv : result.levels) bsum += lv.b;
  if (std::abs(bsum - bbar) > 1e-6 * std::max(1.0, bbar))
    throw ConvergenceError("peel_levels: mass conservation violated: sum b = " +
                           std::to_string(bsum) + ", expected " +
                           std::to_string(bbar));

  double max_rel = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double lmodel = kNegInf;
    for (const PeelLevel& lv : result.levels)
      lmodel = log_add(lmodel, std::log(lv.b) +
                                   static_cast<double>(i + 1) * std::log(lv.w));
    max_rel = std::max(max_rel, std::abs(lmodel - log_series[i]));
  }
  result.residual = max_rel;
  return result;
}

PeelResult peel_levels(const ExpSumMap& map, const std::vector<double>& series,
                       double tol) {
  std::vector<double> logs(series.size());
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (!(series[i] > 0.0))
      throw ParameterError("peel_levels: series must be strictly positive");
    logs[i] = std::log(series[i]);
  }
  return peel_levels_log(logs, map.bbar, tol);
}

std::vector<int> beta_inverse(const ExpSumMap& map, double b_value,
                              double tol) {
  const int d = map.dim();
  if (d > 20) throw CapacityError("beta_inverse: d > 20");
  if (!(tol > 0.0)) throw ParameterError("beta_inverse: tol must be positive");
  if (!(map.margin > 2.0 * tol))
    throw ParameterError(
        "beta_inverse: coefficient margin too small for requested tol");

  std::vector<int> best;
  int hits = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  const std::uint64_t total = 1ull << d;
  for (std::uint64_t code = 0; code < total; ++code) {
    double beta = 0.0;
    for (int j = 0; j < d; ++j)
      if (code & (1ull << j)) beta += map.inv_sq[static_cast<std::size_t>(j)];
    const double gap = std::abs(beta - b_value);
    if (gap <= tol) ++hits;
    if (gap < best_gap) {
      best_gap = gap;
      best.assign(static_cast<std::size_t>(d), 0);
      for (int j = 0; j < d; ++j)
        best[static_cast<std::size_t>(j)] = (code & (1ull << j)) ? 1 : 0;
    }
  }
  if (hits == 0)
    throw ModelError("beta_inverse: no indicator within tol; nearest gap " +
                     std::to_string(best_gap));
  if (hits > 1)
    throw NumericalError(
        "beta_inverse: two indicators within tol (margin violation)");
  return best;
}

std::vector<double> expsum_log_series(const ExpSumMap& map,
                                      std::span<const double> x, int N) {
  std::vector<double> logs(static_cast<std::size_t>(N));
  for (int n = 1; n <= N; ++n)
    logs[static_cast<std::size_t>(n - 1)] = power_observable_log(map, x, n);
  return logs;
}

std::vector<double> reconstruct_expsum(const ExpSumMap& map,
                                       const std::vector<double>& log_series,
                                       double tol) {
  if (!map.admissible)
    throw ParameterError("reconstruct_expsum: coefficients are not admissible");
  PeelResult peel = peel_levels_log(log_series, map.bbar, tol);

  const int d = map.dim();
  const double beta_tol = 0.45 * map.margin;
  std::vector<int> claimed(static_cast<std::size_t>(d), 0);
  std::vector<std::vector<int>> indicators;
  for (const PeelLevel& lv : peel.levels)
    indicators.push_back(beta_inverse(map, lv.b, beta_tol));
  for (const auto& ind : indicators)
    for (int j = 0; j < d; ++j) claimed[static_cast<std::size_t>(j)] += ind[static_cast<std::size_t>(j)];
  for (int j = 0; j < d; ++j)
    if (claimed[static_cast<std::size_t>(j)] != 1)
      throw ModelError(
          "reconstruct_expsum: level indicators do not partition the "
          "coordinates (coordinate " +
          std::to_string(j + 1) + " claimed " +
          std::to_string(claimed[static_cast<std::size_t>(j)]) + " times)");

  // Snap the masses to their exact beta values and re-polish the w's only.
  for (std::size_t k = 0; k < peel.levels.size(); ++k) {
    double b = 0.0;
    for (int j = 0; j < d; ++j)
      if (indicators[k][static_cast<std::size_t>(j)])
        b += map.inv_sq[static_cast<std::size_t>(j)];
    peel.levels[k].b = b;
  }

  std::vector<double> x(static_cast<std::size_t>(d), 0.0);
  for (std::size_t k = 0; k < peel.levels.size(); ++k) {
    const double lw = std::log(peel.levels[k].w);
    for (int j = 0; j < d; ++j)
      if (indicators[k][static_cast<std::size_t>(j)]) {
        const double aj = map.a[static_cast<std::size_t>(j)];
        x[static_cast<std::size_t>(j)] = (lw - std::log(aj * aj)) / aj;
      }
  }

  // Refine x on the fixed-mass model itself (masses are set by the
  // coefficients, so only the state may move). Rows are whitened by the
  // rounding noise of each log value.
  {
    const std::size_t N = log_series.size();
    const auto eval = [&](const std::vector<double>& xs, Eigen::MatrixXd* J,
                          Eigen::VectorXd& res) {
      for (std::size_t i = 0; i < N; ++i) {
        const int n = static_cast<int>(i + 1);
        const double lmodel = power_observable_log(map, xs, n);
        const double noise =
            4e-16 * std::max(1.0, std::abs(log_series[i]));
        res[static_cast<Eigen::Index>(i)] =
            (log_series[i] - lmodel) / noise;
        if (J)
          for (int j = 0; j < d; ++j) {
            const double aj = map.a[static_cast<std::size_t>(j)];
            const double term =
                (2.0 * n - 2.0) * std::log(std::abs(aj)) +
                n * aj * xs[static_cast<std::size_t>(j)];
            (*J)(static_cast<Eigen::Index>(i),
                 static_cast<Eigen::Index>(j)) =
                n * aj * std::exp(term - lmodel) / noise;
          }
      }
      return 0.5 * res.squaredNorm();
    };
    Eigen::MatrixXd J(static_cast<Eigen::Index>(N),
                      static_cast<Eigen::Index>(d));
    Eigen::VectorXd res(static_cast<Eigen::Index>(N)),
        res_try(static_cast<Eigen::Index>(N));
    double cost = eval(x, &J, res);
    double lambda = 1e-10;
    for (int it = 0; it < 200; ++it) {
      Eigen::MatrixXd Aug(static_cast<Eigen::Index>(N) + d, d);
      Eigen::VectorXd raug(static_cast<Eigen::Index>(N) + d);
      Aug.topRows(static_cast<Eigen::Index>(N)) = J;
      raug.head(static_cast<Eigen::Index>(N)) = res;
      Aug.bottomRows(d).setZero();
      for (int k = 0; k < d; ++k)
        Aug(static_cast<Eigen::Index>(N) + k, k) =
            std::sqrt(lambda * (J.col(k).squaredNorm() + 1e-12));
      raug.tail(d).setZero();
      const Eigen::VectorXd step = Aug.colPivHouseholderQr().solve(raug);
      if (!step.allFinite()) break;
      std::vector<double> x_try = x;
      for (int k = 0; k < d; ++k)
        x_try[static_cast<std::size_t>(k)] += step[k];
      const double cost_try = eval(x_try, nullptr, res_try);
      if (std::isfinite(cost_try) && cost_try <= cost) {
        x = std::move(x_try);
        cost = cost_try;
        lambda = std::max(lambda * 0.3, 1e-12);
        eval(x, &J, res);
        if (step.lpNorm<Eigen::Infinity>() < 1e-14) break;
      } else {
        lambda *= 10.0;
        if (lambda > 1e10) break;
      }
    }
  }

  // Round trip against the input series.
  const double rt_tol = std::max(10.0 * tol, 1e-9);
  for (std::size_t i = 0; i < log_series.size(); ++i) {
    const double lv = power_observable_log(map, x, static_cast<int>(i + 1));
    if (std::abs(lv - log_series[i]) > rt_tol * (1.0 + std::abs(log_series[i])))
      throw ConvergenceError(
          "reconstruct_expsum: round-trip mismatch at n = " +
          std::to_string(i + 1));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Serialization

void write_track_csv(const TrackResult& result, std::ostream& out) {
  out << "t,estimate,branch,ambiguous\n";
  for (std::size_t k = 0; k < result.times.size(); ++k) {
    const bool amb = result.ambiguous_from &&
                     result.times[k] >= *result.ambiguous_from;
    out << format_double(result.times[k]) << ','
        << (std::isfinite(result.estimates[k])
                ? format_double(result.estimates[k])
                : std::string("nan"))
        << ',' << result.branch[k] << ',' << (amb ? 1 : 0) << '\n';
  }
}

void write_branch_log_json(const TrackResult& result, std::ostream& out) {
  nlohmann::json j;
  j["ambiguous_from"] = result.ambiguous_from
                            ? nlohmann::json(*result.ambiguous_from)
                            : nlohmann::json(nullptr);
  j["crossings"] = nlohmann::json::array();
  for (const BranchDecision& d : result.branch_log) {
    j["crossings"].push_back(
        {{"time", d.time},
         {"critical", d.critical},
         {"candidates", {d.cand_stay, d.cand_reflect}},
         {"statistics", {d.stat_stay, d.stat_reflect}},
         {"statistic_gap", d.gap},
         {"margin", d.margin},
         {"decision", d.chosen == -1 ? "ambiguous"
                                     : (d.chosen == 0 ? "stay" : "reflect")}});
  }
  out << j.dump(2) << '\n';
}

}  // namespace difftrack
