#include "difftrack/obsmaps.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "difftrack/errors.hpp"
#include "difftrack/rng.hpp"
#include "difftrack/rootfind.hpp"

namespace difftrack {

namespace {

constexpr double kBracketLevelTol = 1e-10;
constexpr double kCriticalDerivTol = 1e-8;

void validate_gradient(const ObservationMap& map, double box,
                       std::uint64_t seed) {
  SplitMix64 rng(seed);
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd x(map.dim_in);
    for (int j = 0; j < map.dim_in; ++j)
      x[j] = box * (2.0 * rng.next_unit() - 1.0);
    const Eigen::MatrixXd g = map.grad(x);
    if (g.rows() != map.dim_out || g.cols() != map.dim_in)
      throw ParameterError("observation map: Jacobian has wrong shape");
    for (int j = 0; j < map.dim_in; ++j) {
      const double h = 1e-6 * std::max(1.0, std::abs(x[j]));
      Eigen::VectorXd xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      const Eigen::VectorXd fd = (map.eval(xp) - map.eval(xm)) / (2.0 * h);
      for (int i = 0; i < map.dim_out; ++i) {
        if (std::abs(fd[i] - g(i, j)) > 1e-5 * (1.0 + std::abs(fd[i])))
          throw ParameterError(
              "observation map: Jacobian disagrees with finite differences");
      }
    }
  }
}

}  // namespace

ObservationMap make_observation_map(
    int dim_in, int dim_out,
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> eval,
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> grad, MapKind kind,
    double box, std::uint64_t seed) {
  if (dim_in < 1 || dim_out < 1)
    throw ParameterError("observation map: dimensions must be positive");
  if (!eval) throw ParameterError("observation map: eval is required");
  ObservationMap map{dim_in, dim_out, std::move(eval), std::move(grad), kind};
  if (map.grad) validate_gradient(map, box, seed);
  return map;
}

ObservationMap make_example2d_map() {
  auto eval = [](const Eigen::VectorXd& x) {
    Eigen::VectorXd y(1);
    y[0] = std::exp(x[0]) - std::exp(x[1]);
    return y;
  };
  auto grad = [](const Eigen::VectorXd& x) {
    Eigen::MatrixXd g(1, 2);
    g(0, 0) = std::exp(x[0]);
    g(0, 1) = -std::exp(x[1]);
    return g;
  };
  return make_observation_map(2, 1, eval, grad, MapKind::example2d);
}

PiecewiseMonotoneMap make_piecewise_map(
    ScalarFunc h, ScalarFunc hprime, std::vector<double> criticals,
    std::vector<std::pair<double, double>> brackets) {
  if (!h || !hprime) throw ParameterError("piecewise map: h and h' required");
  if (!std::is_sorted(criticals.begin(), criticals.end()))
    throw ParameterError("piecewise map: criticals must be sorted");
  if (criticals.size() != brackets.size())
    throw ParameterError("piecewise map: one bracket per critical point");

  PiecewiseMonotoneMap pmap{std::move(h), std::move(hprime),
                            std::move(criticals), std::move(brackets)};
  for (std::size_t i = 0; i < pmap.criticals.size(); ++i) {
    const double c = pmap.criticals[i];
    const auto [l, r] = pmap.brackets[i];
    if (!(l < c && c < r))
      throw ParameterError("piecewise map: bracket must straddle the critical point");
    if (std::abs(pmap.hprime(c)) > kCriticalDerivTol)
      throw ParameterError("piecewise map: h'(c) not zero at declared critical point");
    const double dl = 1e-3 * (c - l);
    const double dr = 1e-3 * (r - c);
    if (pmap.hprime(c - dl) * pmap.hprime(c + dr) >= 0.0)
      throw ParameterError("piecewise map: h' does not change sign across critical point");
    if (std::abs(pmap.h(l) - pmap.h(r)) >
        kBracketLevelTol * (1.0 + std::abs(pmap.h(l))))
      throw ParameterError("piecewise map: bracket endpoints have unequal levels");
    for (double other : pmap.criticals)
      if (other != c && other > l && other < r)
        throw ParameterError("piecewise map: bracket contains another critical point");
    // Sampled strict monotonicity of each branch.
    for (int side = 0; side < 2; ++side) {
      const double a = side == 0 ? l : c + dr;
      const double b = side == 0 ? c - dl : r;
      const double sign0 = pmap.hprime(a) > 0.0 ? 1.0 : -1.0;
      for (int k = 0; k <= 100; ++k) {
        const double x = a + (b - a) * k / 100.0;
        if (sign0 * pmap.hprime(x) <= 0.0)
          throw ParameterError("piecewise map: h' changes sign inside a branch");
      }
    }
  }
  return pmap;
}

PiecewiseMonotoneMap make_piecewise_map_auto(ScalarFunc h, ScalarFunc hprime,
                                             std::vector<double> criticals,
                                             double reach) {
  std::sort(criticals.begin(), criticals.end());
  std::vector<std::pair<double, double>> brackets;
  for (std::size_t i = 0; i < criticals.size(); ++i) {
    const double c = criticals[i];
    double wl = reach, wr = reach;
    if (i > 0) wl = std::min(wl, 0.9 * (c - criticals[i - 1]));
    if (i + 1 < criticals.size())
      wr = std::min(wr, 0.9 * (criticals[i + 1] - c));
    const double hc = h(c);
    double l = c - wl, r = c + wr;
    // Keep the shallower side at full extent; pull the deeper side in until
    // the levels match.
    if (std::abs(h(l) - hc) <= std::abs(h(r) - hc)) {
      const double target = h(l);
      r = solve_bracketed([&](double x) { return h(x) - target; }, c, r);
    } else {
      const double target = h(r);
      l = solve_bracketed([&](double x) { return h(x) - target; }, l, c);
    }
    brackets.emplace_back(l, r);
  }
  return make_piecewise_map(std::move(h), std::move(hprime),
                            std::move(criticals), std::move(brackets));
}

double ExpSumMap::eval(std::span<const double> x) const {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += std::exp(a[j] * x[j]);
  return s;
}

ExpSumMap make_expsum_map(std::vector<double> a, double eps) {
  if (a.empty()) throw ParameterError("expsum map: empty coefficient vector");
  for (double aj : a)
    if (aj == 0.0) throw ParameterError("expsum map: coefficients must be nonzero");
  ExpSumMap map;
  map.a = std::move(a);
  map.inv_sq.reserve(map.a.size());
  for (double aj : map.a) map.inv_sq.push_back(1.0 / (aj * aj));
  map.bbar = 0.0;
  for (double v : map.inv_sq) map.bbar += v;
  const auto report = check_coefficient_condition(map.a, eps);
  map.admissible = report.admissible;
  map.margin = report.min_margin;
  return map;
}

ObservationMap expsum_observation_map(const ExpSumMap& map) {
  const ExpSumMap m = map;
  auto eval = [m](const Eigen::VectorXd& x) {
    Eigen::VectorXd y(1);
    y[0] = m.eval({x.data(), static_cast<std::size_t>(x.size())});
    return y;
  };
  auto grad = [m](const Eigen::VectorXd& x) {
    Eigen::MatrixXd g(1, x.size());
    for (int j = 0; j < x.size(); ++j)
      g(0, j) = m.a[static_cast<std::size_t>(j)] *
                std::exp(m.a[static_cast<std::size_t>(j)] * x[j]);
    return g;
  };
  return make_observation_map(m.dim(), 1, eval, grad, MapKind::expsum);
}

AdmissibilityReport check_coefficient_condition(const std::vector<double>& a,
                                                double eps) {
  const int d = static_cast<int>(a.size());
  if (d > 20)
    throw CapacityError("check_coefficient_condition: d > 20 enumeration bound");
  if (!(eps > 0.0))
    throw ParameterError("check_coefficient_condition: eps must be positive");
  std::vector<double> inv_sq(a.size());
  for (int j = 0; j < d; ++j) {
    if (a[static_cast<std::size_t>(j)] == 0.0)
      throw ParameterError("check_coefficient_condition: zero coefficient");
    inv_sq[static_cast<std::size_t>(j)] =
        1.0 / (a[static_cast<std::size_t>(j)] * a[static_cast<std::size_t>(j)]);
  }

  AdmissibilityReport report;
  report.min_margin = std::numeric_limits<double>::infinity();
  // Base-3 counter over u in {-1,0,1}^d; keep patterns whose first nonzero
  // entry is +1, i.e. one representative of each {u,-u} pair.
  std::vector<int> u(a.size(), 0);
  std::uint64_t total = 1;
  for (int j = 0; j < d; ++j) total *= 3;
  for (std::uint64_t code = 1; code < total; ++code) {
    std::uint64_t c = code;
    int first_nonzero = 0;
    for (int j = 0; j < d; ++j) {
      u[static_cast<std::size_t>(j)] = static_cast<int>(c % 3) - 1;  // -1,0,1
      c /= 3;
    }
    for (int j = 0; j < d; ++j) {
      if (u[static_cast<std::size_t>(j)] != 0) {
        first_nonzero = u[static_cast<std::size_t>(j)];
        break;
      }
    }
    if (first_nonzero != 1) continue;
    double s = 0.0;
    for (int j = 0; j < d; ++j)
      s += u[static_cast<std::size_t>(j)] * inv_sq[static_cast<std::size_t>(j)];
    if (std::abs(s) < report.min_margin) {
      report.min_margin = std::abs(s);
      report.worst_pattern = u;
    }
  }
  report.admissible = report.min_margin > eps;
  return report;
}

ObsPath observe(const ObservationMap& map, const Path& path) {
  if (map.dim_in != path.dim)
    throw ParameterError("observe: map input dimension != path dimension");
  ObsPath obs;
  obs.times = path.times;
  obs.dim = map.dim_out;
  obs.dt = path.dt;
  obs.values.resize(path.size() * static_cast<std::size_t>(map.dim_out));
  Eigen::VectorXd x(path.dim);
  for (std::size_t k = 0; k < path.size(); ++k) {
    for (int j = 0; j < path.dim; ++j) x[j] = path.state(k, j);
    const Eigen::VectorXd y = map.eval(x);
    for (int j = 0; j < map.dim_out; ++j)
      obs.values[k * static_cast<std::size_t>(map.dim_out) + j] = y[j];
  }
  return obs;
}

ObsPath observe_scalar(const ScalarFunc& h, const Path& path) {
  if (path.dim != 1)
    throw ParameterError("observe_scalar: path must be one-dimensional");
  ObsPath obs;
  obs.times = path.times;
  obs.dim = 1;
  obs.dt = path.dt;
  obs.values.resize(path.size());
  for (std::size_t k = 0; k < path.size(); ++k)
    obs.values[k] = h(path.states[k]);
  return obs;
}

double branch_inverse(const PiecewiseMonotoneMap& pmap, double lo, double hi,
                      double y) {
  if (!(lo < hi)) throw ParameterError("branch_inverse: empty interval");
  const double ylo = pmap.h(lo);
  const double yhi = pmap.h(hi);
  const double ymin = std::min(ylo, yhi);
  const double ymax = std::max(ylo, yhi);
  const double guard = 1e-9 * (1.0 + std::abs(y));
  if (y < ymin - guard)
    throw RangeError("branch_inverse: y below branch range by " +
                     std::to_string(ymin - y));
  if (y > ymax + guard)
    throw RangeError("branch_inverse: y above branch range by " +
                     std::to_string(y - ymax));
  const double yc = std::clamp(y, ymin, ymax);
  if (yc == ylo) return lo;
  if (yc == yhi) return hi;
  return solve_bracketed([&](double x) { return pmap.h(x) - yc; }, lo, hi);
}

double gamma_c(const PiecewiseMonotoneMap& pmap, const ScalarFunc& g, double c,
               double x) {
  auto it = std::find(pmap.criticals.begin(), pmap.criticals.end(), c);
  if (it == pmap.criticals.end())
    throw ParameterError("gamma_c: c is not a declared critical point");
  const auto [l, r] =
      pmap.brackets[static_cast<std::size_t>(it - pmap.criticals.begin())];
  if (!(x > l && x < r))
    throw ParameterError("gamma_c: x outside the critical bracket");
  const double y = pmap.h(x);
  const double xm = branch_inverse(pmap, l, c, y);
  const double xp = branch_inverse(pmap, c, r, y);
  const double gm = g(xm) * pmap.hprime(xm);
  const double gp = g(xp) * pmap.hprime(xp);
  return gm * gm - gp * gp;
}

}  // namespace difftrack
