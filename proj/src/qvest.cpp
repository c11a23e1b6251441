#include "difftrack/qvest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>

#include "difftrack/errors.hpp"

namespace difftrack {

namespace {

struct WindowSpan {
  std::size_t first = 0;  // first grid index inside the window
  std::size_t last = 0;   // last grid index inside the window
  bool truncated = false;
};

WindowSpan locate_window(const ObsPath& obs, double t, double window,
                         int skip) {
  if (!(window > 0.0) || skip < 1)
    throw ParameterError("qv_rate: window and skip must be positive");
  if (window < 2.0 * skip * obs.dt)
    throw ParameterError("qv_rate: window shorter than two increment strides");
  const double t0 = obs.times.front();
  const double t1 = obs.times.back();
  WindowSpan span;
  const double lo = t - window;
  const double hi = t + window;
  span.truncated = lo < t0 || hi > t1;
  const double lo_c = std::max(lo, t0);
  const double hi_c = std::min(hi, t1);
  span.first = static_cast<std::size_t>(std::ceil((lo_c - t0) / obs.dt - 1e-9));
  span.last = static_cast<std::size_t>(std::floor((hi_c - t0) / obs.dt + 1e-9));
  span.last = std::min(span.last, obs.size() - 1);
  if (span.last < span.first + static_cast<std::size_t>(skip))
    throw ParameterError("qv_rate: window contains no full increment");
  return span;
}

// Sum over the window of products of stride-`skip` increments of two
// components, divided by the time covered. With c1==c2 this is the realized
// quadratic variation rate; the polarization identity ((d1+d2)^2-(d1-d2)^2)/4
// collapses to the product d1*d2, so covariation comes from the same code
// path and is exactly bilinear.
double increment_product_rate(const ObsPath& obs1, int c1, const ObsPath& obs2,
                              int c2, double t, double window, int skip) {
  const WindowSpan span = locate_window(obs1, t, window, skip);
  double sum = 0.0;
  std::size_t count = 0;
  const std::size_t step = static_cast<std::size_t>(skip);
  for (std::size_t i = span.first; i + step <= span.last; i += step) {
    const double d1 = obs1.value(i + step, c1) - obs1.value(i, c1);
    const double d2 = obs2.value(i + step, c2) - obs2.value(i, c2);
    sum += d1 * d2;
    ++count;
  }
  return sum / (static_cast<double>(count) * step * obs1.dt);
}

void check_common_grid(const ObsPath& a, const ObsPath& b) {
  if (a.size() != b.size() || a.dt != b.dt ||
      a.times.front() != b.times.front() || a.times.back() != b.times.back())
    throw ParameterError("covariation_rate: observation grids differ");
}

}  // namespace

double default_qv_window(double dt) {
  return std::max(20.0 * dt, std::sqrt(dt) / 5.0);
}

double qv_rate(const ObsPath& obs, int component, double t, double window,
               int skip) {
  return increment_product_rate(obs, component, obs, component, t, window,
                                skip);
}

double covariation_rate(const ObsPath& obs1, int comp1, const ObsPath& obs2,
                        int comp2, double t, double window, int skip) {
  check_common_grid(obs1, obs2);
  return increment_product_rate(obs1, comp1, obs2, comp2, t, window, skip);
}

RateSeries rate_matrix(const ObsPath& obs, double window, int skip,
                       std::size_t stride) {
  if (stride < 1) throw ParameterError("rate_matrix: stride must be >= 1");
  const int e = obs.dim;
  RateSeries series;
  series.window = window;
  series.skip = skip;
  for (std::size_t k = 0; k < obs.size(); k += stride) {
    const double t = obs.times[k];
    const WindowSpan span = locate_window(obs, t, window, skip);
    Eigen::MatrixXd m(e, e);
    for (int i = 0; i < e; ++i)
      for (int j = i; j < e; ++j) {
        const double r = increment_product_rate(obs, i, obs, j, t, window, skip);
        m(i, j) = r;
        m(j, i) = r;
      }
    // PSD repair: finite-sample noise can push an eigenvalue slightly
    // negative; clip when small relative to the trace, else flag.
    bool warn = false;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(m);
    const double lmin = eig.eigenvalues().minCoeff();
    if (lmin < 0.0) {
      if (std::abs(lmin) <= 1e-8 * std::max(m.trace(), 0.0) || e == 1) {
        Eigen::VectorXd ev = eig.eigenvalues().cwiseMax(0.0);
        m = eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose();
        m = 0.5 * (m + m.transpose()).eval();
      } else {
        warn = true;
      }
    }
    series.times.push_back(t);
    series.rates.push_back(std::move(m));
    series.one_sided.push_back(span.truncated ? 1 : 0);
    series.psd_warning.push_back(warn ? 1 : 0);
  }
  return series;
}

double power_observable_log(const ExpSumMap& map, std::span<const double> x,
                            int n) {
  if (n < 1) throw ParameterError("power observable: n must be >= 1");
  if (x.size() != map.a.size())
    throw ParameterError("power observable: state dimension mismatch");
  double lmax = -std::numeric_limits<double>::infinity();
  std::vector<double> logs(map.a.size());
  for (std::size_t j = 0; j < map.a.size(); ++j) {
    logs[j] = (2.0 * n - 2.0) * std::log(std::abs(map.a[j])) +
              static_cast<double>(n) * map.a[j] * x[j];
    lmax = std::max(lmax, logs[j]);
  }
  double s = 0.0;
  for (double lj : logs) s += std::exp(lj - lmax);
  return lmax + std::log(s);
}

double power_observable_oracle(const ExpSumMap& map, std::span<const double> x,
                               int n) {
  const double lv = power_observable_log(map, x, n);
  if (lv > 700.0)
    throw RangeError("power observable: overflow, log value " +
                     std::to_string(lv));
  return std::exp(lv);
}

void write_rate_series_csv(const RateSeries& series, std::ostream& out) {
  const int e = series.rates.empty() ? 0 : static_cast<int>(series.rates[0].rows());
  out << 't';
  for (int i = 1; i <= e; ++i)
    for (int j = i; j <= e; ++j) out << ",r" << i << j;
  out << '\n';
  for (std::size_t k = 0; k < series.times.size(); ++k) {
    out << format_double(series.times[k]);
    for (int i = 0; i < e; ++i)
      for (int j = i; j < e; ++j)
        out << ',' << format_double(series.rates[k](i, j));
    out << '\n';
  }
}

}  // namespace difftrack
