#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "difftrack/obsmaps.hpp"
#include "difftrack/path.hpp"

namespace difftrack {

/// Windowed estimates of the instantaneous quadratic-covariation rate
/// d<Y^i,Y^j>/dt along an observation path.
struct RateSeries {
  std::vector<double> times;
  std::vector<Eigen::MatrixXd> rates;  // e x e symmetric, PSD to tolerance
  double window = 0.0;                 // averaging half-width (seconds)
  int skip = 1;                        // increment stride (grid steps)
  std::vector<std::uint8_t> one_sided;  // window truncated at a path end
  std::vector<std::uint8_t> psd_warning;  // negative eigenvalue beyond repair
};

/// Default bias/variance compromise: window = max(20 dt, sqrt(dt)/5).
double default_qv_window(double dt);

/// Estimate of d<Y>/dt at time t from squared increments at stride `skip`
/// over [t-window, t+window] (one-sided at the path ends). For unit-noise
/// diffusions this estimates |grad h(X_t)|^2.
double qv_rate(const ObsPath& obs, int component, double t, double window,
               int skip = 1);

/// Polarized covariation rate of two scalar components on a common grid.
/// Exactly bilinear; covariation_rate(Y,Y) == qv_rate(Y) by construction.
double covariation_rate(const ObsPath& obs1, int comp1, const ObsPath& obs2,
                        int comp2, double t, double window, int skip = 1);

/// Full e x e rate series at every `stride`-th grid point.
RateSeries rate_matrix(const ObsPath& obs, double window, int skip = 1,
                       std::size_t stride = 1);

/// Exact higher-order observable h_n(x) = sum_j a_j^{2n-2} e^{n a_j x_j}
/// (h_1 = h). Computed in log domain; throws RangeError on overflow.
double power_observable_oracle(const ExpSumMap& map, std::span<const double> x,
                               int n);

/// log h_n(x), always finite for finite inputs.
double power_observable_log(const ExpSumMap& map, std::span<const double> x,
                            int n);

/// RateSeries CSV: header `t,r11,r12,...,ree` (upper triangle, row-major).
void write_rate_series_csv(const RateSeries& series, std::ostream& out);

}  // namespace difftrack
