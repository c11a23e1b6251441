#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "difftrack/path.hpp"
#include "difftrack/sdesim.hpp"

namespace difftrack {

enum class MapKind { generic, piecewise1d, expsum, example2d };

/// Measurement map h: R^d -> R^e with optional analytic Jacobian. When a
/// Jacobian is supplied it is validated against central finite differences
/// at construction.
struct ObservationMap {
  int dim_in = 1;
  int dim_out = 1;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> eval;
  std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> grad;  // may be empty
  MapKind kind = MapKind::generic;
};

/// Validating factory: checks grad against finite differences of eval to
/// relative error 1e-5 at 100 seeded random points in [-box, box]^d.
ObservationMap make_observation_map(
    int dim_in, int dim_out,
    std::function<Eigen::VectorXd(const Eigen::VectorXd&)> eval,
    std::function<Eigen::MatrixXd(const Eigen::VectorXd&)> grad = {},
    MapKind kind = MapKind::generic, double box = 2.0,
    std::uint64_t seed = 12345);

/// The worked 2-D map h(x1,x2) = e^{x1} - e^{x2}, with analytic Jacobian.
ObservationMap make_example2d_map();

/// A real C^1 map with isolated critical points, strictly monotone between
/// them. Each critical point c carries a bracket (l,r) with h(l)=h(r) and no
/// other critical point inside.
struct PiecewiseMonotoneMap {
  ScalarFunc h;
  ScalarFunc hprime;
  std::vector<double> criticals;                     // sorted
  std::vector<std::pair<double, double>> brackets;   // one per critical point
};

/// Validates critical points (|h'(c)| <= 1e-8, sign change of h' across c),
/// sampled monotonicity between them, and the bracket identities.
PiecewiseMonotoneMap make_piecewise_map(
    ScalarFunc h, ScalarFunc hprime, std::vector<double> criticals,
    std::vector<std::pair<double, double>> brackets);

/// As above but constructs the brackets: expands symmetrically from c and
/// solves h(l) = h(r) by 1-D root finding, staying clear of neighbouring
/// critical points. `reach` caps the half-width for boundary criticals.
PiecewiseMonotoneMap make_piecewise_map_auto(ScalarFunc h, ScalarFunc hprime,
                                             std::vector<double> criticals,
                                             double reach = 1.0);

/// Exponential-sum map h(x) = sum_j e^{a_j x_j} with admissibility metadata.
struct ExpSumMap {
  std::vector<double> a;       // nonzero coefficients
  std::vector<double> inv_sq;  // a_j^{-2}
  double bbar = 0.0;           // sum_j a_j^{-2}
  bool admissible = false;
  double margin = 0.0;  // min over sign patterns of |sum u_j a_j^{-2}|

  double eval(std::span<const double> x) const;
  int dim() const { return static_cast<int>(a.size()); }
};

ExpSumMap make_expsum_map(std::vector<double> a, double eps = 1e-9);

/// ObservationMap wrapper around an ExpSumMap (scalar output, analytic grad).
ObservationMap expsum_observation_map(const ExpSumMap& map);

struct AdmissibilityReport {
  bool admissible = false;
  double min_margin = 0.0;
  std::vector<int> worst_pattern;  // u in {-1,0,1}^d achieving the min
};

/// Enumerates the (3^d - 1)/2 nonzero sign patterns u up to global sign and
/// reports min_u |sum_j u_j a_j^{-2}|. Admissible iff the min exceeds eps.
AdmissibilityReport check_coefficient_condition(const std::vector<double>& a,
                                                double eps);

/// Y = h o X on the path grid. Hidden states are not carried over.
ObsPath observe(const ObservationMap& map, const Path& path);
ObsPath observe_scalar(const ScalarFunc& h, const Path& path);

/// Inverse of h restricted to a monotone interval [lo,hi]; y must lie in the
/// closed range of h over the interval (tolerance 1e-9).
double branch_inverse(const PiecewiseMonotoneMap& pmap, double lo, double hi,
                      double y);

/// Detectability function at critical point c:
/// (g h')^2(x_c^-) - (g h')^2(x_c^+) for the two aliases of x in (l_c,r_c).
double gamma_c(const PiecewiseMonotoneMap& pmap, const ScalarFunc& g, double c,
               double x);

}  // namespace difftrack
