#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "difftrack/path.hpp"

namespace difftrack {

using ScalarFunc = std::function<double(double)>;

/// One-dimensional Ito SDE dX = f(X)dt + g(X)dW with user-declared bounds
/// on the diffusion coefficient. Bounds are checked by sampling along the
/// simulated trajectory, not proven.
struct SdeSpec1D {
  ScalarFunc drift;            // f
  ScalarFunc diffusion;        // g, must stay in [g_min, g_max]
  ScalarFunc diffusion_prime;  // g', optional; finite differences otherwise
  double g_min = 0.0;
  double g_max = 0.0;
  double gprime_max = 0.0;
  double x0 = 0.0;
};

/// g'(x): analytic derivative when supplied, else central finite difference
/// with step 1e-6 * max(1,|x|).
double diffusion_prime(const SdeSpec1D& spec, double x);

/// Standard d-dimensional Brownian motion on a uniform grid with exact
/// Gaussian increments. Starts at the origin unless `start` is given.
Path simulate_bm(int dim, double t_end, double dt, std::uint64_t seed,
                 const std::vector<double>* start = nullptr);

/// Euler-Maruyama discretization of a 1-D SDE. Deterministic given the seed.
/// Throws ModelError naming the violated bound if g or g' leaves the
/// declared range along the trajectory.
Path simulate_sde_1d(const SdeSpec1D& spec, double t_end, double dt,
                     std::uint64_t seed);

/// Lamperti change of coordinates Phi(x) = int_0^x 1/g, by adaptive
/// quadrature with absolute tolerance 1e-10. Strictly increasing.
double lamperti_transform(const SdeSpec1D& spec, double x);

/// Phi^{-1}(y) by bisection-safeguarded Newton on Phi.
double lamperti_inverse(const SdeSpec1D& spec, double y);

/// Drift of the transformed process: b = [f/g - g'/(2 g^2)] o Phi^{-1}.
double lamperti_drift(const SdeSpec1D& spec, double y);

/// Precomputed Phi on a dense grid with exact slopes 1/g at the nodes
/// (monotone cubic Hermite between nodes). Used where the transform is
/// evaluated millions of times per tracked path.
class LampertiTable {
 public:
  LampertiTable(const SdeSpec1D& spec, double x_lo, double x_hi,
                std::size_t nodes = 20001);

  double phi(double x) const;
  double inverse(double y) const;
  double x_lo() const { return x_lo_; }
  double x_hi() const { return x_hi_; }

 private:
  double x_lo_, x_hi_, step_;
  std::vector<double> phi_;    // Phi at the nodes
  std::vector<double> slope_;  // 1/g at the nodes
};

}  // namespace difftrack
