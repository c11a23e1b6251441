#include "difftrack/sdesim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "difftrack/errors.hpp"
#include "difftrack/rng.hpp"

namespace difftrack {

namespace {

void check_sim_params(double t_end, double dt) {
  if (!(dt > 0.0)) throw ParameterError("simulate: dt must be positive");
  if (!(t_end >= dt)) throw ParameterError("simulate: t_end must be >= dt");
}

std::size_t grid_steps(double t_end, double dt) {
  return static_cast<std::size_t>(std::llround(t_end / dt));
}

void check_bounds(const SdeSpec1D& spec, double x) {
  const double g = spec.diffusion(x);
  if (!(g >= spec.g_min))
    throw ModelError("simulate_sde_1d: g(" + std::to_string(x) + ") = " +
                     std::to_string(g) + " violates lower bound g_min = " +
                     std::to_string(spec.g_min));
  if (!(g <= spec.g_max))
    throw ModelError("simulate_sde_1d: g(" + std::to_string(x) + ") = " +
                     std::to_string(g) + " violates upper bound g_max = " +
                     std::to_string(spec.g_max));
  const double gp = diffusion_prime(spec, x);
  if (!(std::abs(gp) <= spec.gprime_max))
    throw ModelError("simulate_sde_1d: |g'(" + std::to_string(x) + ")| = " +
                     std::to_string(std::abs(gp)) +
                     " violates bound gprime_max = " +
                     std::to_string(spec.gprime_max));
}

// Adaptive Simpson with absolute tolerance, recursing on [a,b].
double adaptive_simpson(const ScalarFunc& f, double a, double b, double fa,
                        double fm, double fb, double whole, double tol,
                        int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  const double delta = left + right - whole;
  if (depth <= 0)
    throw NumericalError(
        "lamperti_transform: quadrature did not converge; residual " +
        std::to_string(std::abs(delta)));
  if (std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

double integrate(const ScalarFunc& f, double a, double b, double tol) {
  if (a == b) return 0.0;
  const double fa = f(a);
  const double fb = f(b);
  const double m = 0.5 * (a + b);
  const double fm = f(m);
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return adaptive_simpson(f, a, b, fa, fm, fb, whole, tol, 48);
}

}  // namespace

double diffusion_prime(const SdeSpec1D& spec, double x) {
  if (spec.diffusion_prime) return spec.diffusion_prime(x);
  const double h = 1e-6 * std::max(1.0, std::abs(x));
  return (spec.diffusion(x + h) - spec.diffusion(x - h)) / (2.0 * h);
}

Path simulate_bm(int dim, double t_end, double dt, std::uint64_t seed,
                 const std::vector<double>* start) {
  if (dim < 1) throw ParameterError("simulate_bm: dim must be >= 1");
  check_sim_params(t_end, dt);
  if (start && static_cast<int>(start->size()) != dim)
    throw ParameterError("simulate_bm: start point dimension mismatch");

  const std::size_t n = grid_steps(t_end, dt);
  Path path;
  path.dim = dim;
  path.dt = dt;
  path.seed = seed;
  path.times.resize(n + 1);
  path.states.resize((n + 1) * static_cast<std::size_t>(dim));

  SplitMix64 rng(seed);
  for (int j = 0; j < dim; ++j)
    path.states[j] = start ? (*start)[static_cast<std::size_t>(j)] : 0.0;
  const double sdt = std::sqrt(dt);
  for (std::size_t k = 0; k < n; ++k) {
    path.times[k] = static_cast<double>(k) * dt;
    const std::size_t row = k * static_cast<std::size_t>(dim);
    for (int j = 0; j < dim; ++j)
      path.states[row + dim + j] = path.states[row + j] + sdt * rng.next_gaussian();
  }
  path.times[n] = static_cast<double>(n) * dt;
  return path;
}

Path simulate_sde_1d(const SdeSpec1D& spec, double t_end, double dt,
                     std::uint64_t seed) {
  if (!(spec.g_min > 0.0))
    throw ParameterError("simulate_sde_1d: g_min must be positive");
  check_sim_params(t_end, dt);

  const std::size_t n = grid_steps(t_end, dt);
  Path path;
  path.dim = 1;
  path.dt = dt;
  path.seed = seed;
  path.times.resize(n + 1);
  path.states.resize(n + 1);

  SplitMix64 rng(seed);
  const double sdt = std::sqrt(dt);
  double x = spec.x0;
  path.states[0] = x;
  check_bounds(spec, x);
  for (std::size_t k = 0; k < n; ++k) {
    path.times[k] = static_cast<double>(k) * dt;
    x += spec.drift(x) * dt + spec.diffusion(x) * sdt * rng.next_gaussian();
    check_bounds(spec, x);
    path.states[k + 1] = x;
  }
  path.times[n] = static_cast<double>(n) * dt;
  return path;
}

double lamperti_transform(const SdeSpec1D& spec, double x) {
  const auto integrand = [&](double u) { return 1.0 / spec.diffusion(u); };
  if (x >= 0.0) return integrate(integrand, 0.0, x, 1e-10);
  return -integrate(integrand, x, 0.0, 1e-10);
}

double lamperti_inverse(const SdeSpec1D& spec, double y) {
  if (y == 0.0) return 0.0;
  // Phi' = 1/g in [1/g_max, 1/g_min] gives a hard bracket for Phi^{-1}(y).
  double lo = std::min(y * spec.g_min, y * spec.g_max);
  double hi = std::max(y * spec.g_min, y * spec.g_max);
  double flo = lamperti_transform(spec, lo) - y;
  double fhi = lamperti_transform(spec, hi) - y;
  if (flo > 0.0 || fhi < 0.0)
    throw NumericalError("lamperti_inverse: bracket construction failed");

  double x = 0.5 * (lo + hi);
  double fx = lamperti_transform(spec, x) - y;
  for (int it = 0; it < 100; ++it) {
    if (std::abs(fx) <= 1e-13 * (1.0 + std::abs(y))) return x;
    if (fx > 0.0) hi = x; else lo = x;
    double xn = x - fx * spec.diffusion(x);  // Newton: Phi' = 1/g
    if (!(xn > lo && xn < hi)) xn = 0.5 * (lo + hi);
    x = xn;
    fx = lamperti_transform(spec, x) - y;
    if (hi - lo <= 1e-14 * (1.0 + std::abs(x))) return x;
  }
  throw NumericalError("lamperti_inverse: root finding did not converge");
}

double lamperti_drift(const SdeSpec1D& spec, double y) {
  const double x = lamperti_inverse(spec, y);
  const double g = spec.diffusion(x);
  return spec.drift(x) / g - diffusion_prime(spec, x) / (2.0 * g * g);
}

LampertiTable::LampertiTable(const SdeSpec1D& spec, double x_lo, double x_hi,
                             std::size_t nodes)
    : x_lo_(x_lo), x_hi_(x_hi) {
  if (!(x_hi > x_lo) || nodes < 2)
    throw ParameterError("LampertiTable: bad domain");
  step_ = (x_hi - x_lo) / static_cast<double>(nodes - 1);
  phi_.resize(nodes);
  slope_.resize(nodes);
  phi_[0] = lamperti_transform(spec, x_lo);
  slope_[0] = 1.0 / spec.diffusion(x_lo);
  for (std::size_t i = 1; i < nodes; ++i) {
    const double a = x_lo + static_cast<double>(i - 1) * step_;
    const double b = x_lo + static_cast<double>(i) * step_;
    const auto integrand = [&](double u) { return 1.0 / spec.diffusion(u); };
    phi_[i] = phi_[i - 1] + integrate(integrand, a, b, 1e-13);
    slope_[i] = 1.0 / spec.diffusion(b);
  }
}

double LampertiTable::phi(double x) const {
  if (!(x >= x_lo_ && x <= x_hi_))
    throw RangeError("LampertiTable::phi: x outside tabulated domain");
  const double s = (x - x_lo_) / step_;
  std::size_t i = std::min(static_cast<std::size_t>(s), phi_.size() - 2);
  const double t = (x - (x_lo_ + static_cast<double>(i) * step_)) / step_;
  // Cubic Hermite with exact node slopes 1/g.
  const double h00 = (1.0 + 2.0 * t) * (1.0 - t) * (1.0 - t);
  const double h10 = t * (1.0 - t) * (1.0 - t);
  const double h01 = t * t * (3.0 - 2.0 * t);
  const double h11 = t * t * (t - 1.0);
  return h00 * phi_[i] + h10 * step_ * slope_[i] + h01 * phi_[i + 1] +
         h11 * step_ * slope_[i + 1];
}

double LampertiTable::inverse(double y) const {
  const double tol = 1e-9 * (phi_.back() - phi_.front());
  if (!(y >= phi_.front() - tol && y <= phi_.back() + tol))
    throw RangeError("LampertiTable::inverse: y outside tabulated range");
  y = std::clamp(y, phi_.front(), phi_.back());
  // Locate the node interval (phi_ is strictly increasing), then Newton.
  auto it = std::upper_bound(phi_.begin(), phi_.end(), y);
  std::size_t i = std::min(
      static_cast<std::size_t>(std::max<std::ptrdiff_t>(it - phi_.begin() - 1, 0)),
      phi_.size() - 2);
  double lo = x_lo_ + static_cast<double>(i) * step_;
  double hi = lo + step_;
  double x = lo + (y - phi_[i]) / (phi_[i + 1] - phi_[i]) * step_;
  for (int k = 0; k < 30; ++k) {
    const double fx = phi(x) - y;
    if (std::abs(fx) <= 1e-14 * (1.0 + std::abs(y))) break;
    if (fx > 0.0) hi = x; else lo = x;
    const double t = (x - (x_lo_ + static_cast<double>(i) * step_)) / step_;
    const double dphi = slope_[i] * (1.0 - t) + slope_[i + 1] * t;  // approx
    double xn = x - fx / dphi;
    if (!(xn > lo && xn < hi)) xn = 0.5 * (lo + hi);
    x = xn;
  }
  return x;
}

}  // namespace difftrack
