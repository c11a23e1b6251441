#pragma once

#include <cmath>
#include <utility>

#include "difftrack/errors.hpp"

namespace difftrack {

struct RootOptions {
  double tol = 1e-12;  // relative: accept when |hi-lo| <= tol*(1+|x|)
  int max_iter = 200;
};

/// Root of f on [lo,hi], where f(lo) and f(hi) bracket zero. Bisection
/// safeguarded by secant steps; the bracket never widens.
template <typename F>
double solve_bracketed(F&& f, double lo, double hi, RootOptions opts = {}) {
  double flo = f(lo);
  double fhi = f(hi);
  if (flo == 0.0) return lo;
  if (fhi == 0.0) return hi;
  if ((flo > 0.0) == (fhi > 0.0))
    throw NumericalError("solve_bracketed: endpoints do not bracket a root");

  double x = 0.5 * (lo + hi);
  for (int it = 0; it < opts.max_iter; ++it) {
    // Secant proposal from the current bracket endpoints.
    double xs = hi - fhi * (hi - lo) / (fhi - flo);
    if (!(xs > lo && xs < hi)) xs = 0.5 * (lo + hi);
    double fx = f(xs);
    x = xs;
    if (fx == 0.0) return x;
    if ((fx > 0.0) == (flo > 0.0)) {
      lo = xs;
      flo = fx;
    } else {
      hi = xs;
      fhi = fx;
    }
    if (hi - lo <= opts.tol * (1.0 + std::abs(x))) return 0.5 * (lo + hi);
    // Force a bisection step every other iteration to keep the worst case
    // logarithmic when the secant stalls at one end.
    if (it % 2 == 1) {
      double xm = 0.5 * (lo + hi);
      double fm = f(xm);
      if (fm == 0.0) return xm;
      if ((fm > 0.0) == (flo > 0.0)) {
        lo = xm;
        flo = fm;
      } else {
        hi = xm;
        fhi = fm;
      }
      x = xm;
      if (hi - lo <= opts.tol * (1.0 + std::abs(x))) return 0.5 * (lo + hi);
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace difftrack
