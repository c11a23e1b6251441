#include "difftrack/symmetry.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>

#include <nlohmann/json.hpp>

#include "difftrack/errors.hpp"
#include "difftrack/rng.hpp"

namespace difftrack {

// ---------------------------------------------------------------------------
// Candidates

IsometryCandidate make_isometry(Eigen::VectorXd a, Eigen::MatrixXd O,
                                IsometryCandidate::Kind kind) {
  const auto d = a.size();
  if (O.rows() != d || O.cols() != d)
    throw ParameterError("isometry: dimension mismatch");
  const double ortho_err =
      (O.transpose() * O - Eigen::MatrixXd::Identity(d, d))
          .cwiseAbs()
          .maxCoeff();
  if (ortho_err > 1e-10)
    throw ParameterError("isometry: matrix is not orthogonal (error " +
                         std::to_string(ortho_err) + ")");
  const bool trivial =
      a.cwiseAbs().maxCoeff() == 0.0 &&
      (O - Eigen::MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() == 0.0;
  if (trivial) throw ParameterError("isometry: identity is not a candidate");
  return IsometryCandidate{std::move(a), std::move(O), kind};
}

IsometryCandidate make_translation(const Eigen::VectorXd& a) {
  return make_isometry(a, Eigen::MatrixXd::Identity(a.size(), a.size()),
                       IsometryCandidate::Kind::translation);
}

IsometryCandidate make_point_reflection(const Eigen::VectorXd& center) {
  const auto d = center.size();
  return make_isometry(2.0 * center, -Eigen::MatrixXd::Identity(d, d),
                       IsometryCandidate::Kind::point_reflection);
}

IsometryCandidate make_hyperplane_reflection(const Eigen::VectorXd& n,
                                             double alpha) {
  const double nn = n.norm();
  if (nn < 1e-12)
    throw ParameterError("hyperplane reflection: zero normal");
  const Eigen::VectorXd u = n / nn;
  const auto d = n.size();
  const Eigen::MatrixXd O =
      Eigen::MatrixXd::Identity(d, d) - 2.0 * u * u.transpose();
  return make_isometry(2.0 * alpha * u, O,
                       IsometryCandidate::Kind::hyperplane_reflection);
}

IsometryCandidate inverse(const IsometryCandidate& kappa) {
  IsometryCandidate inv;
  inv.orthogonal = kappa.orthogonal.transpose();
  inv.translation = -(inv.orthogonal * kappa.translation);
  inv.kind = kappa.kind;
  return inv;
}

std::string to_string(SymmetryVerdict v) {
  switch (v) {
    case SymmetryVerdict::symmetric: return "symmetric";
    case SymmetryVerdict::no_symmetry_found: return "no_symmetry_found";
    default: return "inconclusive";
  }
}

// ---------------------------------------------------------------------------
// Residual

namespace {

void check_box(const Box& box) {
  if (box.lo.size() == 0 || box.lo.size() != box.hi.size())
    throw ParameterError("box: dimension mismatch");
  for (Eigen::Index i = 0; i < box.lo.size(); ++i)
    if (!(box.hi[i] > box.lo[i])) throw ParameterError("box: degenerate side");
}

bool inside(const Box& box, const Eigen::VectorXd& x) {
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (x[i] < box.lo[i] || x[i] > box.hi[i]) return false;
  return true;
}

Eigen::VectorXd sample_point(const Box& box, SplitMix64& rng) {
  Eigen::VectorXd x(box.lo.size());
  for (Eigen::Index i = 0; i < x.size(); ++i)
    x[i] = box.lo[i] + (box.hi[i] - box.lo[i]) * rng.next_unit();
  return x;
}

// Fixed sample set reused across many candidate evaluations so that the
// search objective is a deterministic smooth function of the candidate.
struct ResidualEvaluator {
  Box domain;
  std::vector<Eigen::VectorXd> points;
  std::vector<Eigen::VectorXd> values;
  double denom = 0.0;

  ResidualEvaluator(const ObservationMap& h, const Box& box, int n_samples,
                    std::uint64_t seed)
      : domain(box) {
    check_box(box);
    if (n_samples < 100)
      throw ParameterError("symmetry_residual: n_samples must be >= 100");
    SplitMix64 rng(seed);
    points.reserve(static_cast<std::size_t>(n_samples));
    values.reserve(static_cast<std::size_t>(n_samples));
    double sq = 0.0;
    for (int i = 0; i < n_samples; ++i) {
      Eigen::VectorXd x = sample_point(box, rng);
      Eigen::VectorXd hx = h.eval(x);
      sq += hx.squaredNorm();
      points.push_back(std::move(x));
      values.push_back(std::move(hx));
    }
    denom = std::sqrt(sq / n_samples);
  }

  // (residual, inside_fraction); residual is +inf when too few images land
  // in the domain.
  std::pair<double, double> eval(const ObservationMap& h,
                                 const IsometryCandidate& kappa) const {
    double sq = 0.0;
    std::size_t kept = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const Eigen::VectorXd y = kappa.apply(points[i]);
      if (!inside(domain, y)) continue;
      sq += (h.eval(y) - values[i]).squaredNorm();
      ++kept;
    }
    const double frac = static_cast<double>(kept) / points.size();
    if (frac < 0.01)
      return {std::numeric_limits<double>::infinity(), frac};
    const double rms = std::sqrt(sq / static_cast<double>(kept));
    return {rms / std::max(denom, 1e-300), frac};
  }
};

// Golden-section minimization; f need not be smooth at the minimum.
double golden_minimize(const std::function<double(double)>& f, double lo,
                       double hi, double xtol) {
  const double invphi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - invphi * (b - a);
  double d = a + invphi * (b - a);
  double fc = f(c), fd = f(d);
  while (b - a > xtol) {
    if (fc < fd) {
      b = d; d = c; fd = fc;
      c = b - invphi * (b - a);
      fc = f(c);
    } else {
      a = c; c = d; fc = fd;
      d = a + invphi * (b - a);
      fd = f(d);
    }
  }
  return 0.5 * (a + b);
}

// Local minima of a sampled curve below a threshold.
std::vector<std::size_t> local_minima(const std::vector<double>& v,
                                      double threshold) {
  std::vector<std::size_t> out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i)
    if (v[i] <= v[i - 1] && v[i] <= v[i + 1] && v[i] < threshold)
      out.push_back(i);
  return out;
}

}  // namespace

std::pair<double, double> symmetry_residual(const ObservationMap& h,
                                            const IsometryCandidate& kappa,
                                            const Box& domain, int n_samples,
                                            std::uint64_t seed) {
  if (kappa.dim() != h.dim_in)
    throw ParameterError("symmetry_residual: candidate dimension mismatch");
  const ResidualEvaluator ev(h, domain, n_samples, seed);
  auto [res, frac] = ev.eval(h, kappa);
  if (!std::isfinite(res))
    throw NumericalError(
        "symmetry_residual: insufficient overlap, inside fraction " +
        std::to_string(frac));
  return {res, frac};
}

// ---------------------------------------------------------------------------
// 1-D detection

SymmetryReport detect_symmetries_1d(const ScalarFunc& h, double lo, double hi,
                                    int grid, double tol) {
  if (!(hi > lo)) throw ParameterError("detect_symmetries_1d: bad interval");
  if (grid < 1000)
    throw ParameterError("detect_symmetries_1d: grid must be >= 1000");
  if (!(tol > 0.0)) throw ParameterError("detect_symmetries_1d: bad tol");

  const double range = hi - lo;
  std::vector<double> xs(static_cast<std::size_t>(grid));
  double hrms = 0.0;
  for (int i = 0; i < grid; ++i) {
    xs[static_cast<std::size_t>(i)] = lo + range * (i + 0.5) / grid;
    const double v = h(xs[static_cast<std::size_t>(i)]);
    hrms += v * v;
  }
  hrms = std::max(std::sqrt(hrms / grid), 1e-300);

  const auto period_residual = [&](double p) {
    double sq = 0.0;
    int kept = 0;
    for (double x : xs) {
      if (x + p > hi) break;
      const double d = h(x + p) - h(x);
      sq += d * d;
      ++kept;
    }
    if (kept < grid / 100) return std::numeric_limits<double>::infinity();
    return std::sqrt(sq / kept) / hrms;
  };
  const auto center_residual = [&](double a) {
    double sq = 0.0;
    int kept = 0;
    for (double x : xs) {
      const double y = 2.0 * a - x;
      if (y < lo || y > hi) continue;
      const double d = h(y) - h(x);
      sq += d * d;
      ++kept;
    }
    if (kept < grid / 100) return std::numeric_limits<double>::infinity();
    return std::sqrt(sq / kept) / hrms;
  };

  SymmetryReport report;
  report.domain = Box{Eigen::VectorXd::Constant(1, lo),
                      Eigen::VectorXd::Constant(1, hi)};
  report.n_samples = grid;
  const double screen = 0.05;
  const double xtol = 1e-10 * range;

  // Periods: scan (p_min, range/2], polish sub-threshold minima.
  {
    const double p_min = 10.0 * range / grid;
    const int np = 4 * grid;
    std::vector<double> curve(static_cast<std::size_t>(np));
    std::vector<double> ps(static_cast<std::size_t>(np));
    for (int i = 0; i < np; ++i) {
      ps[static_cast<std::size_t>(i)] =
          p_min + (0.5 * range - p_min) * i / (np - 1);
      curve[static_cast<std::size_t>(i)] =
          period_residual(ps[static_cast<std::size_t>(i)]);
    }
    for (std::size_t i : local_minima(curve, screen)) {
      const double p =
          golden_minimize(period_residual, ps[i - 1], ps[i + 1], xtol);
      const double r = period_residual(p);
      if (r <= tol) {
        SymmetryFinding f;
        f.kappa = make_translation(Eigen::VectorXd::Constant(1, p));
        f.residual = r;
        f.inside_fraction = (range - p) / range;
        report.candidates.push_back(std::move(f));
      }
    }
  }

  // Reflection centers.
  {
    const int na = 4 * grid;
    std::vector<double> curve(static_cast<std::size_t>(na));
    std::vector<double> as(static_cast<std::size_t>(na));
    for (int i = 0; i < na; ++i) {
      as[static_cast<std::size_t>(i)] = lo + range * i / (na - 1);
      curve[static_cast<std::size_t>(i)] =
          center_residual(as[static_cast<std::size_t>(i)]);
    }
    for (std::size_t i : local_minima(curve, screen)) {
      const double a =
          golden_minimize(center_residual, as[i - 1], as[i + 1], xtol);
      const double r = center_residual(a);
      if (r <= tol) {
        SymmetryFinding f;
        f.kappa = make_point_reflection(Eigen::VectorXd::Constant(1, a));
        f.residual = r;
        f.inside_fraction = 1.0;
        report.candidates.push_back(std::move(f));
      }
    }
  }

  std::sort(report.candidates.begin(), report.candidates.end(),
            [](const SymmetryFinding& a, const SymmetryFinding& b) {
              return a.residual < b.residual;
            });
  report.verdict = report.candidates.empty()
                       ? SymmetryVerdict::no_symmetry_found
                       : SymmetryVerdict::symmetric;
  return report;
}

// ---------------------------------------------------------------------------
// n-D reflection search

namespace {

// Nelder-Mead on R^m. Returns the best point found.
Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f,
                            Eigen::VectorXd x0, double scale, int max_iter) {
  const int m = static_cast<int>(x0.size());
  std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(m + 1), x0);
  std::vector<double> vals(static_cast<std::size_t>(m + 1));
  for (int i = 0; i < m; ++i) pts[static_cast<std::size_t>(i + 1)][i] += scale;
  for (std::size_t i = 0; i < pts.size(); ++i) vals[i] = f(pts[i]);

  const auto order = [&] {
    std::vector<std::size_t> idx(pts.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    std::vector<Eigen::VectorXd> p2;
    std::vector<double> v2;
    for (std::size_t i : idx) {
      p2.push_back(pts[i]);
      v2.push_back(vals[i]);
    }
    pts = std::move(p2);
    vals = std::move(v2);
  };

  for (int it = 0; it < max_iter; ++it) {
    order();
    if (vals.back() - vals.front() < 1e-14 * (1.0 + std::abs(vals.front())))
      break;
    Eigen::VectorXd centroid = Eigen::VectorXd::Zero(m);
    for (int i = 0; i < m; ++i) centroid += pts[static_cast<std::size_t>(i)];
    centroid /= m;
    const Eigen::VectorXd& worst = pts.back();
    const Eigen::VectorXd xr = centroid + (centroid - worst);
    const double fr = f(xr);
    if (fr < vals.front()) {
      const Eigen::VectorXd xe = centroid + 2.0 * (centroid - worst);
      const double fe = f(xe);
      if (fe < fr) { pts.back() = xe; vals.back() = fe; }
      else { pts.back() = xr; vals.back() = fr; }
    } else if (fr < vals[vals.size() - 2]) {
      pts.back() = xr; vals.back() = fr;
    } else {
      const Eigen::VectorXd xc = centroid + 0.5 * (worst - centroid);
      const double fc = f(xc);
      if (fc < vals.back()) { pts.back() = xc; vals.back() = fc; }
      else {
        for (std::size_t i = 1; i < pts.size(); ++i) {
          pts[i] = pts.front() + 0.5 * (pts[i] - pts.front());
          vals[i] = f(pts[i]);
        }
      }
    }
  }
  order();
  return pts.front();
}

struct Hyperplane {
  Eigen::VectorXd n;  // unit, first nonzero component positive
  double alpha = 0.0;
};

Hyperplane canonical(Eigen::VectorXd n, double alpha) {
  n.normalize();
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    if (std::abs(n[i]) > 1e-12) {
      if (n[i] < 0.0) { n = -n; alpha = -alpha; }
      break;
    }
  }
  return {std::move(n), alpha};
}

bool same_plane(const Hyperplane& a, const Hyperplane& b, double scale) {
  return (a.n - b.n).lpNorm<Eigen::Infinity>() < 1e-6 &&
         std::abs(a.alpha - b.alpha) < 1e-6 * scale;
}

// Intercept range of the box projected onto n.
std::pair<double, double> alpha_range(const Box& box, const Eigen::VectorXd& n) {
  double lo = 0.0, hi = 0.0;
  for (Eigen::Index i = 0; i < n.size(); ++i) {
    const double a = n[i] * box.lo[i], b = n[i] * box.hi[i];
    lo += std::min(a, b);
    hi += std::max(a, b);
  }
  return {lo, hi};
}

SymmetryReport reflection_search(const ObservationMap& h, const Box& box,
                                 int restarts, double tol, std::uint64_t seed,
                                 int n_samples, int nm_iters) {
  check_box(box);
  const int d = h.dim_in;
  if (d > 6) throw CapacityError("detect_reflections_nd: d > 6");
  if (restarts < 10)
    throw ParameterError("detect_reflections_nd: restarts must be >= 10");

  const ResidualEvaluator ev(h, box, n_samples, seed);
  const double scale = (box.hi - box.lo).maxCoeff();

  const auto plane_residual = [&](const Eigen::VectorXd& n, double alpha) {
    const IsometryCandidate k = make_hyperplane_reflection(n, alpha);
    return ev.eval(h, k);
  };

  std::vector<Hyperplane> found;
  std::vector<SymmetryFinding> findings;
  const auto record = [&](Eigen::VectorXd n, double alpha) {
    Hyperplane hp = canonical(std::move(n), alpha);
    auto [res, frac] = plane_residual(hp.n, hp.alpha);
    if (std::abs(hp.alpha) < 1e-6 * scale) {
      const auto [res0, frac0] = plane_residual(hp.n, 0.0);
      if (res0 <= res) {
        hp.alpha = 0.0;
        res = res0;
        frac = frac0;
      }
    }
    if (!(res <= tol)) return;
    for (const Hyperplane& g : found)
      if (same_plane(hp, g, scale)) return;
    SymmetryFinding f;
    f.kappa = make_hyperplane_reflection(hp.n, hp.alpha);
    f.residual = res;
    f.inside_fraction = frac;
    found.push_back(std::move(hp));
    findings.push_back(std::move(f));
  };

  // Canonical normals: coordinate axes and pairwise swap directions. The
  // intercept is scanned, then polished by golden section around each
  // sub-threshold minimum.
  std::vector<Eigen::VectorXd> normals;
  for (int i = 0; i < d; ++i) {
    Eigen::VectorXd n = Eigen::VectorXd::Zero(d);
    n[i] = 1.0;
    normals.push_back(n);
    for (int j = i + 1; j < d; ++j) {
      Eigen::VectorXd m = Eigen::VectorXd::Zero(d);
      m[i] = 1.0;
      m[j] = -1.0;
      normals.push_back(m.normalized());
      m[j] = 1.0;
      normals.push_back(m.normalized());
    }
  }
  for (const Eigen::VectorXd& n : normals) {
    const auto [alo, ahi] = alpha_range(box, n);
    const int na = 201;
    std::vector<double> curve(na);
    for (int i = 0; i < na; ++i) {
      const double a = alo + (ahi - alo) * i / (na - 1);
      curve[static_cast<std::size_t>(i)] = plane_residual(n, a).first;
    }
    for (std::size_t i : local_minima(curve, 0.2)) {
      const double a0 = alo + (ahi - alo) * (static_cast<double>(i) - 1) / (na - 1);
      const double a1 = alo + (ahi - alo) * (static_cast<double>(i) + 1) / (na - 1);
      const double a = golden_minimize(
          [&](double al) { return plane_residual(n, al).first; }, a0, a1,
          1e-12 * scale);
      record(n, a);
    }
    // Interior minima can sit at the scan edges for symmetric boxes.
    if (curve.front() < 0.2) record(n, alo);
    if (curve.back() < 0.2) record(n, ahi);
  }

  // Multi-start Nelder-Mead over (v, alpha) with n = v/|v|.
  const auto objective = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd v = p.head(d);
    const double nn = v.norm();
    if (nn < 1e-8) return 1e6;
    const auto [res, frac] = plane_residual(v / nn, p[d]);
    (void)frac;
    return std::isfinite(res) ? res : 1e6;
  };
  for (int r = 0; r < restarts; ++r) {
    SplitMix64 rng(derive_seed(seed, static_cast<std::uint64_t>(r) + 1000));
    Eigen::VectorXd p0(d + 1);
    for (int i = 0; i < d; ++i) p0[i] = 2.0 * rng.next_unit() - 1.0;
    if (p0.head(d).norm() < 1e-3) p0[0] = 1.0;
    const auto [alo, ahi] = alpha_range(box, p0.head(d).normalized());
    p0[d] = alo + (ahi - alo) * rng.next_unit();
    const Eigen::VectorXd best = nelder_mead(objective, p0, 0.2, nm_iters);
    if (best.head(d).norm() < 1e-8) continue;
    record(best.head(d).normalized(), best[d]);
  }

  SymmetryReport report;
  report.domain = box;
  report.n_samples = n_samples;
  report.seed = seed;
  report.candidates = std::move(findings);
  std::sort(report.candidates.begin(), report.candidates.end(),
            [](const SymmetryFinding& a, const SymmetryFinding& b) {
              return a.residual < b.residual;
            });
  report.verdict = report.candidates.empty()
                       ? SymmetryVerdict::no_symmetry_found
                       : SymmetryVerdict::symmetric;
  return report;
}

}  // namespace

SymmetryReport detect_reflections_nd(const ObservationMap& h, const Box& domain,
                                     int restarts, double tol,
                                     std::uint64_t seed) {
  return reflection_search(h, domain, restarts, tol, seed, 2000, 400);
}

std::vector<LocalSymmetryHit> local_reflection_scan(const ObservationMap& h,
                                                    const Box& domain,
                                                    double tol,
                                                    std::uint64_t seed) {
  check_box(domain);
  const int d = h.dim_in;
  std::vector<LocalSymmetryHit> hits;
  const Eigen::VectorXd side = domain.hi - domain.lo;
  for (double scale : {1.0, 0.5, 0.25}) {
    const int steps = scale == 1.0 ? 1 : static_cast<int>(2.0 / scale) - 1;
    std::vector<int> idx(static_cast<std::size_t>(d), 0);
    while (true) {
      Box sub;
      sub.lo = domain.lo;
      sub.hi = domain.lo;
      for (int i = 0; i < d; ++i) {
        const double off =
            steps == 1 ? 0.0
                       : side[i] * (1.0 - scale) *
                             idx[static_cast<std::size_t>(i)] / (steps - 1.0);
        sub.lo[i] = domain.lo[i] + off;
        sub.hi[i] = sub.lo[i] + scale * side[i];
      }
      SymmetryReport rep =
          reflection_search(h, sub, 10, tol, derive_seed(seed, hits.size() + 1),
                            400, 120);
      for (SymmetryFinding& f : rep.candidates)
        hits.push_back(LocalSymmetryHit{sub, std::move(f)});
      int i = 0;
      for (; i < d; ++i) {
        if (++idx[static_cast<std::size_t>(i)] < steps) break;
        idx[static_cast<std::size_t>(i)] = 0;
      }
      if (i == d) break;
    }
  }
  return hits;
}

// ---------------------------------------------------------------------------
// Verdict and serialization

std::string asymmetry_verdict(const ObservationMap& h, bool analytic,
                              const SymmetryReport& report,
                              const std::optional<Eigen::VectorXd>&
                                  rank_witness) {
  if (report.verdict == SymmetryVerdict::symmetric) return "obstructed";
  if (!analytic || report.verdict != SymmetryVerdict::no_symmetry_found)
    return "inconclusive";
  if (!rank_witness)
    throw ParameterError(
        "asymmetry_verdict: analytic map requires a rank witness");
  const Eigen::VectorXd& x = *rank_witness;
  if (x.size() != h.dim_in)
    throw ParameterError("asymmetry_verdict: witness dimension mismatch");
  Eigen::MatrixXd J;
  if (h.grad) {
    J = h.grad(x);
  } else {
    J.resize(h.dim_out, h.dim_in);
    for (int j = 0; j < h.dim_in; ++j) {
      const double step = 1e-6 * std::max(1.0, std::abs(x[j]));
      Eigen::VectorXd xp = x, xm = x;
      xp[j] += step;
      xm[j] -= step;
      J.col(j) = (h.eval(xp) - h.eval(xm)) / (2.0 * step);
    }
  }
  const double smin =
      J.jacobiSvd().singularValues().minCoeff();
  if (!(smin > 1e-6))
    throw ParameterError(
        "asymmetry_verdict: rank witness Jacobian is near-singular (smin " +
        std::to_string(smin) + ")");
  return "trackable (evidence)";
}

void write_symmetry_report_json(const SymmetryReport& report,
                                std::ostream& out) {
  nlohmann::json j;
  j["verdict"] = to_string(report.verdict);
  j["evidence_only"] = report.evidence_only;
  j["n_samples"] = report.n_samples;
  j["seed"] = report.seed;
  j["domain"] = {{"lo", std::vector<double>(report.domain.lo.begin(),
                                            report.domain.lo.end())},
                 {"hi", std::vector<double>(report.domain.hi.begin(),
                                            report.domain.hi.end())}};
  j["candidates"] = nlohmann::json::array();
  for (const SymmetryFinding& f : report.candidates) {
    nlohmann::json c;
    c["translation"] = std::vector<double>(f.kappa.translation.begin(),
                                           f.kappa.translation.end());
    std::vector<std::vector<double>> O;
    for (Eigen::Index r = 0; r < f.kappa.orthogonal.rows(); ++r) {
      std::vector<double> row;
      for (Eigen::Index cidx = 0; cidx < f.kappa.orthogonal.cols(); ++cidx)
        row.push_back(f.kappa.orthogonal(r, cidx));
      O.push_back(std::move(row));
    }
    c["orthogonal"] = O;
    switch (f.kappa.kind) {
      case IsometryCandidate::Kind::translation: c["kind"] = "translation"; break;
      case IsometryCandidate::Kind::point_reflection:
        c["kind"] = "point_reflection";
        break;
      case IsometryCandidate::Kind::hyperplane_reflection:
        c["kind"] = "hyperplane_reflection";
        break;
      default: c["kind"] = "general";
    }
    c["residual"] = f.residual;
    c["inside_fraction"] = f.inside_fraction;
    j["candidates"].push_back(std::move(c));
  }
  out << j.dump(2) << '\n';
}

}  // namespace difftrack
