#pragma once

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "difftrack/obsmaps.hpp"
#include "difftrack/sdesim.hpp"

namespace difftrack {

/// Affine isometry x -> a + O x with O orthogonal to 1e-10. Trivial
/// candidates (a = 0, O = I) are rejected at construction.
struct IsometryCandidate {
  enum class Kind { translation, point_reflection, hyperplane_reflection, general };
  Eigen::VectorXd translation;
  Eigen::MatrixXd orthogonal;
  Kind kind = Kind::general;

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const {
    return translation + orthogonal * x;
  }
  int dim() const { return static_cast<int>(translation.size()); }
};

IsometryCandidate make_isometry(Eigen::VectorXd a, Eigen::MatrixXd O,
                                IsometryCandidate::Kind kind =
                                    IsometryCandidate::Kind::general);
IsometryCandidate make_translation(const Eigen::VectorXd& a);
IsometryCandidate make_point_reflection(const Eigen::VectorXd& center);
/// Reflection across the hyperplane {x : <n,x> = alpha}.
IsometryCandidate make_hyperplane_reflection(const Eigen::VectorXd& n,
                                             double alpha);
IsometryCandidate inverse(const IsometryCandidate& kappa);

/// Axis-aligned search/sampling box.
struct Box {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
};

struct SymmetryFinding {
  IsometryCandidate kappa;
  double residual = 0.0;
  double inside_fraction = 0.0;
};

enum class SymmetryVerdict { symmetric, no_symmetry_found, inconclusive };
std::string to_string(SymmetryVerdict v);

struct SymmetryReport {
  std::vector<SymmetryFinding> candidates;  // ascending by residual
  SymmetryVerdict verdict = SymmetryVerdict::no_symmetry_found;
  Box domain;
  int n_samples = 0;
  std::uint64_t seed = 0;
  /// Detection is sampling evidence on the given box, not a proof.
  bool evidence_only = true;
};

/// Monte Carlo residual of h(kappa(x)) = h(x): RMS of the mismatch over
/// uniform samples whose image stays in the domain, normalized by the RMS of
/// |h|. Also returns the fraction of samples kept; throws NumericalError if
/// that fraction is below 0.01.
std::pair<double, double> symmetry_residual(const ObservationMap& h,
                                            const IsometryCandidate& kappa,
                                            const Box& domain, int n_samples,
                                            std::uint64_t seed);

/// Line search for periods and reflection centers of a scalar map: residual
/// scan on a grid followed by local polish of every sub-threshold minimum.
SymmetryReport detect_symmetries_1d(const ScalarFunc& h, double lo, double hi,
                                    int grid, double tol = 1e-6);

/// Multi-start search for invariant hyperplane reflections
/// rho(x) = x - 2(<n,x> - alpha) n. Canonical candidates (coordinate and
/// pairwise-swap normals with polished intercepts) are screened first, then
/// Nelder-Mead restarts over (n, alpha). d <= 6, restarts >= 10.
SymmetryReport detect_reflections_nd(const ObservationMap& h, const Box& domain,
                                     int restarts, double tol = 1e-6,
                                     std::uint64_t seed = 1);

/// Windowed variant: reruns the reflection search on sliding sub-boxes at 3
/// scales, reporting local hits that a global residual can mask.
struct LocalSymmetryHit {
  Box subbox;
  SymmetryFinding finding;
};
std::vector<LocalSymmetryHit> local_reflection_scan(const ObservationMap& h,
                                                    const Box& domain,
                                                    double tol = 1e-6,
                                                    std::uint64_t seed = 1);

/// Trackability verdict from a symmetry report. Any detected symmetry is an
/// obstruction. With no symmetry found, an analytic map together with a
/// full-rank Jacobian witness yields "trackable (evidence)"; anything else is
/// "inconclusive". Verdicts are numerical evidence, not proofs.
std::string asymmetry_verdict(const ObservationMap& h, bool analytic,
                              const SymmetryReport& report,
                              const std::optional<Eigen::VectorXd>&
                                  rank_witness = std::nullopt);

void write_symmetry_report_json(const SymmetryReport& report,
                                std::ostream& out);

}  // namespace difftrack
