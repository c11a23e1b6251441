#include <cmath>
#include <utility>
#include <vector>

#include "difftrack/errors.hpp"
#include "difftrack/obsmaps.hpp"
#include "difftrack/sdesim.hpp"
#include "doctest.h"

using namespace difftrack;

namespace {

PiecewiseMonotoneMap cubic_map() {
  // x^2 + 0.5 x^3 has critical points at -4/3 and 0.
  return make_piecewise_map_auto(
      [](double x) { return x * x + 0.5 * x * x * x; },
      [](double x) { return 2.0 * x + 1.5 * x * x; }, {-4.0 / 3.0, 0.0});
}

Path path_from(std::vector<double> states) {
  Path p;
  p.dim = 1;
  p.dt = 1.0;
  for (std::size_t k = 0; k < states.size(); ++k)
    p.times.push_back(static_cast<double>(k));
  p.states = std::move(states);
  return p;
}

}  // namespace

TEST_CASE("observe applies the map pointwise and drops hidden state") {
  const Path p = path_from({-1.0, 0.0, 2.0});
  SUBCASE("identity") {
    const ObsPath y = observe_scalar([](double x) { return x; }, p);
    for (std::size_t k = 0; k < p.size(); ++k)
      CHECK(y.value(k) == p.state(k));
  }
  SUBCASE("square") {
    const ObsPath y = observe_scalar([](double x) { return x * x; }, p);
    CHECK(y.value(0) == 1.0);
    CHECK(y.value(1) == 0.0);
    CHECK(y.value(2) == 4.0);
  }
  SUBCASE("example2d at the origin gives zero") {
    Path q;
    q.dim = 2;
    q.dt = 1.0;
    q.times = {0.0};
    q.states = {0.0, 0.0};
    const ObsPath y = observe(make_example2d_map(), q);
    CHECK(y.value(0) == 0.0);
  }
}

TEST_CASE("observe rejects a dimension mismatch") {
  const Path p = path_from({0.0, 1.0});
  CHECK_THROWS_AS(observe(make_example2d_map(), p), ParameterError);
}

TEST_CASE("make_observation_map validates a wrong Jacobian") {
  auto eval = [](const Eigen::VectorXd& x) {
    Eigen::VectorXd y(1);
    y[0] = x[0] * x[0];
    return y;
  };
  auto bad_grad = [](const Eigen::VectorXd& x) {
    Eigen::MatrixXd g(1, 1);
    g(0, 0) = 3.0 * x[0];  // wrong on purpose
    return g;
  };
  CHECK_THROWS_AS(make_observation_map(1, 1, eval, bad_grad), ParameterError);
}

TEST_CASE("branch_inverse on the square map") {
  PiecewiseMonotoneMap sq = make_piecewise_map_auto(
      [](double x) { return x * x; }, [](double x) { return 2.0 * x; },
      {0.0});
  CHECK(branch_inverse(sq, 0.0, 2.0, 4.0) == doctest::Approx(2.0).epsilon(1e-10));
  CHECK(branch_inverse(sq, -2.0, 0.0, 4.0) ==
        doctest::Approx(-2.0).epsilon(1e-10));
  CHECK_THROWS_AS(branch_inverse(sq, 0.0, 2.0, 5.0), RangeError);
}

TEST_CASE("branch_inverse round trip on the cubic map") {
  const PiecewiseMonotoneMap pm = cubic_map();
  const double y = pm.h(0.6);
  CHECK(branch_inverse(pm, 0.0, 1.0, y) == doctest::Approx(0.6).epsilon(1e-9));
  for (double x = 0.05; x < 1.0; x += 0.1) {
    const double yy = pm.h(x);
    const double xr = branch_inverse(pm, 0.0, 1.0, yy);
    CHECK(std::abs(pm.h(xr) - yy) <= 1e-9 * (1.0 + std::abs(yy)));
  }
}

TEST_CASE("bracket identities hold for the auto-built cubic brackets") {
  const PiecewiseMonotoneMap pm = cubic_map();
  REQUIRE(pm.criticals.size() == 2);
  REQUIRE(pm.brackets.size() == 2);
  for (std::size_t i = 0; i < pm.criticals.size(); ++i) {
    const auto [l, r] = pm.brackets[i];
    CHECK(l < pm.criticals[i]);
    CHECK(r > pm.criticals[i]);
    CHECK(std::abs(pm.h(l) - pm.h(r)) <= 1e-10);
  }
}

TEST_CASE("alias consistency around a critical point") {
  const PiecewiseMonotoneMap pm = cubic_map();
  const double c = 0.0;
  const auto [l, r] = pm.brackets[1];
  for (double x = c + 0.01; x < r; x += 0.05) {
    const double y = pm.h(x);
    const double xm = branch_inverse(pm, l, c, y);
    const double xp = branch_inverse(pm, c, r, y);
    CHECK(std::abs(pm.h(xm) - pm.h(xp)) <= 1e-9);
    CHECK(xm <= c);
    CHECK(xp >= c);
  }
}

TEST_CASE("gamma_c vanishes identically for an even map") {
  PiecewiseMonotoneMap sq = make_piecewise_map_auto(
      [](double x) { return x * x; }, [](double x) { return 2.0 * x; },
      {0.0});
  const ScalarFunc g = [](double) { return 1.0; };
  const auto [l, r] = sq.brackets[0];
  for (int i = 1; i < 100; ++i) {
    const double x = l + (r - l) * i / 100.0;
    if (std::abs(x) < 1e-6) continue;
    CHECK(std::abs(gamma_c(sq, g, 0.0, x)) <= 1e-9);
  }
}

TEST_CASE("gamma_c is nonzero for the cubic map") {
  const PiecewiseMonotoneMap pm = cubic_map();
  const ScalarFunc g = [](double) { return 1.0; };
  CHECK(std::abs(gamma_c(pm, g, 0.0, 0.3)) > 1e-3);
}

TEST_CASE("check_coefficient_condition") {
  SUBCASE("equal coefficients are inadmissible") {
    const auto rep = check_coefficient_condition({1.0, 1.0}, 1e-9);
    CHECK_FALSE(rep.admissible);
    CHECK(rep.min_margin <= 1e-12);
  }
  SUBCASE("d=1 is admissible with margin 1") {
    const auto rep = check_coefficient_condition({1.0}, 0.5);
    CHECK(rep.admissible);
    CHECK(rep.min_margin == doctest::Approx(1.0));
  }
  SUBCASE("a=(1, sqrt 2) is admissible") {
    const auto rep = check_coefficient_condition({1.0, std::sqrt(2.0)}, 1e-3);
    CHECK(rep.admissible);
    // patterns: 1, 1/2, 3/2, 1/2 -> min 1/2
    CHECK(rep.min_margin == doctest::Approx(0.5).epsilon(1e-9));
  }
  SUBCASE("sign invariance") {
    const auto rp = check_coefficient_condition({0.7, 1.3, 2.1}, 1e-6);
    const auto rn = check_coefficient_condition({-0.7, -1.3, -2.1}, 1e-6);
    CHECK(rp.admissible == rn.admissible);
    CHECK(rp.min_margin == doctest::Approx(rn.min_margin).epsilon(1e-12));
  }
  SUBCASE("enumeration bound") {
    CHECK_THROWS_AS(check_coefficient_condition(std::vector<double>(21, 1.0),
                                                1e-3),
                    CapacityError);
  }
}

TEST_CASE("make_expsum_map records admissibility and bbar") {
  const ExpSumMap m = make_expsum_map({1.0, 2.0});
  CHECK(m.bbar == doctest::Approx(1.25).epsilon(1e-12));
  CHECK(m.admissible);
  const double x[2] = {0.5, -0.3};
  CHECK(m.eval({x, 2}) ==
        doctest::Approx(std::exp(0.5) + std::exp(-0.6)).epsilon(1e-12));
  CHECK_THROWS_AS(make_expsum_map({1.0, 0.0}), ParameterError);
}

TEST_CASE("make_piecewise_map rejects a fake critical point") {
  CHECK_THROWS_AS(
      make_piecewise_map([](double x) { return x * x; },
                         [](double x) { return 2.0 * x; }, {0.5},
                         {{0.0, 1.0}}),
      ParameterError);
}
