#include <cmath>
#include <random>
#include <vector>

#include "difftrack/errors.hpp"
#include "difftrack/obsmaps.hpp"
#include "difftrack/qvest.hpp"
#include "difftrack/sdesim.hpp"
#include "difftrack/trackers.hpp"
#include "doctest.h"

using namespace difftrack;

namespace {

SdeSpec1D unit_noise_spec(double x0) {
  SdeSpec1D spec;
  spec.drift = [](double) { return 0.0; };
  spec.diffusion = [](double) { return 1.0; };
  spec.diffusion_prime = [](double) { return 0.0; };
  spec.g_min = 0.5;
  spec.g_max = 2.0;
  spec.gprime_max = 1.0;
  spec.x0 = x0;
  return spec;
}

PiecewiseMonotoneMap cubic_map() {
  return make_piecewise_map_auto(
      [](double x) { return x * x + 0.5 * x * x * x; },
      [](double x) { return 2.0 * x + 1.5 * x * x; }, {-4.0 / 3.0, 0.0});
}

}  // namespace

TEST_CASE("invert_2d_example on hand values") {
  SUBCASE("symmetric point") {
    const auto r = invert_2d_example(0.0, 2.0);
    CHECK(r.consistent);
    CHECK(r.x1 == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(r.x2 == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("(1, 0) forward then back") {
    const double y1 = std::exp(1.0) - 1.0;
    const double y2 = std::exp(2.0) + 1.0;
    const auto r = invert_2d_example(y1, y2);
    CHECK(r.consistent);
    CHECK(r.x1 == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(r.x2 == doctest::Approx(0.0).epsilon(1e-10));
  }
  SUBCASE("(0, 1) satisfies the domain guard but fails the round trip") {
    const auto r = invert_2d_example(0.0, 1.0);
    CHECK_FALSE(r.consistent);
    CHECK(r.roundtrip_rel_err > 1e-6);
  }
  SUBCASE("domain violation throws") {
    CHECK_THROWS_AS(invert_2d_example(2.0, 1.0), RangeError);
  }
}

TEST_CASE("invert_2d_example round trip on random states") {
  std::mt19937_64 gen(7);
  std::uniform_real_distribution<double> unif(-3.0, 3.0);
  for (int t = 0; t < 2000; ++t) {
    const double x1 = unif(gen), x2 = unif(gen);
    const double y1 = std::exp(x1) - std::exp(x2);
    const double y2 = std::exp(2.0 * x1) + std::exp(2.0 * x2);
    const auto r = invert_2d_example(y1, y2);
    CHECK(r.consistent);
    CHECK(std::abs(r.x1 - x1) <= 1e-10 * (1.0 + std::abs(x1)));
    CHECK(std::abs(r.x2 - x2) <= 1e-10 * (1.0 + std::abs(x2)));
  }
}

TEST_CASE("peel_levels on constructed series") {
  SUBCASE("single geometric series") {
    const ExpSumMap m = make_expsum_map({1.0});
    std::vector<double> series(30);
    for (int n = 1; n <= 30; ++n)
      series[n - 1] = std::pow(3.0, n);
    const PeelResult r = peel_levels(m, series, 1e-8);
    REQUIRE(r.levels.size() == 1);
    CHECK(r.levels[0].w == doctest::Approx(3.0).epsilon(1e-10));
    CHECK(r.levels[0].b == doctest::Approx(1.0).epsilon(1e-10));
  }
  SUBCASE("coincident values merge into one level") {
    const ExpSumMap m = make_expsum_map({1.0, 2.0});
    std::vector<double> series(40);
    for (int n = 1; n <= 40; ++n)
      series[n - 1] = 1.25 * std::pow(5.0, n);
    const PeelResult r = peel_levels(m, series, 1e-8);
    REQUIRE(r.levels.size() == 1);
    CHECK(r.levels[0].w == doctest::Approx(5.0).epsilon(1e-10));
    CHECK(r.levels[0].b == doctest::Approx(1.25).epsilon(1e-10));
  }
  SUBCASE("two distinct levels separate") {
    const ExpSumMap m = make_expsum_map({1.0, 2.0});
    std::vector<double> series(60);
    for (int n = 1; n <= 60; ++n)
      series[n - 1] = std::pow(5.0, n) + 0.25 * std::pow(3.0, n);
    const PeelResult r = peel_levels(m, series, 1e-6);
    REQUIRE(r.levels.size() == 2);
    CHECK(r.levels[0].w == doctest::Approx(5.0).epsilon(1e-4));
    CHECK(r.levels[0].b == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(r.levels[1].w == doctest::Approx(3.0).epsilon(1e-4));
    CHECK(r.levels[1].b == doctest::Approx(0.25).epsilon(1e-4));
  }
}

TEST_CASE("peel conservation: masses exhaust bbar") {
  const ExpSumMap m = make_expsum_map({0.4, 0.5, 0.6, 0.7});
  std::mt19937_64 gen(99);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> x(4);
    for (double& v : x) v = unif(gen);
    const auto series = expsum_log_series(m, {x.data(), 4}, 60);
    const PeelResult r = peel_levels_log(series, m.bbar, 1e-8);
    double total = 0.0;
    double prev = std::numeric_limits<double>::infinity();
    for (const PeelLevel& lv : r.levels) {
      CHECK(lv.w < prev);  // strictly decreasing
      prev = lv.w;
      total += lv.b;
    }
    CHECK(std::abs(total - m.bbar) <= 1e-6 * m.bbar);
  }
}

TEST_CASE("beta_inverse enumerates exactly") {
  const std::vector<double> a = {1.0, std::sqrt(2.0), std::sqrt(3.0)};
  const ExpSumMap m = make_expsum_map(a);
  SUBCASE("zero maps to the empty indicator") {
    CHECK(beta_inverse(m, 0.0, 1e-9) == std::vector<int>{0, 0, 0});
  }
  SUBCASE("bbar maps to the full indicator") {
    CHECK(beta_inverse(m, m.bbar, 1e-9) == std::vector<int>{1, 1, 1});
  }
  SUBCASE("hand-picked subset") {
    CHECK(beta_inverse(m, 1.0 + 1.0 / 3.0, 1e-9) ==
          std::vector<int>{1, 0, 1});
  }
  SUBCASE("all 8 subset sums invert exactly") {
    for (int mask = 0; mask < 8; ++mask) {
      double b = 0.0;
      std::vector<int> want(3);
      for (int j = 0; j < 3; ++j)
        if (mask & (1 << j)) {
          want[j] = 1;
          b += 1.0 / (a[j] * a[j]);
        }
      CHECK(beta_inverse(m, b, 1e-9) == want);
    }
  }
  SUBCASE("an unmatchable value throws") {
    CHECK_THROWS_AS(beta_inverse(m, 0.123456, 1e-9), ModelError);
  }
}

TEST_CASE("reconstruct_expsum identity on random states") {
  const std::vector<std::vector<double>> as = {
      {1.0}, {0.5, 0.6}, {0.45, 0.55, 0.65}, {0.4, 0.5, 0.6, 0.7}};
  std::mt19937_64 gen(2026);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  for (const auto& a : as) {
    const ExpSumMap m = make_expsum_map(a);
    REQUIRE(m.margin > 1e-3);
    for (int t = 0; t < 10; ++t) {
      std::vector<double> x(a.size());
      for (double& v : x) v = unif(gen);
      const auto series = expsum_log_series(m, {x.data(), x.size()}, 80);
      const auto xe = reconstruct_expsum(m, series, 1e-8);
      for (std::size_t j = 0; j < x.size(); ++j)
        CHECK(std::abs(xe[j] - x[j]) <= 1e-4);
    }
  }
}

TEST_CASE("reconstruct_expsum recovers a constructed level coincidence") {
  // Choose x so the first two coordinates share one level:
  // a1^2 e^{a1 x1} = a2^2 e^{a2 x2}.
  const std::vector<double> a = {0.5, 0.8, 1.3};
  const ExpSumMap m = make_expsum_map(a);
  std::vector<double> x = {0.7, 0.0, -0.9};
  x[1] = (2.0 * std::log(a[0] / a[1]) + a[0] * x[0]) / a[1];
  const auto series = expsum_log_series(m, {x.data(), 3}, 80);
  const auto xe = reconstruct_expsum(m, series, 1e-8);
  for (int j = 0; j < 3; ++j)
    CHECK(std::abs(xe[static_cast<std::size_t>(j)] -
                   x[static_cast<std::size_t>(j)]) <= 1e-6);
}

TEST_CASE("track_piecewise in a monotone-only regime matches the inverse") {
  const PiecewiseMonotoneMap pm = cubic_map();
  const SdeSpec1D spec = unit_noise_spec(1.5);
  const Path hidden = simulate_sde_1d(spec, 0.05, 1e-5, 31);
  const ObsPath obs = observe_scalar(pm.h, hidden);
  const TrackResult tr = track_piecewise(pm, spec, obs, 1.5);
  CHECK_FALSE(tr.ambiguous_from.has_value());
  double sup = 0.0;
  for (std::size_t k = 0; k < tr.times.size(); ++k)
    sup = std::max(sup, std::abs(tr.estimates[k] - hidden.state(k)));
  CHECK(sup <= 1e-6);
  for (std::size_t k = 0; k < tr.times.size(); ++k)
    CHECK(std::abs(pm.h(tr.estimates[k]) - obs.value(k)) <=
          1e-9 * (1.0 + std::abs(obs.value(k))));
}

TEST_CASE("track_piecewise rejects an inconsistent start") {
  const PiecewiseMonotoneMap pm = cubic_map();
  const SdeSpec1D spec = unit_noise_spec(1.0);
  const Path hidden = simulate_sde_1d(spec, 0.01, 1e-4, 3);
  const ObsPath obs = observe_scalar(pm.h, hidden);
  CHECK_THROWS_AS(track_piecewise(pm, spec, obs, -3.0), ParameterError);
}

TEST_CASE("even map: a crossing of the critical point ends in ambiguity") {
  PiecewiseMonotoneMap sq = make_piecewise_map_auto(
      [](double x) { return x * x; }, [](double x) { return 2.0 * x; },
      {0.0}, 6.0);
  const SdeSpec1D spec = unit_noise_spec(1.0);
  int crossed = 0, ambiguous = 0;
  for (int s = 0; s < 10 && crossed < 3; ++s) {
    const Path hidden = simulate_sde_1d(spec, 1.0, 1e-4, 4200 + s);
    bool does_cross = false;
    for (std::size_t k = 0; k < hidden.size(); ++k)
      if (hidden.state(k) < 0.0) {
        does_cross = true;
        break;
      }
    if (!does_cross) continue;
    ++crossed;
    const ObsPath obs = observe_scalar(sq.h, hidden);
    const TrackResult tr = track_piecewise(sq, spec, obs, 1.0);
    if (tr.ambiguous_from.has_value()) ++ambiguous;
  }
  REQUIRE(crossed >= 1);
  CHECK(ambiguous == crossed);
}

TEST_CASE("track_general reduces a state-dependent diffusion to unit noise") {
  const PiecewiseMonotoneMap pm = cubic_map();
  SdeSpec1D spec;
  spec.drift = [](double) { return 0.0; };
  spec.diffusion = [](double x) { return 2.0 + std::sin(x); };
  spec.diffusion_prime = [](double x) { return std::cos(x); };
  spec.g_min = 1.0;
  spec.g_max = 3.0;
  spec.gprime_max = 1.0;
  spec.x0 = 1.0;
  const Path hidden = simulate_sde_1d(spec, 0.02, 1e-5, 77);
  const ObsPath obs = observe_scalar(pm.h, hidden);
  const TrackResult tr = track_general(pm, spec, obs, 1.0);
  double sup = 0.0;
  for (std::size_t k = 0; k < tr.times.size(); ++k)
    if (std::isfinite(tr.estimates[k]))
      sup = std::max(sup, std::abs(tr.estimates[k] - hidden.state(k)));
  CHECK(sup <= 1e-5);
}
