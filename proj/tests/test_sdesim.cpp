#include <cmath>
#include <vector>

#include "difftrack/errors.hpp"
#include "difftrack/sdesim.hpp"
#include "doctest.h"

using namespace difftrack;

namespace {

SdeSpec1D unit_noise_spec(double x0 = 0.0) {
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

}  // namespace

TEST_CASE("simulate_bm is deterministic given the seed") {
  const Path a = simulate_bm(1, 1.0, 0.01, 7);
  const Path b = simulate_bm(1, 1.0, 0.01, 7);
  REQUIRE(a.size() == b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(a.times[k] == b.times[k]);
    CHECK(a.state(k) == b.state(k));  // bit identical
  }
}

TEST_CASE("simulate_bm starts at the origin on a uniform grid") {
  const Path p = simulate_bm(3, 0.5, 0.01, 11);
  for (int j = 0; j < 3; ++j) CHECK(p.state(0, j) == 0.0);
  CHECK(p.times[0] == 0.0);
  for (std::size_t k = 0; k + 1 < p.size(); ++k)
    CHECK(p.times[k + 1] - p.times[k] ==
          doctest::Approx(0.01).epsilon(1e-9));
}

TEST_CASE("simulate_bm terminal variance matches t_end") {
  const int n = 10000;
  const double t_end = 1.0;
  double sum = 0.0, sumsq = 0.0;
  for (int s = 0; s < n; ++s) {
    const Path p = simulate_bm(1, t_end, 0.01, 1000 + s);
    const double x = p.state(p.size() - 1);
    sum += x;
    sumsq += x * x;
  }
  const double var = (sumsq - sum * sum / n) / (n - 1);
  // Var of the sample variance of N(0,t): 2 t^2 / (n-1).
  const double se = std::sqrt(2.0 * t_end * t_end / (n - 1));
  CHECK(std::abs(var - t_end) <= 3.0 * se);
}

TEST_CASE("simulate_bm rejects bad parameters") {
  CHECK_THROWS_AS(simulate_bm(1, 1.0, -0.01, 1), ParameterError);
  CHECK_THROWS_AS(simulate_bm(1, 0.001, 0.01, 1), ParameterError);
  CHECK_THROWS_AS(simulate_bm(0, 1.0, 0.01, 1), ParameterError);
}

TEST_CASE("simulate_sde_1d honours the initial condition and the seed") {
  const SdeSpec1D spec = unit_noise_spec(5.0);
  const Path a = simulate_sde_1d(spec, 1.0, 0.001, 3);
  CHECK(a.state(0) == 5.0);
  const Path b = simulate_sde_1d(spec, 1.0, 0.001, 3);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(a.state(k) == b.state(k));
}

TEST_CASE("Ornstein-Uhlenbeck moments match the stationary law") {
  SdeSpec1D spec = unit_noise_spec(0.0);
  spec.drift = [](double x) { return -x; };
  const int n = 1000;
  double sum = 0.0, sumsq = 0.0;
  for (int s = 0; s < n; ++s) {
    const Path p = simulate_sde_1d(spec, 10.0, 0.01, 500 + s);
    const double x = p.state(p.size() - 1);
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  const double var = (sumsq - sum * sum / n) / (n - 1);
  // Stationary law N(0, 1/2): se(mean) = sqrt(var/n), se(var) ~ var
  // sqrt(2/(n-1)).
  CHECK(std::abs(mean) <= 3.0 * std::sqrt(0.5 / n));
  CHECK(std::abs(var - 0.5) <= 3.0 * 0.5 * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("simulate_sde_1d reports a violated diffusion bound") {
  SdeSpec1D spec = unit_noise_spec(0.0);
  spec.diffusion = [](double x) { return 1.0 + 10.0 * x * x; };
  spec.diffusion_prime = [](double x) { return 20.0 * x; };
  CHECK_THROWS_AS(simulate_sde_1d(spec, 1.0, 0.001, 9), ModelError);
}

TEST_CASE("lamperti_transform closed forms") {
  SUBCASE("unit diffusion is the identity") {
    const SdeSpec1D spec = unit_noise_spec();
    CHECK(lamperti_transform(spec, 1.7) == doctest::Approx(1.7).epsilon(1e-10));
    CHECK(lamperti_transform(spec, -0.3) ==
          doctest::Approx(-0.3).epsilon(1e-10));
  }
  SUBCASE("constant diffusion rescales") {
    SdeSpec1D spec = unit_noise_spec();
    spec.diffusion = [](double) { return 2.0; };
    CHECK(lamperti_transform(spec, 3.0) ==
          doctest::Approx(1.5).epsilon(1e-10));
  }
  SUBCASE("exponential diffusion has a closed-form integral") {
    SdeSpec1D spec;
    spec.drift = [](double) { return 0.0; };
    spec.diffusion = [](double x) { return std::exp(x); };
    spec.diffusion_prime = [](double x) { return std::exp(x); };
    spec.g_min = 1e-3;
    spec.g_max = 1e3;
    spec.gprime_max = 1e3;
    CHECK(lamperti_transform(spec, 1.0) ==
          doctest::Approx(1.0 - std::exp(-1.0)).epsilon(1e-10));
  }
}

TEST_CASE("Lamperti round trip and monotonicity") {
  SdeSpec1D spec = unit_noise_spec();
  spec.diffusion = [](double x) { return 2.0 + std::sin(x); };
  spec.diffusion_prime = [](double x) { return std::cos(x); };
  spec.g_min = 1.0;
  spec.g_max = 3.0;
  spec.gprime_max = 1.0;
  double prev = -1e300;
  for (double x = -3.0; x <= 3.0; x += 0.25) {
    const double y = lamperti_transform(spec, x);
    CHECK(y > prev);
    prev = y;
    CHECK(lamperti_inverse(spec, y) == doctest::Approx(x).epsilon(1e-10));
  }
}

TEST_CASE("lamperti_drift closed forms") {
  SUBCASE("driftless unit noise stays driftless") {
    const SdeSpec1D spec = unit_noise_spec();
    CHECK(lamperti_drift(spec, 0.4) == doctest::Approx(0.0));
  }
  SUBCASE("unit diffusion passes the drift through") {
    SdeSpec1D spec = unit_noise_spec();
    spec.drift = [](double) { return 1.0; };
    CHECK(lamperti_drift(spec, -2.0) == doctest::Approx(1.0).epsilon(1e-9));
  }
  SUBCASE("exponential diffusion: b = -g'/(2 g) at the preimage") {
    SdeSpec1D spec;
    spec.drift = [](double) { return 0.0; };
    spec.diffusion = [](double x) { return std::exp(x); };
    spec.diffusion_prime = [](double x) { return std::exp(x); };
    spec.g_min = 1e-3;
    spec.g_max = 1e3;
    spec.gprime_max = 1e3;
    const double x = 0.3;
    const double y = lamperti_transform(spec, x);
    CHECK(lamperti_drift(spec, y) == doctest::Approx(-0.5).epsilon(1e-8));
  }
}

TEST_CASE("empirical quadratic variation error shrinks under dt refinement") {
  // For unit-noise BM the QV over [0,1] is 1; the error roughly halves when
  // dt is quartered. Checked in Monte Carlo aggregate.
  auto median_err = [](double dt) {
    std::vector<double> errs;
    for (int s = 0; s < 40; ++s) {
      const Path p = simulate_bm(1, 1.0, dt, 40 + s);
      double qv = 0.0;
      for (std::size_t k = 0; k + 1 < p.size(); ++k) {
        const double d = p.state(k + 1) - p.state(k);
        qv += d * d;
      }
      errs.push_back(std::abs(qv - 1.0));
    }
    std::sort(errs.begin(), errs.end());
    return errs[errs.size() / 2];
  };
  const double e1 = median_err(1e-2);
  const double e2 = median_err(2.5e-3);
  const double e3 = median_err(6.25e-4);
  CHECK(e2 < e1);
  CHECK(e3 < e2);
}

TEST_CASE("LampertiTable agrees with the direct transform") {
  SdeSpec1D spec = unit_noise_spec();
  spec.diffusion = [](double x) { return 2.0 + std::sin(x); };
  spec.diffusion_prime = [](double x) { return std::cos(x); };
  spec.g_min = 1.0;
  spec.g_max = 3.0;
  spec.gprime_max = 1.0;
  const LampertiTable table(spec, -4.0, 4.0);
  for (double x = -3.9; x <= 3.9; x += 0.37) {
    const double exact = lamperti_transform(spec, x);
    CHECK(table.phi(x) == doctest::Approx(exact).epsilon(1e-8));
    CHECK(table.inverse(table.phi(x)) == doctest::Approx(x).epsilon(1e-8));
  }
}
