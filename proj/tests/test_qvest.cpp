#include <cmath>
#include <random>
#include <vector>

#include "difftrack/errors.hpp"
#include "difftrack/obsmaps.hpp"
#include "difftrack/qvest.hpp"
#include "difftrack/sdesim.hpp"
#include "doctest.h"

using namespace difftrack;

namespace {

ObsPath scale_obs(const ObsPath& y, double c) {
  ObsPath out = y;
  for (double& v : out.values) v *= c;
  return out;
}

}  // namespace

TEST_CASE("qv_rate of identity-observed BM is near one") {
  std::vector<double> est;
  for (int s = 0; s < 100; ++s) {
    const Path p = simulate_bm(1, 0.2, 1e-4, 100 + s);
    const ObsPath y = observe_scalar([](double x) { return x; }, p);
    est.push_back(qv_rate(y, 0, 0.1, 0.05));
  }
  double mean = 0.0;
  for (double v : est) mean += v;
  mean /= static_cast<double>(est.size());
  CHECK(std::abs(mean - 1.0) <= 0.1);
}

TEST_CASE("qv_rate of a constant path is exactly zero") {
  Path p = simulate_bm(1, 0.1, 1e-3, 1);
  for (double& v : p.states) v = 3.0;
  const ObsPath y = observe_scalar([](double x) { return x; }, p);
  CHECK(qv_rate(y, 0, 0.05, 0.02) == 0.0);
}

TEST_CASE("qv_rate scales quadratically, exactly") {
  const Path p = simulate_bm(1, 0.2, 1e-3, 17);
  const ObsPath y = observe_scalar([](double x) { return x; }, p);
  const double base = qv_rate(y, 0, 0.1, 0.03);
  const double scaled = qv_rate(scale_obs(y, 3.0), 0, 0.1, 0.03);
  CHECK(scaled == 9.0 * base);
}

TEST_CASE("qv_rate rejects a window shorter than two strides") {
  const Path p = simulate_bm(1, 0.1, 1e-3, 5);
  const ObsPath y = observe_scalar([](double x) { return x; }, p);
  CHECK_THROWS_AS(qv_rate(y, 0, 0.05, 1e-3, 1), ParameterError);
}

TEST_CASE("qv_rate against the hidden-state oracle for h = exp") {
  std::vector<double> relerr;
  for (int s = 0; s < 100; ++s) {
    const Path p = simulate_bm(1, 0.1, 1e-5, 300 + s);
    const ObsPath y = observe_scalar([](double x) { return std::exp(x); }, p);
    const double t = 0.05;
    const std::size_t k = static_cast<std::size_t>(t / p.dt);
    const double oracle = std::exp(2.0 * p.state(k));
    relerr.push_back(std::abs(qv_rate(y, 0, t, 0.02) - oracle) / oracle);
  }
  std::sort(relerr.begin(), relerr.end());
  CHECK(relerr[relerr.size() / 2] <= 0.25);
}

TEST_CASE("covariation_rate polarization identities") {
  const Path p = simulate_bm(1, 0.2, 1e-3, 23);
  const ObsPath y = observe_scalar([](double x) { return x; }, p);
  SUBCASE("self-covariation collapses to qv_rate exactly") {
    CHECK(covariation_rate(y, 0, y, 0, 0.1, 0.03) == qv_rate(y, 0, 0.1, 0.03));
  }
  SUBCASE("bilinearity in the second argument, exactly") {
    const ObsPath y2 = scale_obs(y, 2.0);
    CHECK(covariation_rate(y, 0, y2, 0, 0.1, 0.03) ==
          2.0 * qv_rate(y, 0, 0.1, 0.03));
  }
}

TEST_CASE("independent BM coordinates have near-zero covariation") {
  std::vector<double> est;
  for (int s = 0; s < 100; ++s) {
    const Path p = simulate_bm(2, 0.2, 1e-4, 700 + s);
    ObsPath y1, y2;
    y1.times = y2.times = p.times;
    y1.dim = y2.dim = 1;
    y1.dt = y2.dt = p.dt;
    for (std::size_t k = 0; k < p.size(); ++k) {
      y1.values.push_back(p.state(k, 0));
      y2.values.push_back(p.state(k, 1));
    }
    est.push_back(std::abs(covariation_rate(y1, 0, y2, 0, 0.1, 0.05)));
  }
  std::sort(est.begin(), est.end());
  CHECK(est[est.size() / 2] <= 0.1);
}

TEST_CASE("rate_matrix of 2-D identity observation approximates the identity") {
  std::vector<double> d11, d22, d12;
  for (int s = 0; s < 30; ++s) {
    const Path p = simulate_bm(2, 0.2, 1e-4, 900 + s);
    ObservationMap id = make_observation_map(
        2, 2, [](const Eigen::VectorXd& x) { return x; },
        [](const Eigen::VectorXd& x) {
          return Eigen::MatrixXd::Identity(x.size(), x.size());
        });
    const ObsPath y = observe(id, p);
    const RateSeries rs = rate_matrix(y, 0.05, 1, 500);
    const Eigen::MatrixXd& mid = rs.rates[rs.rates.size() / 2];
    d11.push_back(mid(0, 0));
    d22.push_back(mid(1, 1));
    d12.push_back(std::abs(mid(0, 1)));
    CHECK(mid(0, 1) == mid(1, 0));  // symmetric by construction
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  CHECK(std::abs(median(d11) - 1.0) <= 0.1);
  CHECK(std::abs(median(d22) - 1.0) <= 0.1);
  CHECK(median(d12) <= 0.1);
}

TEST_CASE("power_observable_oracle closed-form spot checks") {
  SUBCASE("d=1, a=1, x=0 gives one for every n") {
    const ExpSumMap m = make_expsum_map({1.0});
    const double x[1] = {0.0};
    for (int n = 1; n <= 8; ++n)
      CHECK(power_observable_oracle(m, {x, 1}, n) ==
            doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("two equal unit coefficients at the origin give two") {
    const ExpSumMap m = make_expsum_map({1.0, 1.0 + 1e-9}, 1e-12);
    const double x[2] = {0.0, 0.0};
    CHECK(power_observable_oracle(m, {x, 2}, 3) ==
          doctest::Approx(2.0).epsilon(1e-7));
  }
  SUBCASE("d=2, a=(1,2), n=2 hand value") {
    const ExpSumMap m = make_expsum_map({1.0, 2.0});
    const double x[2] = {0.5, -0.3};
    CHECK(power_observable_oracle(m, {x, 2}, 2) ==
          doctest::Approx(std::exp(1.0) + 4.0 * std::exp(-1.2))
              .epsilon(1e-13));
  }
  SUBCASE("n=1 is the map itself") {
    const ExpSumMap m = make_expsum_map({0.7, 1.9});
    const double x[2] = {0.4, -1.1};
    CHECK(power_observable_oracle(m, {x, 2}, 1) ==
          doctest::Approx(m.eval({x, 2})).epsilon(1e-14));
  }
}

TEST_CASE("power observable recursion matches the closed form") {
  // The ladder h_n = (1/(n-1)) sum_j d_j h . d_j h_{n-1} (n >= 2), with the
  // partials carried analytically: d_j h = a_j e^{a_j x_j} and
  // d_j h_n = n a_j^{2n-1} e^{n a_j x_j}. Agreement with the closed form is
  // an independent code path since the oracle never forms partials.
  std::mt19937_64 gen(42);
  std::uniform_real_distribution<double> unif(-2.0, 2.0);
  const std::vector<std::vector<double>> as = {
      {1.0}, {1.0, 2.0}, {0.6, 1.1, 1.7}, {0.5, 0.9, 1.4, 2.2}};
  for (const auto& a : as) {
    const ExpSumMap m = make_expsum_map(a, 1e-12);
    const std::size_t d = a.size();
    for (int trial = 0; trial < 25; ++trial) {
      std::vector<double> x(d);
      for (double& v : x) v = unif(gen);
      std::vector<double> dh(d), dprev(d);
      for (std::size_t j = 0; j < d; ++j) {
        dh[j] = a[j] * std::exp(a[j] * x[j]);
        dprev[j] = dh[j];  // n = 1 level
      }
      for (int n = 2; n <= 10; ++n) {
        double hn = 0.0;
        for (std::size_t j = 0; j < d; ++j) hn += dh[j] * dprev[j];
        hn /= static_cast<double>(n - 1);
        const double closed = power_observable_oracle(m, {x.data(), d}, n);
        CHECK(std::abs(hn - closed) <= 1e-12 * std::abs(closed));
        for (std::size_t j = 0; j < d; ++j)
          dprev[j] = static_cast<double>(n) *
                     std::pow(a[j], 2.0 * n - 1.0) *
                     std::exp(static_cast<double>(n) * a[j] * x[j]);
      }
    }
  }
}

TEST_CASE("power_observable_oracle overflows loudly") {
  const ExpSumMap m = make_expsum_map({1.0});
  const double x[1] = {800.0};
  CHECK_THROWS_AS(power_observable_oracle(m, {x, 1}, 2), RangeError);
  CHECK(std::isfinite(power_observable_log(m, {x, 1}, 2)));
}

TEST_CASE("default_qv_window dominates the step") {
  CHECK(default_qv_window(1e-4) >= 20.0 * 1e-4);
  CHECK(default_qv_window(1e-2) == doctest::Approx(0.2));
}
