#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace difftrack {

/// SplitMix64 pseudo-random stream. One instance per simulated path; no
/// global state, so replications can run concurrently. The generator (and
/// the Box-Muller transform below) is fixed by the repo so that a given
/// (seed, dt, t_end) always reproduces the same path.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  /// Uniform double in the open interval (0,1).
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53 + 0x1.0p-54;
  }

  /// Standard normal via the trigonometric Box-Muller transform. Consumes
  /// exactly two uniforms per pair of variates.
  double next_gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = next_unit();
    const double u2 = next_unit();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

/// Per-replication seed derived deterministically from a master seed, so
/// Monte Carlo cells can run in parallel with independent streams.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  SplitMix64 g(master ^ (0xA0761D6478BD642Full * (index + 1)));
  g.next_u64();
  return g.next_u64();
}

}  // namespace difftrack
