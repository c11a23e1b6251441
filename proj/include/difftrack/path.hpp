#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace difftrack {

/// A discretized sample path on a uniform time grid. States are stored
/// row-major, one R^d point per grid time.
struct Path {
  std::vector<double> times;
  std::vector<double> states;  // size() == times.size() * dim
  int dim = 1;
  double dt = 0.0;
  std::uint64_t seed = 0;

  std::size_t size() const { return times.size(); }

  double state(std::size_t k, int j = 0) const {
    return states[k * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)];
  }

  std::span<const double> state_row(std::size_t k) const {
    return {states.data() + k * static_cast<std::size_t>(dim),
            static_cast<std::size_t>(dim)};
  }
};

/// An observation path Y_k = h(X_k) on the grid of the source path. Hidden
/// states are deliberately not carried along.
struct ObsPath {
  std::vector<double> times;
  std::vector<double> values;  // row-major, dim values per time
  int dim = 1;
  double dt = 0.0;

  std::size_t size() const { return times.size(); }

  double value(std::size_t k, int j = 0) const {
    return values[k * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)];
  }
};

/// CSV with header `t,x1,...,xd`, one row per grid point, 17 significant
/// digits (lossless for doubles).
void write_path_csv(const Path& path, std::ostream& out);
void write_obs_csv(const ObsPath& obs, std::ostream& out);
Path read_path_csv(std::istream& in);

/// Formats a double with 17 significant digits.
std::string format_double(double v);

}  // namespace difftrack
