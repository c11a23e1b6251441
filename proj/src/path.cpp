#include "difftrack/path.hpp"

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "difftrack/errors.hpp"

namespace difftrack {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

void write_grid_csv(const std::vector<double>& times,
                    const std::vector<double>& rows, int dim,
                    std::ostream& out) {
  out << 't';
  for (int j = 1; j <= dim; ++j) out << ",x" << j;
  out << '\n';
  for (std::size_t k = 0; k < times.size(); ++k) {
    out << format_double(times[k]);
    for (int j = 0; j < dim; ++j)
      out << ',' << format_double(rows[k * static_cast<std::size_t>(dim) + j]);
    out << '\n';
  }
}

}  // namespace

void write_path_csv(const Path& path, std::ostream& out) {
  write_grid_csv(path.times, path.states, path.dim, out);
}

void write_obs_csv(const ObsPath& obs, std::ostream& out) {
  write_grid_csv(obs.times, obs.values, obs.dim, out);
}

Path read_path_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw ParameterError("path CSV: empty input");
  int dim = 0;
  for (char c : line)
    if (c == ',') ++dim;
  if (dim < 1) throw ParameterError("path CSV: bad header: " + line);

  Path path;
  path.dim = dim;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    if (!std::getline(row, cell, ',')) break;
    path.times.push_back(std::stod(cell));
    for (int j = 0; j < dim; ++j) {
      if (!std::getline(row, cell, ','))
        throw ParameterError("path CSV: short row: " + line);
      path.states.push_back(std::stod(cell));
    }
  }
  if (path.times.size() < 2) throw ParameterError("path CSV: fewer than 2 rows");
  path.dt = path.times[1] - path.times[0];
  return path;
}

}  // namespace difftrack
