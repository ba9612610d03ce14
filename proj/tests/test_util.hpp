#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "dbc/matrix.hpp"
#include "dbc/rng.hpp"

namespace testutil {

inline dbc::Matrix random_matrix(std::size_t rows, std::size_t cols, dbc::Rng& rng, double lo = -1.0, double hi = 1.0) {
  dbc::Matrix m(rows, cols);
  for (double& v : m.flat()) v = rng.uniform(lo, hi);
  return m;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-6, std::abs(a), std::abs(b)}); }

// Fresh scratch directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("dbc_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace testutil
