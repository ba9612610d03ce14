#pragma once

#include <span>
#include <vector>

#include "dbc/matrix.hpp"

namespace dbc {

/// Per-dimension affine map of [min, max] onto [-1, 1].
struct Normalizer {
  std::vector<double> min;
  std::vector<double> max;

  static Normalizer fit(const Matrix& values);
  static Normalizer identity(std::size_t dim);

  std::size_t dim() const { return min.size(); }
  double scale(std::size_t d) const { return 0.5 * (max[d] - min[d]); }
  void normalize_into(std::span<const double> raw, std::span<double> out) const;
  void denormalize_into(std::span<const double> norm, std::span<double> out) const;
  Matrix normalize(const Matrix& raw) const;
  Matrix denormalize(const Matrix& norm) const;

  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

}  // namespace dbc
