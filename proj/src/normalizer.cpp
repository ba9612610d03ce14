#include "dbc/normalizer.hpp"

#include <algorithm>
#include <limits>

namespace dbc {

Normalizer Normalizer::fit(const Matrix& values) {
  if (values.rows() == 0) throw ShapeError("cannot fit a normalizer to an empty set");
  Normalizer n;
  n.min.assign(values.cols(), std::numeric_limits<double>::infinity());
  n.max.assign(values.cols(), -std::numeric_limits<double>::infinity());
  for (std::size_t r = 0; r < values.rows(); ++r)
    for (std::size_t c = 0; c < values.cols(); ++c) {
      n.min[c] = std::min(n.min[c], values(r, c));
      n.max[c] = std::max(n.max[c], values(r, c));
    }
  // A constant dimension maps to -1.
  for (std::size_t c = 0; c < values.cols(); ++c)
    if (n.max[c] - n.min[c] < 1e-12) n.max[c] = n.min[c] + 1.0;
  return n;
}

Normalizer Normalizer::identity(std::size_t dim) {
  Normalizer n;
  n.min.assign(dim, -1.0);
  n.max.assign(dim, 1.0);
  return n;
}

void Normalizer::normalize_into(std::span<const double> raw, std::span<double> out) const {
  if (raw.size() != dim() || out.size() != dim()) throw ShapeError("normalizer dimension mismatch");
  for (std::size_t d = 0; d < dim(); ++d) out[d] = (raw[d] - min[d]) / scale(d) - 1.0;
}

void Normalizer::denormalize_into(std::span<const double> norm, std::span<double> out) const {
  if (norm.size() != dim() || out.size() != dim()) throw ShapeError("normalizer dimension mismatch");
  for (std::size_t d = 0; d < dim(); ++d) out[d] = (norm[d] + 1.0) * scale(d) + min[d];
}

Matrix Normalizer::normalize(const Matrix& raw) const {
  Matrix out(raw.rows(), raw.cols());
  for (std::size_t r = 0; r < raw.rows(); ++r) normalize_into(raw.row(r), out.row(r));
  return out;
}

Matrix Normalizer::denormalize(const Matrix& norm) const {
  Matrix out(norm.rows(), norm.cols());
  for (std::size_t r = 0; r < norm.rows(); ++r) denormalize_into(norm.row(r), out.row(r));
  return out;
}

}  // namespace dbc
