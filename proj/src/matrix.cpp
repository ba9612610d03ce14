#include "dbc/matrix.hpp"

#include <algorithm>

namespace dbc {

Matrix hconcat(std::span<const Matrix* const> blocks) {
  if (blocks.empty()) return {};
  const std::size_t rows = blocks.front()->rows();
  std::size_t cols = 0;
  for (const Matrix* b : blocks) {
    if (b->rows() != rows) throw ShapeError("hconcat: row counts differ");
    cols += b->cols();
  }
  Matrix out(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto dst = out.row(r).begin();
    for (const Matrix* b : blocks) dst = std::copy(b->row(r).begin(), b->row(r).end(), dst);
  }
  return out;
}

Matrix column_slice(const Matrix& src, std::size_t first, std::size_t count) {
  if (first + count > src.cols()) throw ShapeError("column_slice out of range");
  Matrix out(src.rows(), count);
  for (std::size_t r = 0; r < src.rows(); ++r) {
    auto row = src.row(r);
    std::copy(row.begin() + first, row.begin() + first + count, out.row(r).begin());
  }
  return out;
}

}  // namespace dbc
