#pragma once

// Data-parallel inner loops. Each kernel has an OpenMP version used by the
// library and a plain serial version kept as the reference in tests and
// benchmarks. Both compute every output element with the same operation
// order, so their results are bit-identical.

#include <cstddef>
#include <span>

namespace dbc::kernels {

struct DenseShape {
  std::size_t batch;
  std::size_t in;
  std::size_t out;
};

namespace serial {

/// y[n,o] = bias[o] + sum_k w[o,k] * x[n,k]. w is out x in, row-major.
void dense_forward(DenseShape s, std::span<const double> x, std::span<const double> w, std::span<const double> bias,
                   std::span<double> y);
/// dx[n,k] = sum_o dy[n,o] * w[o,k]
void dense_backward_input(DenseShape s, std::span<const double> dy, std::span<const double> w, std::span<double> dx);
/// dw[o,k] += sum_n dy[n,o] * x[n,k];  db[o] += sum_n dy[n,o]
void dense_backward_params(DenseShape s, std::span<const double> dy, std::span<const double> x, std::span<double> dw,
                           std::span<double> db);
/// d[i,j] = ||a_i - b_j||^2 for row sets a (na x dim) and b (nb x dim).
void pairwise_sq_dist(std::size_t na, std::size_t nb, std::size_t dim, std::span<const double> a,
                      std::span<const double> b, std::span<double> d);

}  // namespace serial

namespace parallel {

void dense_forward(DenseShape s, std::span<const double> x, std::span<const double> w, std::span<const double> bias,
                   std::span<double> y);
void dense_backward_input(DenseShape s, std::span<const double> dy, std::span<const double> w, std::span<double> dx);
void dense_backward_params(DenseShape s, std::span<const double> dy, std::span<const double> x, std::span<double> dw,
                           std::span<double> db);
void pairwise_sq_dist(std::size_t na, std::size_t nb, std::size_t dim, std::span<const double> a,
                      std::span<const double> b, std::span<double> d);

}  // namespace parallel

}  // namespace dbc::kernels
