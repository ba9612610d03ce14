#include "dbc/kernels.hpp"

#include <algorithm>
#include <vector>

namespace dbc::kernels {
namespace {

// Row bodies shared by the serial and OpenMP drivers.

inline void transpose(const DenseShape& s, std::span<const double> w, std::vector<double>& wt) {
  wt.resize(s.in * s.out);
  for (std::size_t o = 0; o < s.out; ++o)
    for (std::size_t k = 0; k < s.in; ++k) wt[k * s.out + o] = w[o * s.in + k];
}

// Rows are processed in tiles of kTile so each weight row is loaded once per
// tile. Every output element still accumulates over k in ascending order.
constexpr std::size_t kTile = 4;

inline void forward_rows(const DenseShape& s, std::size_t rows, const double* x, const double* wt, const double* bias,
                         double* y) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < s.out; ++o) y[r * s.out + o] = bias[o];
  if (rows == kTile) {
    double* y0 = y;
    double* y1 = y + s.out;
    double* y2 = y + 2 * s.out;
    double* y3 = y + 3 * s.out;
    for (std::size_t k = 0; k < s.in; ++k) {
      const double x0 = x[k], x1 = x[s.in + k], x2 = x[2 * s.in + k], x3 = x[3 * s.in + k];
      const double* wrow = wt + k * s.out;
      for (std::size_t o = 0; o < s.out; ++o) {
        const double wv = wrow[o];
        y0[o] += x0 * wv;
        y1[o] += x1 * wv;
        y2[o] += x2 * wv;
        y3[o] += x3 * wv;
      }
    }
    return;
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < s.in; ++k) {
      const double xv = x[r * s.in + k];
      const double* wrow = wt + k * s.out;
      double* yr = y + r * s.out;
      for (std::size_t o = 0; o < s.out; ++o) yr[o] += xv * wrow[o];
    }
}

inline void backward_input_rows(const DenseShape& s, std::size_t rows, const double* dy, const double* w, double* dx) {
  for (std::size_t i = 0; i < rows * s.in; ++i) dx[i] = 0.0;
  if (rows == kTile) {
    double* d0 = dx;
    double* d1 = dx + s.in;
    double* d2 = dx + 2 * s.in;
    double* d3 = dx + 3 * s.in;
    for (std::size_t o = 0; o < s.out; ++o) {
      const double g0 = dy[o], g1 = dy[s.out + o], g2 = dy[2 * s.out + o], g3 = dy[3 * s.out + o];
      const double* wrow = w + o * s.in;
      for (std::size_t k = 0; k < s.in; ++k) {
        const double wv = wrow[k];
        d0[k] += g0 * wv;
        d1[k] += g1 * wv;
        d2[k] += g2 * wv;
        d3[k] += g3 * wv;
      }
    }
    return;
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < s.out; ++o) {
      const double g = dy[r * s.out + o];
      const double* wrow = w + o * s.in;
      double* dr = dx + r * s.in;
      for (std::size_t k = 0; k < s.in; ++k) dr[k] += g * wrow[k];
    }
}

inline std::size_t tiles(std::size_t batch) { return (batch + kTile - 1) / kTile; }

inline void backward_params_row(const DenseShape& s, std::size_t o, const double* dy, const double* x, double* dw,
                                double* db) {
  double* dwrow = dw + o * s.in;
  double bsum = 0.0;
  for (std::size_t n = 0; n < s.batch; ++n) {
    const double g = dy[n * s.out + o];
    bsum += g;
    const double* xrow = x + n * s.in;
    for (std::size_t k = 0; k < s.in; ++k) dwrow[k] += g * xrow[k];
  }
  db[o] += bsum;
}

inline void sq_dist_row(std::size_t nb, std::size_t dim, const double* a, const double* b, double* d) {
  for (std::size_t j = 0; j < nb; ++j) {
    const double* bj = b + j * dim;
    double acc = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double diff = a[c] - bj[c];
      acc += diff * diff;
    }
    d[j] = acc;
  }
}

}  // namespace

namespace serial {

void dense_forward(DenseShape s, std::span<const double> x, std::span<const double> w, std::span<const double> bias,
                   std::span<double> y) {
  std::vector<double> wt;
  transpose(s, w, wt);
  for (std::size_t t = 0; t < tiles(s.batch); ++t) {
    const std::size_t n = t * kTile;
    forward_rows(s, std::min(kTile, s.batch - n), x.data() + n * s.in, wt.data(), bias.data(), y.data() + n * s.out);
  }
}

void dense_backward_input(DenseShape s, std::span<const double> dy, std::span<const double> w, std::span<double> dx) {
  for (std::size_t t = 0; t < tiles(s.batch); ++t) {
    const std::size_t n = t * kTile;
    backward_input_rows(s, std::min(kTile, s.batch - n), dy.data() + n * s.out, w.data(), dx.data() + n * s.in);
  }
}

void dense_backward_params(DenseShape s, std::span<const double> dy, std::span<const double> x, std::span<double> dw,
                           std::span<double> db) {
  for (std::size_t o = 0; o < s.out; ++o) backward_params_row(s, o, dy.data(), x.data(), dw.data(), db.data());
}

void pairwise_sq_dist(std::size_t na, std::size_t nb, std::size_t dim, std::span<const double> a,
                      std::span<const double> b, std::span<double> d) {
  for (std::size_t i = 0; i < na; ++i) sq_dist_row(nb, dim, a.data() + i * dim, b.data(), d.data() + i * nb);
}

}  // namespace serial

namespace parallel {

// Small problems are not worth a parallel region.
constexpr std::size_t kMinParallelWork = 1 << 14;

void dense_forward(DenseShape s, std::span<const double> x, std::span<const double> w, std::span<const double> bias,
                   std::span<double> y) {
  std::vector<double> wt;
  transpose(s, w, wt);
  const auto count = static_cast<std::ptrdiff_t>(tiles(s.batch));
#pragma omp parallel for schedule(static) if (s.batch * s.in * s.out > kMinParallelWork)
  for (std::ptrdiff_t t = 0; t < count; ++t) {
    const auto n = static_cast<std::size_t>(t) * kTile;
    forward_rows(s, std::min(kTile, s.batch - n), x.data() + n * s.in, wt.data(), bias.data(), y.data() + n * s.out);
  }
}

void dense_backward_input(DenseShape s, std::span<const double> dy, std::span<const double> w, std::span<double> dx) {
  const auto count = static_cast<std::ptrdiff_t>(tiles(s.batch));
#pragma omp parallel for schedule(static) if (s.batch * s.in * s.out > kMinParallelWork)
  for (std::ptrdiff_t t = 0; t < count; ++t) {
    const auto n = static_cast<std::size_t>(t) * kTile;
    backward_input_rows(s, std::min(kTile, s.batch - n), dy.data() + n * s.out, w.data(), dx.data() + n * s.in);
  }
}

void dense_backward_params(DenseShape s, std::span<const double> dy, std::span<const double> x, std::span<double> dw,
                           std::span<double> db) {
  const auto out = static_cast<std::ptrdiff_t>(s.out);
#pragma omp parallel for schedule(static) if (s.batch * s.in * s.out > kMinParallelWork)
  for (std::ptrdiff_t o = 0; o < out; ++o) backward_params_row(s, o, dy.data(), x.data(), dw.data(), db.data());
}

void pairwise_sq_dist(std::size_t na, std::size_t nb, std::size_t dim, std::span<const double> a,
                      std::span<const double> b, std::span<double> d) {
  const auto rows = static_cast<std::ptrdiff_t>(na);
#pragma omp parallel for schedule(static) if (na * nb * dim > kMinParallelWork)
  for (std::ptrdiff_t i = 0; i < rows; ++i) sq_dist_row(nb, dim, a.data() + i * dim, b.data(), d.data() + i * nb);
}

}  // namespace parallel

}  // namespace dbc::kernels
