#include <doctest.h>

#include "dbc/kernels.hpp"
#include "test_util.hpp"

using namespace dbc;
namespace k = dbc::kernels;

TEST_CASE("dense kernels: serial and parallel agree bit for bit") {
  Rng rng(11);
  for (auto s : {k::DenseShape{1, 3, 2}, k::DenseShape{7, 5, 9}, k::DenseShape{300, 64, 128}}) {
    const Matrix x = testutil::random_matrix(s.batch, s.in, rng);
    const Matrix w = testutil::random_matrix(s.out, s.in, rng);
    const Matrix b = testutil::random_matrix(1, s.out, rng);
    const Matrix dy = testutil::random_matrix(s.batch, s.out, rng);

    Matrix y1(s.batch, s.out), y2(s.batch, s.out);
    k::serial::dense_forward(s, x.flat(), w.flat(), b.flat(), y1.flat());
    k::parallel::dense_forward(s, x.flat(), w.flat(), b.flat(), y2.flat());
    CHECK(y1 == y2);

    // Scalar-loop oracle with the same summation order.
    for (std::size_t n = 0; n < s.batch; ++n)
      for (std::size_t o = 0; o < s.out; ++o) {
        double acc = b(0, o);
        for (std::size_t i = 0; i < s.in; ++i) acc += x(n, i) * w(o, i);
        CHECK(y1(n, o) == doctest::Approx(acc).epsilon(1e-13));
      }

    Matrix dx1(s.batch, s.in), dx2(s.batch, s.in);
    k::serial::dense_backward_input(s, dy.flat(), w.flat(), dx1.flat());
    k::parallel::dense_backward_input(s, dy.flat(), w.flat(), dx2.flat());
    CHECK(dx1 == dx2);

    Matrix dw1(s.out, s.in, 0.5), dw2(s.out, s.in, 0.5), db1(1, s.out, 0.25), db2(1, s.out, 0.25);
    k::serial::dense_backward_params(s, dy.flat(), x.flat(), dw1.flat(), db1.flat());
    k::parallel::dense_backward_params(s, dy.flat(), x.flat(), dw2.flat(), db2.flat());
    CHECK(dw1 == dw2);
    CHECK(db1 == db2);
    for (std::size_t o = 0; o < s.out; ++o) {
      double acc = 0.25;
      for (std::size_t n = 0; n < s.batch; ++n) acc += dy(n, o);
      CHECK(db1(0, o) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("pairwise squared distances") {
  Rng rng(5);
  const Matrix a = testutil::random_matrix(130, 3, rng), b = testutil::random_matrix(170, 3, rng);
  Matrix d1(130, 170), d2(130, 170);
  k::serial::pairwise_sq_dist(130, 170, 3, a.flat(), b.flat(), d1.flat());
  k::parallel::pairwise_sq_dist(130, 170, 3, a.flat(), b.flat(), d2.flat());
  CHECK(d1 == d2);
  for (std::size_t i = 0; i < 130; i += 13)
    for (std::size_t j = 0; j < 170; j += 17) {
      double acc = 0.0;
      for (std::size_t c = 0; c < 3; ++c) acc += (a(i, c) - b(j, c)) * (a(i, c) - b(j, c));
      CHECK(d1(i, j) == doctest::Approx(acc).epsilon(1e-14));
    }
  Matrix self(130, 130);
  k::serial::pairwise_sq_dist(130, 130, 3, a.flat(), a.flat(), self.flat());
  for (std::size_t i = 0; i < 130; ++i) CHECK(self(i, i) == 0.0);
}
