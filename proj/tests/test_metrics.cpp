#include <doctest.h>

#include <cmath>

#include "dbc/envs.hpp"
#include "dbc/error.hpp"
#include "dbc/metrics.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dbc;
using namespace dbc::metrics;

namespace {

EmpiricalDistribution weighted(const Matrix& pts, const std::vector<int>& mult) {
  EmpiricalDistribution d;
  d.points = pts;
  const double total = std::accumulate(mult.begin(), mult.end(), 0.0);
  for (int m : mult) d.weights.push_back(m / total);
  return d;
}

}  // namespace

TEST_CASE("emd basics") {
  Rng rng(1);
  const Matrix p = testutil::random_matrix(40, 2, rng);
  CHECK(emd(EmpiricalDistribution::uniform(p), EmpiricalDistribution::uniform(p)) == 0.0);
  Matrix a(1, 2, 0.0), b(1, 2, 0.0);
  b(0, 0) = 3.0, b(0, 1) = 4.0;
  CHECK(emd(EmpiricalDistribution::uniform(a), EmpiricalDistribution::uniform(b)) == doctest::Approx(5.0));
  CHECK_THROWS_AS(emd(EmpiricalDistribution::uniform(a), EmpiricalDistribution::uniform(Matrix(1, 3))), ShapeError);
  EmpiricalDistribution bad = EmpiricalDistribution::uniform(a);
  bad.weights[0] = 0.5;
  CHECK_THROWS_AS(emd(bad, bad), DomainError);
}

TEST_CASE("emd matches enumeration on small instances") {
  Rng rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const Matrix p = testutil::random_matrix(6, 2, rng), q = testutil::random_matrix(6, 2, rng);
    const std::vector<int> ones(6, 1);
    CHECK(std::abs(emd(EmpiricalDistribution::uniform(p), EmpiricalDistribution::uniform(q)) -
                   oracle::emd_by_enumeration(p, ones, q, ones)) < 1e-9);
  }
  // Unequal weights and sizes through multiplicities summing to 7.
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t np = 2 + trial % 3, nq = 5 - trial % 3;
    const Matrix p = testutil::random_matrix(np, 3, rng), q = testutil::random_matrix(nq, 3, rng);
    auto split = [&](std::size_t n) {
      std::vector<int> m(n, 1);
      for (std::size_t extra = 7 - n; extra > 0; --extra) m[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(n) - 1))] += 1;
      return m;
    };
    const auto pm = split(np), qm = split(nq);
    CHECK(std::abs(emd(weighted(p, pm), weighted(q, qm)) - oracle::emd_by_enumeration(p, pm, q, qm)) < 1e-9);
  }
}

TEST_CASE("emd subsampling is seeded and symmetric for equal clouds") {
  Rng rng(3);
  const Matrix p = testutil::random_matrix(300, 2, rng);
  const EmdOptions opts{50, 7};
  CHECK(emd(EmpiricalDistribution::uniform(p), EmpiricalDistribution::uniform(p), opts) == 0.0);
  const Matrix q = testutil::random_matrix(300, 2, rng);
  CHECK(emd(EmpiricalDistribution::uniform(p), EmpiricalDistribution::uniform(q), opts) ==
        emd(EmpiricalDistribution::uniform(p), EmpiricalDistribution::uniform(q), opts));
}

TEST_CASE("1-D histogram distances") {
  const std::vector<double> h = {0.2, 0.5, 0.3};
  CHECK(wasserstein_1d(h, h) == 0.0);
  CHECK(total_variation(h, h) == 0.0);
  const std::vector<double> e0 = {1, 0, 0, 0}, e3 = {0, 0, 0, 1};
  CHECK(wasserstein_1d(e0, e3, 0.5) == doctest::Approx(1.5));
  CHECK(total_variation(e0, e3) == doctest::Approx(1.0));

  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(5), b(5);
    double sa = 0, sb = 0;
    for (int i = 0; i < 5; ++i) sa += a[i] = rng.uniform(0.01, 1), sb += b[i] = rng.uniform(0.01, 1);
    for (int i = 0; i < 5; ++i) a[i] /= sa, b[i] /= sb;
    Matrix line(5, 1);
    for (int i = 0; i < 5; ++i) line(i, 0) = 0.25 * i;
    EmpiricalDistribution pa{line, a}, pb{line, b};
    CHECK(wasserstein_1d(a, b, 0.25) == doctest::Approx(emd(pa, pb)).epsilon(1e-10));
  }
  CHECK_THROWS_AS(wasserstein_1d(e0, h), ShapeError);
}

TEST_CASE("density and coverage") {
  Rng rng(5);
  const Matrix real = testutil::random_matrix(30, 2, rng);
  const auto self = density_coverage(real, real, 3);
  CHECK(self.coverage == 1.0);
  Matrix far(1, 2, 50.0);
  const auto none = density_coverage(real, far, 3);
  CHECK(none.density == 0.0);
  CHECK(none.coverage == 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    const Matrix r = testutil::random_matrix(30, 2, rng), f = testutil::random_matrix(30, 2, rng);
    const auto got = density_coverage(r, f, 3);
    const auto ref = oracle::density_coverage(r, f, 3);
    CHECK(got.density == ref.density);
    CHECK(got.coverage == ref.coverage);
  }
  // A fake point exactly on a ball boundary counts as inside.
  Matrix line(3, 1), probe(1, 1);
  line(0, 0) = 0.0, line(1, 0) = 1.0, line(2, 0) = 3.0;
  probe(0, 0) = -1.0;
  CHECK(density_coverage(line, probe, 1).coverage == doctest::Approx(1.0 / 3.0));
  CHECK_THROWS_AS(density_coverage(line, probe, 3), DomainError);
  CHECK_THROWS_AS(density_coverage(line, probe, 0), ConfigError);
}

TEST_CASE("in-distribution rate") {
  const auto& scenes = envs::default_claw_scenes();
  Rng rng(6);
  const auto d = envs::generate_claw_dataset(scenes, 500, rng);
  CHECK(in_distribution_rate(scenes, d.labels, d.actions) == 1.0);
  CHECK(in_distribution_rate(scenes, d.labels, Matrix(500, 2, -1.0)) == 0.0);
  Matrix mix = d.actions;
  for (std::size_t r = 0; r < 500; r += 2) mix(r, 0) = mix(r, 1) = -1.0;
  CHECK(in_distribution_rate(scenes, d.labels, mix) == 0.5);
}

TEST_CASE("metric report renderings") {
  MetricReport r;
  r.set("emd", 0.25);
  r.set("coverage", 1.0);
  const std::string csv = r.to_csv("abc", "mse");
  CHECK(csv.rfind("run_id,method,metric,value\n", 0) == 0);
  CHECK(csv.find("abc,mse,coverage,1") != std::string::npos);
  CHECK(r.to_json().find("\"emd\": 0.25") != std::string::npos);
  CHECK_THROWS_AS(r.at("nope"), DomainError);
}
