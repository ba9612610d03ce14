#pragma once

// Distribution-similarity measurements: exact optimal transport between
// weighted point clouds, 1-D histogram Wasserstein, k-NN density/coverage,
// and the claw in-distribution rate.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dbc/envs.hpp"
#include "dbc/matrix.hpp"

namespace dbc::metrics {

struct EmpiricalDistribution {
  Matrix points;
  std::vector<double> weights;

  static EmpiricalDistribution uniform(Matrix points);
  std::size_t size() const { return points.rows(); }
  std::size_t dim() const { return points.cols(); }
  /// Throws DomainError on negative or non-normalized weights or non-finite points.
  void validate() const;
};

struct EmdOptions {
  std::size_t max_points = 2000;
  std::uint64_t subsample_seed = 0x5eed5eedULL;
};

/// Exact transport cost under the Euclidean ground cost. Clouds larger than
/// max_points are subsampled (without replacement, weights renormalized).
double emd(const EmpiricalDistribution& p, const EmpiricalDistribution& q, const EmdOptions& opts = {});

/// Exact transport between supplies and demands for an explicit cost matrix
/// (rows = supplies). Returns the optimal cost.
double transport_cost(std::span<const double> supply, std::span<const double> demand, const Matrix& cost);

/// Sum over bins of |CDF1 - CDF2| times the bin spacing.
double wasserstein_1d(std::span<const double> h1, std::span<const double> h2, double spacing = 1.0);
double total_variation(std::span<const double> h1, std::span<const double> h2);

struct DCResult {
  double density = 0.0;
  double coverage = 0.0;
  std::size_t k = 0;
  std::size_t zero_radius_points = 0;  // real points whose k-NN radius is 0
};

/// Balls are closed: a fake point at exactly the k-NN radius is inside.
DCResult density_coverage(const Matrix& real, const Matrix& fake, std::size_t k);

/// k-th smallest distance from each real point to the other real points.
std::vector<double> knn_radii(const Matrix& real, std::size_t k);

double in_distribution_rate(std::span<const envs::ClawScene> scenes, std::span<const int> scene_ids,
                            const Matrix& actions);

/// Flat, ordered metric map with JSON and CSV renderings.
class MetricReport {
 public:
  void set(const std::string& name, double value) { values_[name] = value; }
  const std::map<std::string, double>& values() const { return values_; }
  double at(const std::string& name) const;
  std::string to_json() const;
  /// Header "run_id,method,metric,value" then one row per metric.
  std::string to_csv(const std::string& run_id, const std::string& method) const;

 private:
  std::map<std::string, double> values_;
};

}  // namespace dbc::metrics
