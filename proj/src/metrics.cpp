#include "dbc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "dbc/kernels.hpp"
#include "dbc/rng.hpp"

namespace dbc::metrics {

EmpiricalDistribution EmpiricalDistribution::uniform(Matrix points) {
  EmpiricalDistribution d;
  const std::size_t n = points.rows();
  d.points = std::move(points);
  d.weights.assign(n, n ? 1.0 / static_cast<double>(n) : 0.0);
  return d;
}

void EmpiricalDistribution::validate() const {
  if (weights.size() != points.rows()) throw ShapeError("one weight per point is required");
  if (points.rows() == 0) throw DomainError("empty distribution");
  if (!points.all_finite()) throw DomainError("non-finite point");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw DomainError("negative weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("weights must sum to 1");
}

// Successive shortest paths with reduced costs on the complete bipartite
// graph. Every augmentation saturates a supply, a demand or a reverse arc, and
// potentials keep all reduced costs non-negative, so the result is the exact
// LP optimum up to floating-point rounding.
double transport_cost(std::span<const double> supply, std::span<const double> demand, const Matrix& cost) {
  const std::size_t N = supply.size();
  const std::size_t M = demand.size();
  if (cost.rows() != N || cost.cols() != M) throw ShapeError("transport cost matrix shape");
  if (N == 0 || M == 0) throw ShapeError("empty transport problem");

  constexpr double kInf = std::numeric_limits<double>::infinity();
  constexpr double kTol = 1e-15;
  std::vector<double> sup(supply.begin(), supply.end());
  std::vector<double> dem(demand.begin(), demand.end());
  std::vector<double> pot_r(N, 0.0), pot_c(M, 0.0);
  std::vector<double> dist_r(N), dist_c(M);
  std::vector<char> done_r(N), done_c(M);
  std::vector<std::ptrdiff_t> pred_r(N), pred_c(M);
  Matrix flow(N, M, 0.0);
  std::vector<std::vector<std::size_t>> col_rows(M);  // rows with flow into each column

  auto reduced = [&](std::size_t i, std::size_t j) { return std::max(0.0, cost(i, j) + pot_r[i] - pot_c[j]); };

  for (;;) {
    std::fill(dist_r.begin(), dist_r.end(), kInf);
    std::fill(dist_c.begin(), dist_c.end(), kInf);
    std::fill(done_r.begin(), done_r.end(), 0);
    std::fill(done_c.begin(), done_c.end(), 0);
    bool any_source = false;
    for (std::size_t i = 0; i < N; ++i) {
      pred_r[i] = -1;
      if (sup[i] > kTol) {
        dist_r[i] = 0.0;
        any_source = true;
      }
    }
    if (!any_source) break;

    std::ptrdiff_t target = -1;
    for (;;) {
      double best = kInf;
      std::size_t node = 0;
      bool is_row = true;
      for (std::size_t i = 0; i < N; ++i)
        if (!done_r[i] && dist_r[i] < best) best = dist_r[i], node = i, is_row = true;
      for (std::size_t j = 0; j < M; ++j)
        if (!done_c[j] && dist_c[j] < best) best = dist_c[j], node = j, is_row = false;
      if (best == kInf) break;
      if (is_row) {
        done_r[node] = 1;
        for (std::size_t j = 0; j < M; ++j) {
          if (done_c[j]) continue;
          const double nd = best + reduced(node, j);
          if (nd < dist_c[j]) dist_c[j] = nd, pred_c[j] = static_cast<std::ptrdiff_t>(node);
        }
      } else {
        done_c[node] = 1;
        if (dem[node] > kTol) {
          target = static_cast<std::ptrdiff_t>(node);
          break;
        }
        for (std::size_t i : col_rows[node]) {
          if (done_r[i]) continue;
          const double back = std::max(0.0, -(cost(i, node) + pot_r[i] - pot_c[node]));
          const double nd = best + back;
          if (nd < dist_r[i]) dist_r[i] = nd, pred_r[i] = static_cast<std::ptrdiff_t>(node);
        }
      }
    }
    if (target < 0) break;

    const double D = dist_c[static_cast<std::size_t>(target)];
    for (std::size_t i = 0; i < N; ++i) pot_r[i] += std::min(dist_r[i], D);
    for (std::size_t j = 0; j < M; ++j) pot_c[j] += std::min(dist_c[j], D);

    // Bottleneck along the path target <- row <- col <- row ... <- source row.
    double delta = dem[static_cast<std::size_t>(target)];
    std::size_t j = static_cast<std::size_t>(target);
    std::size_t i = static_cast<std::size_t>(pred_c[j]);
    for (;;) {
      if (pred_r[i] < 0) {
        delta = std::min(delta, sup[i]);
        break;
      }
      const std::size_t jb = static_cast<std::size_t>(pred_r[i]);
      delta = std::min(delta, flow(i, jb));
      i = static_cast<std::size_t>(pred_c[jb]);
    }
    // Apply.
    j = static_cast<std::size_t>(target);
    dem[j] -= delta;
    for (;;) {
      i = static_cast<std::size_t>(pred_c[j]);
      if (flow(i, j) <= kTol) col_rows[j].push_back(i);
      flow(i, j) += delta;
      if (pred_r[i] < 0) {
        sup[i] -= delta;
        break;
      }
      const std::size_t jb = static_cast<std::size_t>(pred_r[i]);
      flow(i, jb) -= delta;
      if (flow(i, jb) <= kTol) {
        flow(i, jb) = 0.0;
        auto& rows = col_rows[jb];
        rows.erase(std::remove(rows.begin(), rows.end(), i), rows.end());
      }
      j = jb;
    }
  }

  double total = 0.0;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t jj = 0; jj < M; ++jj) total += flow(i, jj) * cost(i, jj);
  return total;
}

namespace {

EmpiricalDistribution subsample(const EmpiricalDistribution& d, std::size_t cap, Rng& rng) {
  if (d.size() <= cap) return d;
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < cap; ++i) {
    const auto j = static_cast<std::size_t>(rng.integer(static_cast<std::int64_t>(i), static_cast<std::int64_t>(d.size()) - 1));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  EmpiricalDistribution out;
  out.points = Matrix(cap, d.dim());
  out.weights.resize(cap);
  double total = 0.0;
  for (std::size_t i = 0; i < cap; ++i) {
    std::copy(d.points.row(idx[i]).begin(), d.points.row(idx[i]).end(), out.points.row(i).begin());
    out.weights[i] = d.weights[idx[i]];
    total += out.weights[i];
  }
  if (!(total > 0.0)) throw DomainError("subsample carries no mass");
  for (double& w : out.weights) w /= total;
  return out;
}

}  // namespace

double emd(const EmpiricalDistribution& p_in, const EmpiricalDistribution& q_in, const EmdOptions& opts) {
  if (p_in.dim() != q_in.dim()) throw ShapeError("emd: distributions differ in dimension");
  p_in.validate();
  q_in.validate();
  if (opts.max_points == 0) throw ConfigError("emd point cap must be positive");
  // Same stream for both sides: equal-size clouds keep the same indices.
  Rng rp(opts.subsample_seed);
  Rng rq(opts.subsample_seed);
  const EmpiricalDistribution p = subsample(p_in, opts.max_points, rp);
  const EmpiricalDistribution q = subsample(q_in, opts.max_points, rq);
  Matrix cost(p.size(), q.size());
  kernels::parallel::pairwise_sq_dist(p.size(), q.size(), p.dim(), p.points.flat(), q.points.flat(), cost.flat());
  for (double& c : cost.flat()) c = std::sqrt(c);
  return transport_cost(p.weights, q.weights, cost);
}

namespace {
void check_histograms(std::span<const double> h1, std::span<const double> h2) {
  if (h1.size() != h2.size()) throw ShapeError("histograms have different bin counts");
  if (h1.empty()) throw ShapeError("empty histogram");
  for (auto h : {h1, h2}) {
    double total = 0.0;
    for (double v : h) {
      if (!(v >= 0.0)) throw DomainError("negative histogram mass");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-9) throw DomainError("histogram does not sum to 1");
  }
}
}  // namespace

double wasserstein_1d(std::span<const double> h1, std::span<const double> h2, double spacing) {
  check_histograms(h1, h2);
  if (!(spacing > 0.0)) throw DomainError("bin spacing must be positive");
  double c1 = 0.0, c2 = 0.0, total = 0.0;
  for (std::size_t i = 0; i + 1 < h1.size(); ++i) {
    c1 += h1[i];
    c2 += h2[i];
    total += std::abs(c1 - c2);
  }
  return total * spacing;
}

double total_variation(std::span<const double> h1, std::span<const double> h2) {
  check_histograms(h1, h2);
  double total = 0.0;
  for (std::size_t i = 0; i < h1.size(); ++i) total += std::abs(h1[i] - h2[i]);
  return 0.5 * total;
}

std::vector<double> knn_radii(const Matrix& real, std::size_t k) {
  const std::size_t N = real.rows();
  if (k < 1) throw ConfigError("k must be >= 1");
  if (N <= k) throw DomainError("density/coverage needs more real points than k");
  std::vector<double> d(N * N);
  kernels::parallel::pairwise_sq_dist(N, N, real.cols(), real.flat(), real.flat(), d);
  std::vector<double> radii(N);
  std::vector<double> row;
  for (std::size_t i = 0; i < N; ++i) {
    row.clear();
    for (std::size_t j = 0; j < N; ++j)
      if (j != i) row.push_back(d[i * N + j]);
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(k - 1), row.end());
    radii[i] = row[k - 1];  // squared
  }
  return radii;
}

DCResult density_coverage(const Matrix& real, const Matrix& fake, std::size_t k) {
  if (real.cols() != fake.cols()) throw ShapeError("density/coverage: dimension mismatch");
  if (fake.rows() == 0) throw DomainError("density/coverage needs at least one fake point");
  const std::vector<double> radii_sq = knn_radii(real, k);
  const std::size_t N = real.rows();
  const std::size_t M = fake.rows();
  std::vector<double> d(N * M);
  kernels::parallel::pairwise_sq_dist(N, M, real.cols(), real.flat(), fake.flat(), d);
  std::size_t inside = 0;
  std::size_t covered = 0;
  DCResult out;
  out.k = k;
  for (std::size_t i = 0; i < N; ++i) {
    bool any = false;
    for (std::size_t j = 0; j < M; ++j) {
      if (d[i * M + j] <= radii_sq[i]) {
        ++inside;
        any = true;
      }
    }
    if (any) ++covered;
    if (radii_sq[i] == 0.0) ++out.zero_radius_points;
  }
  out.density = static_cast<double>(inside) / (static_cast<double>(k) * static_cast<double>(M));
  out.coverage = static_cast<double>(covered) / static_cast<double>(N);
  return out;
}

double in_distribution_rate(std::span<const envs::ClawScene> scenes, std::span<const int> scene_ids,
                            const Matrix& actions) {
  if (scene_ids.size() != actions.rows()) throw ShapeError("scene ids and actions differ in length");
  if (actions.rows() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < actions.rows(); ++r) {
    const int s = scene_ids[r];
    if (s < 0 || static_cast<std::size_t>(s) >= scenes.size()) throw DomainError("scene id out of range");
    if (envs::in_region(scenes[static_cast<std::size_t>(s)], actions.row(r))) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(actions.rows());
}

double MetricReport::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw DomainError("no metric named " + name);
  return it->second;
}

std::string MetricReport::to_json() const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j.dump(2) + "\n";
}

std::string MetricReport::to_csv(const std::string& run_id, const std::string& method) const {
  std::ostringstream os;
  os << "run_id,method,metric,value\n";
  os << std::setprecision(17);
  for (const auto& [k, v] : values_) os << run_id << ',' << method << ',' << k << ',' << v << '\n';
  return os.str();
}

}  // namespace dbc::metrics
