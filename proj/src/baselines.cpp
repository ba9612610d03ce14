#include "dbc/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dbc/kernels.hpp"

namespace dbc::baselines {

const char* to_string(Kind k) {
  switch (k) {
    case Kind::mse:
      return "mse";
    case Kind::discretised:
      return "discretised";
    case Kind::kmeans:
      return "kmeans";
    case Kind::kmeans_residual:
      return "kmeans_residual";
  }
  return "?";
}

// --- k-means ------------------------------------------------------------------

std::size_t nearest_centroid(const Matrix& centroids, std::span<const double> x) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows(); ++c) {
    double d = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = x[j] - centroids(c, j);
      d += diff * diff;
    }
    if (d < best_d) best_d = d, best = c;
  }
  return best;
}

Centroids kmeans_fit(const Matrix& points, std::size_t k, Rng& rng, const KMeansOptions& opts) {
  const std::size_t N = points.rows();
  const std::size_t D = points.cols();
  if (k < 1) throw ConfigError("K must be >= 1");
  if (N < k) throw ConfigError("K-Means needs at least K points");
  if (!points.all_finite()) throw DomainError("non-finite point passed to K-Means");

  // k-means++ seeding.
  Matrix centers(k, D);
  std::vector<double> nearest(N, std::numeric_limits<double>::infinity());
  std::size_t first = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(N) - 1));
  std::copy(points.row(first).begin(), points.row(first).end(), centers.row(0).begin());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      double d = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        const double diff = points(i, j) - centers(c - 1, j);
        d += diff * diff;
      }
      nearest[i] = std::min(nearest[i], d);
      total += nearest[i];
    }
    std::size_t pick = N - 1;
    if (total > 0.0) {
      double u = rng.uniform() * total;
      for (std::size_t i = 0; i < N; ++i) {
        if (u < nearest[i]) {
          pick = i;
          break;
        }
        u -= nearest[i];
      }
    } else {
      pick = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(N) - 1));
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), centers.row(c).begin());
  }

  Centroids out;
  std::vector<std::size_t> assign(N, k);  // k = unassigned
  std::vector<double> d2(N * k);
  std::vector<double> own(N);
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    kernels::parallel::pairwise_sq_dist(N, k, D, points.flat(), centers.flat(), d2);
    bool changed = false;
    double distortion = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double* row = d2.data() + i * k;
      const std::size_t best = static_cast<std::size_t>(std::min_element(row, row + k) - row);
      if (best != assign[i]) changed = true;
      assign[i] = best;
      own[i] = row[best];
      distortion += row[best];
    }
    out.distortion.push_back(distortion);
    out.iterations = it + 1;
    if (!changed) break;

    Matrix sums(k, D, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < N; ++i) {
      ++counts[assign[i]];
      for (std::size_t j = 0; j < D; ++j) sums(assign[i], j) += points(i, j);
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Re-seed at the point farthest from its centroid and take it over.
        const std::size_t far = static_cast<std::size_t>(std::max_element(own.begin(), own.end()) - own.begin());
        std::copy(points.row(far).begin(), points.row(far).end(), centers.row(c).begin());
        own[far] = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < D; ++j) centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    }
  }
  out.counts.assign(k, 0);
  for (std::size_t i = 0; i < N; ++i) ++out.counts[assign[i]];
  out.points = std::move(centers);
  if (!out.points.all_finite()) throw DomainError("K-Means produced a non-finite centroid");
  return out;
}

// --- model --------------------------------------------------------------------

std::size_t bin_index(double normalized, std::size_t bins) {
  const double pos = (normalized + 1.0) * 0.5 * static_cast<double>(bins);
  const auto idx = static_cast<std::ptrdiff_t>(std::floor(pos));
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(idx, 0, static_cast<std::ptrdiff_t>(bins) - 1));
}

double bin_center(std::size_t bin, std::size_t bins) {
  return -1.0 + (static_cast<double>(bin) + 0.5) * 2.0 / static_cast<double>(bins);
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> p(logits.size());
  const double peak = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += (p[i] = std::exp(logits[i] - peak));
  for (double& v : p) v /= total;
  return p;
}

std::size_t categorical(std::span<const double> probs, Rng& rng) {
  double u = rng.uniform();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (u < probs[i]) return i;
    u -= probs[i];
  }
  return probs.size() - 1;
}

std::size_t BaselineModel::head_width() const {
  switch (kind) {
    case Kind::mse:
      return action_dim;
    case Kind::discretised:
      return action_dim * bins;
    case Kind::kmeans:
      return centroids.rows();
    case Kind::kmeans_residual:
      return centroids.rows() * (1 + action_dim);
  }
  return 0;
}

void BaselineModel::validate() const {
  if (trunk.depth() == 0) throw ShapeError("baseline without a trunk");
  if (trunk.input_size() != obs_dim || trunk.output_size() != head_width())
    throw ShapeError("baseline trunk does not match its head");
  if (action_norm.dim() != action_dim) throw ShapeError("baseline normalizer dimension");
  if (kind == Kind::discretised) {
    if (bins < 1 || bin_edges.size() != action_dim) throw ShapeError("discretised head metadata");
    for (const auto& e : bin_edges) {
      if (e.size() != bins + 1) throw ShapeError("bin edge count");
      for (std::size_t i = 1; i < e.size(); ++i)
        if (!(e[i] > e[i - 1])) throw DomainError("bin edges must increase");
    }
  }
  if (kind == Kind::kmeans || kind == Kind::kmeans_residual) {
    if (centroids.rows() < 1 || centroids.cols() != action_dim) throw ShapeError("centroid table shape");
    if (!centroids.all_finite()) throw DomainError("non-finite centroid");
  }
}

BaselineModel init_baseline(Kind kind, const envs::DemoDataset& data, const BaselineConfig& cfg, Rng& rng) {
  if (data.size() == 0) throw ConfigError("empty dataset");
  BaselineModel m;
  m.kind = kind;
  m.obs_dim = data.observations.cols();
  m.action_dim = data.actions.cols();
  m.action_norm = data.action_normalizer();
  if (kind == Kind::discretised) {
    if (cfg.bins < 1) throw ConfigError("bins must be >= 1");
    m.bins = cfg.bins;
    std::vector<double> edges(cfg.bins + 1);
    for (std::size_t i = 0; i <= cfg.bins; ++i) edges[i] = -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(cfg.bins);
    m.bin_edges.assign(m.action_dim, edges);
  }
  Rng init_rng = rng.substream("init");
  if (kind == Kind::kmeans || kind == Kind::kmeans_residual) {
    Rng km = rng.substream("kmeans");
    m.centroids = kmeans_fit(m.action_norm.normalize(data.actions), cfg.clusters, km).points;
  }
  std::vector<std::size_t> widths{m.obs_dim};
  for (std::size_t l = 0; l < cfg.depth; ++l) widths.push_back(cfg.hidden);
  widths.push_back(m.head_width());
  m.trunk = nnet::Mlp(widths, nnet::Activation::gelu, nnet::Activation::identity, init_rng);
  m.validate();
  return m;
}

double baseline_loss(const BaselineModel& model, const Matrix& head_out, const Matrix& actions, Matrix* grad) {
  const std::size_t B = head_out.rows();
  const std::size_t A = model.action_dim;
  require_cols(head_out, model.head_width(), "baseline head output");
  require_cols(actions, A, "baseline targets");
  if (actions.rows() != B || B == 0) throw ShapeError("baseline loss batch size");
  if (grad) *grad = Matrix(B, head_out.cols(), 0.0);
  const double inv_b = 1.0 / static_cast<double>(B);
  double total = 0.0;
  for (std::size_t r = 0; r < B; ++r) {
    auto out = head_out.row(r);
    auto a = actions.row(r);
    switch (model.kind) {
      case Kind::mse:
        for (std::size_t d = 0; d < A; ++d) {
          const double diff = out[d] - a[d];
          total += diff * diff;
          if (grad) (*grad)(r, d) = 2.0 * diff * inv_b;
        }
        break;
      case Kind::discretised:
        for (std::size_t d = 0; d < A; ++d) {
          const auto logits = out.subspan(d * model.bins, model.bins);
          const auto p = softmax(logits);
          const std::size_t label = bin_index(a[d], model.bins);
          total -= std::log(std::max(p[label], 1e-300));
          if (grad)
            for (std::size_t b = 0; b < model.bins; ++b)
              (*grad)(r, d * model.bins + b) = (p[b] - (b == label ? 1.0 : 0.0)) * inv_b;
        }
        break;
      case Kind::kmeans:
      case Kind::kmeans_residual: {
        const std::size_t K = model.centroids.rows();
        const std::size_t label = nearest_centroid(model.centroids, a);
        const auto p = softmax(out.first(K));
        total -= std::log(std::max(p[label], 1e-300));
        if (grad)
          for (std::size_t c = 0; c < K; ++c) (*grad)(r, c) = (p[c] - (c == label ? 1.0 : 0.0)) * inv_b;
        if (model.kind == Kind::kmeans_residual) {
          const std::size_t base = K + label * A;
          for (std::size_t d = 0; d < A; ++d) {
            const double diff = out[base + d] - (a[d] - model.centroids(label, d));
            total += diff * diff;
            if (grad) (*grad)(r, base + d) = 2.0 * diff * inv_b;
          }
        }
        break;
      }
    }
  }
  return total * inv_b;
}

BaselineModel train_baseline(Kind kind, const envs::DemoDataset& data, const BaselineConfig& cfg, Rng& rng,
                             TrainLog* log) {
  if (cfg.batch_size < 1 || cfg.epochs < 1) throw ConfigError("batch size and epochs must be >= 1");
  BaselineModel m = init_baseline(kind, data, cfg, rng);
  const Matrix actions = m.action_norm.normalize(data.actions);
  const std::size_t N = data.size();
  const std::size_t steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch * cfg.epochs);

  Rng shuffle = rng.substream("shuffle");
  nnet::OptimizerState opt;
  std::vector<nnet::ParamRef> params;
  m.trunk.collect_params(params);
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size;
      const std::size_t B = std::min(cfg.batch_size, N - lo);
      Matrix obs(B, m.obs_dim), act(B, m.action_dim);
      for (std::size_t i = 0; i < B; ++i) {
        const std::size_t src = order[lo + i];
        std::copy(data.observations.row(src).begin(), data.observations.row(src).end(), obs.row(i).begin());
        std::copy(actions.row(src).begin(), actions.row(src).end(), act.row(i).begin());
      }
      nnet::MlpCache cache;
      const Matrix out = m.trunk.forward(obs, cache);
      Matrix grad;
      const double loss = baseline_loss(m, out, act, &grad);
      if (!std::isfinite(loss)) throw TrainingError("non-finite baseline loss");
      m.trunk.zero_grad();
      m.trunk.backward(cache, grad);
      const double lr = cfg.cosine_decay
                            ? nnet::cosine_learning_rate(cfg.learning_rate, opt.step, total_steps)
                            : cfg.learning_rate;
      nnet::adam_step(params, opt, lr);
      epoch_loss += loss * static_cast<double>(B);
    }
    if (log) log->epoch_loss.push_back(epoch_loss / static_cast<double>(N));
  }
  return m;
}

Matrix sample_baseline(const BaselineModel& model, const Matrix& obs, std::span<Rng> rngs) {
  if (rngs.size() != obs.rows()) throw ShapeError("one generator per observation row is required");
  const std::size_t A = model.action_dim;
  Matrix norm(obs.rows(), A);
  if (obs.rows() == 0) return norm;
  const Matrix out = model.trunk.forward(obs);
  for (std::size_t r = 0; r < obs.rows(); ++r) {
    auto head = out.row(r);
    auto dst = norm.row(r);
    switch (model.kind) {
      case Kind::mse:
        std::copy(head.begin(), head.end(), dst.begin());
        break;
      case Kind::discretised:
        for (std::size_t d = 0; d < A; ++d) {
          const auto p = softmax(head.subspan(d * model.bins, model.bins));
          dst[d] = bin_center(categorical(p, rngs[r]), model.bins);
        }
        break;
      case Kind::kmeans:
      case Kind::kmeans_residual: {
        const std::size_t K = model.centroids.rows();
        const std::size_t c = categorical(softmax(head.first(K)), rngs[r]);
        for (std::size_t d = 0; d < A; ++d) {
          dst[d] = model.centroids(c, d);
          if (model.kind == Kind::kmeans_residual) dst[d] += head[K + c * A + d];
        }
        break;
      }
    }
  }
  return model.action_norm.denormalize(norm);
}

std::vector<double> sample_baseline(const BaselineModel& model, std::span<const double> obs, Rng& rng) {
  return sample_baseline(model, Matrix::row_vector(obs), std::span<Rng>(&rng, 1)).storage();
}

}  // namespace dbc::baselines
