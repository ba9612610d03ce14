#pragma once

// Classical behaviour-cloning heads on a shared MLP trunk: MSE regression,
// independent per-dimension discretisation, K-Means classification, and
// K-Means with a per-centroid residual.

#include <cstdint>
#include <span>
#include <vector>

#include "dbc/envs.hpp"
#include "dbc/matrix.hpp"
#include "dbc/nnet.hpp"
#include "dbc/normalizer.hpp"
#include "dbc/rng.hpp"

namespace dbc::baselines {

enum class Kind : std::uint8_t { mse = 0, discretised = 1, kmeans = 2, kmeans_residual = 3 };

const char* to_string(Kind k);

struct Centroids {
  Matrix points;                    // K x |a|
  std::vector<std::size_t> counts;  // points assigned to each centroid
  std::vector<double> distortion;   // within-cluster sum of squares per Lloyd iteration
  std::size_t iterations = 0;
};

struct KMeansOptions {
  std::size_t max_iterations = 300;
};

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing. An empty cluster is re-seeded at the point farthest from its
/// current centroid.
Centroids kmeans_fit(const Matrix& points, std::size_t k, Rng& rng, const KMeansOptions& opts = {});

std::size_t nearest_centroid(const Matrix& centroids, std::span<const double> x);

struct BaselineModel {
  Kind kind = Kind::mse;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  nnet::Mlp trunk;
  Normalizer action_norm;
  std::size_t bins = 0;                         // discretised
  std::vector<std::vector<double>> bin_edges;   // per dimension, bins+1 edges over [-1, 1]
  Matrix centroids;                             // kmeans variants, normalized coords

  std::size_t head_width() const;
  std::size_t centroid_count() const { return centroids.rows(); }
  /// Throws ShapeError / DomainError when the head metadata is inconsistent.
  void validate() const;
};

struct BaselineConfig {
  std::size_t hidden = 128;
  std::size_t depth = 3;
  std::size_t bins = 20;
  std::size_t clusters = 10;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  bool cosine_decay = true;
};

/// Empty model with initialized trunk and fitted head metadata.
BaselineModel init_baseline(Kind kind, const envs::DemoDataset& data, const BaselineConfig& cfg, Rng& rng);

/// Per-batch loss and its gradient w.r.t. the trunk output. `actions` are normalized.
double baseline_loss(const BaselineModel& model, const Matrix& head_out, const Matrix& actions, Matrix* grad);

struct TrainLog {
  std::vector<double> epoch_loss;
};

/// Minibatch Adam on the kind's loss. Actions are normalized internally.
BaselineModel train_baseline(Kind kind, const envs::DemoDataset& data, const BaselineConfig& cfg, Rng& rng,
                             TrainLog* log = nullptr);

/// Row r uses obs row r and rngs[r]; returns de-normalized actions.
Matrix sample_baseline(const BaselineModel& model, const Matrix& obs, std::span<Rng> rngs);
std::vector<double> sample_baseline(const BaselineModel& model, std::span<const double> obs, Rng& rng);

/// Bin index of a normalized value for the uniform bins over [-1, 1].
std::size_t bin_index(double normalized, std::size_t bins);
double bin_center(std::size_t bin, std::size_t bins);

/// Softmax over a span, numerically stabilized.
std::vector<double> softmax(std::span<const double> logits);
/// Index drawn from a probability vector with one uniform draw.
std::size_t categorical(std::span<const double> probs, Rng& rng);

}  // namespace dbc::baselines
