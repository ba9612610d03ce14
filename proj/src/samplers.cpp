#include "dbc/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "dbc/kernels.hpp"

namespace dbc::samplers {

const char* to_string(Scheme s) {
  switch (s) {
    case Scheme::diffusion_bc:
      return "diffusion_bc";
    case Scheme::diffusion_x:
      return "diffusion_x";
    case Scheme::diffusion_kde:
      return "diffusion_kde";
  }
  return "?";
}

void validate(const SamplerConfig& cfg) {
  if (cfg.extra_steps < 0) throw ConfigError("extra_steps must be >= 0");
  if (cfg.scheme == Scheme::diffusion_bc && cfg.extra_steps != 0) throw ConfigError("diffusion_bc requires extra_steps = 0");
  if (cfg.scheme == Scheme::diffusion_kde && cfg.extra_steps != 0) throw ConfigError("diffusion_kde requires extra_steps = 0");
  if (cfg.kde_samples < 1) throw ConfigError("kde_samples must be >= 1");
  if (!(cfg.kde_width > 0.0)) throw ConfigError("kde_width must be positive");
  if (cfg.guidance && !(*cfg.guidance >= 0.0)) throw ConfigError("guidance weight must be >= 0");
}

Matrix run_chain(const diffusion::Denoiser& model, const Matrix& encoding, const diffusion::VarianceSchedule& sched,
                 int extra_steps, std::optional<double> guidance, std::span<Rng> rngs) {
  const std::size_t rows = encoding.rows();
  const std::size_t A = model.spec().action_dim;
  if (rngs.size() != rows) throw ShapeError("one generator per sampled row is required");
  if (extra_steps < 0) throw ConfigError("extra_steps must be >= 0");
  if (sched.steps() != model.spec().steps) throw ConfigError("schedule length differs from the model's T");

  Matrix a(rows, A);
  for (std::size_t r = 0; r < rows; ++r) rngs[r].fill_normal(a.row(r));
  Matrix z(rows, A);
  const int T = sched.steps();
  for (int i = T; i >= 1 - extra_steps; --i) {
    const int tau = std::max(i, 1);
    if (tau > 1) {
      for (std::size_t r = 0; r < rows; ++r) rngs[r].fill_normal(z.row(r));
    } else {
      z.fill(0.0);
    }
    a = diffusion::denoise_step(model, encoding, a, tau, sched, z, guidance);
    if (!a.all_finite()) throw SamplingError("non-finite intermediate action", tau);
  }
  return a;
}

namespace {

constexpr std::size_t kChunkRows = 4096;

Matrix sample_normalized(const DiffusionPolicy& policy, const Matrix& obs, const SamplerConfig& cfg,
                         std::span<Rng> rngs) {
  validate(cfg);
  const auto& model = *policy.model;
  if (rngs.size() != obs.rows()) throw ShapeError("one generator per observation row is required");
  const std::size_t rows = obs.rows();
  const std::size_t A = model.spec().action_dim;
  Matrix out(rows, A);
  if (rows == 0) return out;

  // The observation is encoded once per call.
  const Matrix encoding = model.encode(obs, {});

  if (cfg.scheme != Scheme::diffusion_kde) {
    const int extra = cfg.scheme == Scheme::diffusion_x ? cfg.extra_steps : 0;
    for (std::size_t first = 0; first < rows; first += kChunkRows) {
      const std::size_t n = std::min(kChunkRows, rows - first);
      Matrix enc(n, encoding.cols());
      for (std::size_t i = 0; i < n; ++i)
        std::copy(encoding.row(first + i).begin(), encoding.row(first + i).end(), enc.row(i).begin());
      const Matrix a = run_chain(model, enc, policy.schedule, extra, cfg.guidance, rngs.subspan(first, n));
      for (std::size_t i = 0; i < n; ++i) std::copy(a.row(i).begin(), a.row(i).end(), out.row(first + i).begin());
    }
    return out;
  }

  const std::size_t K = cfg.kde_samples;
  const std::size_t per_chunk = std::max<std::size_t>(1, kChunkRows / K);
  for (std::size_t first = 0; first < rows; first += per_chunk) {
    const std::size_t n = std::min(per_chunk, rows - first);
    Matrix enc(n * K, encoding.cols());
    std::vector<Rng> subs;
    subs.reserve(n * K);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < K; ++k) {
        std::copy(encoding.row(first + i).begin(), encoding.row(first + i).end(), enc.row(i * K + k).begin());
        subs.push_back(rngs[first + i].substream("kde", k));
      }
    }
    const Matrix cand = run_chain(model, enc, policy.schedule, 0, cfg.guidance, subs);
    for (std::size_t i = 0; i < n; ++i) {
      Matrix block(K, A);
      for (std::size_t k = 0; k < K; ++k) std::copy(cand.row(i * K + k).begin(), cand.row(i * K + k).end(), block.row(k).begin());
      const KdeModel kde = kde_fit(block, cfg.kde_width);
      const std::size_t best = argmax_first(kde_score_support(kde));
      std::copy(block.row(best).begin(), block.row(best).end(), out.row(first + i).begin());
    }
  }
  return out;
}

std::vector<double> sample_one(const DiffusionPolicy& policy, std::span<const double> obs, const SamplerConfig& cfg,
                               Rng& rng) {
  const Matrix o = Matrix::row_vector(obs);
  std::span<Rng> one(&rng, 1);
  const Matrix a = policy.action_norm.denormalize(sample_normalized(policy, o, cfg, one));
  return a.storage();
}

}  // namespace

std::vector<double> sample_diffusion_bc(const DiffusionPolicy& policy, std::span<const double> obs,
                                        const SamplerConfig& cfg, Rng& rng) {
  SamplerConfig c = cfg;
  c.scheme = Scheme::diffusion_bc;
  c.extra_steps = 0;
  return sample_one(policy, obs, c, rng);
}

std::vector<double> sample_diffusion_x(const DiffusionPolicy& policy, std::span<const double> obs,
                                       const SamplerConfig& cfg, Rng& rng) {
  SamplerConfig c = cfg;
  c.scheme = Scheme::diffusion_x;
  return sample_one(policy, obs, c, rng);
}

std::vector<double> sample_diffusion_kde(const DiffusionPolicy& policy, std::span<const double> obs,
                                         const SamplerConfig& cfg, Rng& rng) {
  SamplerConfig c = cfg;
  c.scheme = Scheme::diffusion_kde;
  c.extra_steps = 0;
  return sample_one(policy, obs, c, rng);
}

Matrix sample_actions(const DiffusionPolicy& policy, const Matrix& obs, const SamplerConfig& cfg, std::span<Rng> rngs) {
  return policy.action_norm.denormalize(sample_normalized(policy, obs, cfg, rngs));
}

// --- KDE ----------------------------------------------------------------------

KdeModel kde_fit(const Matrix& samples, double width) {
  if (!(width > 0.0)) throw ConfigError("KDE width must be positive");
  if (samples.rows() == 0) throw ShapeError("KDE needs at least one sample");
  return KdeModel{samples, width};
}

namespace {

double log_normalizer(const KdeModel& m) {
  const double d = static_cast<double>(m.support.cols());
  const double K = static_cast<double>(m.support.rows());
  return -std::log(K) - 0.5 * d * std::log(2.0 * std::numbers::pi * m.bandwidth * m.bandwidth);
}

double log_sum_exp_scaled(std::span<const double> sq_dists, double bandwidth) {
  const double inv = -0.5 / (bandwidth * bandwidth);
  double peak = -std::numeric_limits<double>::infinity();
  for (double d : sq_dists) peak = std::max(peak, inv * d);
  double acc = 0.0;
  for (double d : sq_dists) acc += std::exp(inv * d - peak);
  return peak + std::log(acc);
}

}  // namespace

double kde_log_density(const KdeModel& model, std::span<const double> x) {
  if (x.size() != model.support.cols()) throw ShapeError("KDE query dimension");
  std::vector<double> d(model.support.rows());
  kernels::parallel::pairwise_sq_dist(1, model.support.rows(), x.size(), x, model.support.flat(), d);
  return log_sum_exp_scaled(d, model.bandwidth) + log_normalizer(model);
}

std::vector<double> kde_score_support(const KdeModel& model) {
  const std::size_t K = model.support.rows();
  std::vector<double> d(K * K);
  kernels::parallel::pairwise_sq_dist(K, K, model.support.cols(), model.support.flat(), model.support.flat(), d);
  std::vector<double> scores(K);
  const double norm = log_normalizer(model);
  for (std::size_t i = 0; i < K; ++i)
    scores[i] = log_sum_exp_scaled(std::span(d).subspan(i * K, K), model.bandwidth) + norm;
  return scores;
}

std::size_t argmax_first(std::span<const double> values) {
  if (values.empty()) throw ShapeError("argmax of an empty range");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace dbc::samplers
