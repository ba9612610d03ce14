#pragma once

// Action samplers for trained diffusion policies: plain reverse chain,
// extra-step refinement at tau=1, and best-of-K under a kernel density fit.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dbc/diffusion.hpp"
#include "dbc/normalizer.hpp"

namespace dbc::samplers {

enum class Scheme : std::uint8_t { diffusion_bc = 0, diffusion_x = 1, diffusion_kde = 2 };

const char* to_string(Scheme s);

struct SamplerConfig {
  Scheme scheme = Scheme::diffusion_bc;
  int extra_steps = 0;            // M
  std::size_t kde_samples = 100;  // candidates drawn by diffusion_kde
  double kde_width = 0.4;         // kernel std-dev in normalized action units
  std::optional<double> guidance; // CFG weight; nullopt is the guidance-free path
};

/// Applies the cross-field rules (diffusion_bc and diffusion_kde run with M = 0).
void validate(const SamplerConfig& cfg);

/// A trained model with everything needed to turn observations into actions.
struct DiffusionPolicy {
  std::unique_ptr<diffusion::Denoiser> model;
  diffusion::VarianceSchedule schedule;
  Normalizer action_norm;
};

/// Reverse chain in normalized action space for every row of `encoding`, each
/// row drawing from its own generator. Runs T steps then `extra_steps` more at
/// tau = 1 with zero noise.
Matrix run_chain(const diffusion::Denoiser& model, const Matrix& encoding, const diffusion::VarianceSchedule& sched,
                 int extra_steps, std::optional<double> guidance, std::span<Rng> rngs);

// Single-action entry points. All return de-normalized actions.
std::vector<double> sample_diffusion_bc(const DiffusionPolicy& policy, std::span<const double> obs,
                                        const SamplerConfig& cfg, Rng& rng);
std::vector<double> sample_diffusion_x(const DiffusionPolicy& policy, std::span<const double> obs,
                                       const SamplerConfig& cfg, Rng& rng);
std::vector<double> sample_diffusion_kde(const DiffusionPolicy& policy, std::span<const double> obs,
                                         const SamplerConfig& cfg, Rng& rng);

/// Batched sampling: row r of the result uses obs row r and rngs[r]. Each row
/// equals the corresponding single-action call bit for bit.
Matrix sample_actions(const DiffusionPolicy& policy, const Matrix& obs, const SamplerConfig& cfg, std::span<Rng> rngs);

// --- kernel density ---------------------------------------------------------

/// Equal-weight mixture of isotropic Gaussians centred on the support points.
struct KdeModel {
  Matrix support;
  double bandwidth = 1.0;
};

KdeModel kde_fit(const Matrix& samples, double width);
double kde_log_density(const KdeModel& model, std::span<const double> x);
/// Log density of each support point under the model itself.
std::vector<double> kde_score_support(const KdeModel& model);
/// Index of the largest value; the lowest index wins ties.
std::size_t argmax_first(std::span<const double> values);

}  // namespace dbc::samplers
