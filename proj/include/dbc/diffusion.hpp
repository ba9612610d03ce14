#pragma once

// DDPM core: variance schedule, forward noising, the noise-prediction
// objective, the reverse step and classifier-free guidance.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "dbc/matrix.hpp"
#include "dbc/nnet.hpp"
#include "dbc/rng.hpp"

namespace dbc::diffusion {

enum class SigmaChoice : std::uint8_t { beta = 0, beta_tilde = 1 };

/// Arrays are indexed by the denoising step tau in 1..T.
class VarianceSchedule {
 public:
  VarianceSchedule() = default;

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }
  SigmaChoice sigma_choice() const { return sigma_choice_; }

  double beta(int tau) const { return beta_[index(tau)]; }
  double alpha(int tau) const { return alpha_[index(tau)]; }
  double alpha_bar(int tau) const { return alpha_bar_[index(tau)]; }
  double sigma(int tau) const { return sigma_[index(tau)]; }

  friend bool operator==(const VarianceSchedule&, const VarianceSchedule&) = default;

 private:
  friend VarianceSchedule build_schedule(int, double, double, SigmaChoice);
  std::size_t index(int tau) const;

  double beta_min_ = 0.0;
  double beta_max_ = 0.0;
  SigmaChoice sigma_choice_ = SigmaChoice::beta;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_;
};

/// Linear beta ramp from beta_min at tau=1 to beta_max at tau=T.
VarianceSchedule build_schedule(int steps, double beta_min, double beta_max, SigmaChoice sigma = SigmaChoice::beta);

/// sqrt(abar) a + sqrt(1 - abar) z
std::vector<double> forward_noise(std::span<const double> action, int tau, const VarianceSchedule& sched,
                                  std::span<const double> z);

/// (a - (1-alpha)/sqrt(1-abar) eps) / sqrt(alpha) + sigma z
void denoise_update(std::span<const double> a_tau, std::span<const double> eps, int tau, const VarianceSchedule& sched,
                    std::span<const double> z, std::span<double> out);

// ---------------------------------------------------------------------------
// Noise-prediction networks.

enum class Architecture : std::uint8_t { basic_mlp = 0, mlp_sieve = 1 };

const char* to_string(Architecture a);

struct DenoiserSpec {
  Architecture architecture = Architecture::basic_mlp;
  std::size_t obs_dim = 0;      // total, including any stacked history
  std::size_t history = 1;      // frames stacked in obs
  std::size_t action_dim = 0;
  std::size_t hidden = 128;     // trunk width
  std::size_t depth = 3;        // trunk hidden layers
  std::size_t embed_dim = 128;  // sieve encoder output width
  std::size_t time_embed_dim = 32;
  int steps = 50;               // T, used to scale raw tau inputs

  friend bool operator==(const DenoiserSpec&, const DenoiserSpec&) = default;
};

/// Activations recorded by a training forward pass.
struct Tape {
  std::vector<nnet::MlpCache> mlp;
  std::vector<nnet::DenseCache> dense;
  std::vector<Matrix> saved;
  std::vector<std::uint8_t> mask;
  bool valid = false;
};

/// epsilon(o, a_tau, tau). The observation is encoded separately so that a
/// sampler can encode once and run many denoising passes.
class Denoiser {
 public:
  virtual ~Denoiser() = default;

  const DenoiserSpec& spec() const { return spec_; }

  /// Observation features. Rows whose mask entry is non-zero are exactly zero.
  virtual Matrix encode(const Matrix& obs, std::span<const std::uint8_t> mask) const = 0;
  /// Features of a fully masked observation (the unconditional model).
  Matrix null_encoding(std::size_t rows) const { return Matrix(rows, encoding_dim(), 0.0); }
  virtual std::size_t encoding_dim() const = 0;
  virtual Matrix predict(const Matrix& encoding, const Matrix& noisy, std::span<const int> taus) const = 0;

  virtual Matrix forward_train(const Matrix& obs, std::span<const std::uint8_t> mask, const Matrix& noisy,
                               std::span<const int> taus, Tape& tape) const = 0;
  /// Accumulates parameter gradients; returns nothing since inputs are data.
  virtual void backward(const Tape& tape, const Matrix& d_eps) = 0;

  virtual std::vector<nnet::DenseLayer*> layers() = 0;
  std::vector<const nnet::DenseLayer*> layers() const;
  std::vector<nnet::ParamRef> params();
  void zero_grad();

  virtual std::unique_ptr<Denoiser> clone() const = 0;

 protected:
  explicit Denoiser(DenoiserSpec spec) : spec_(spec) {}
  void check_inputs(const Matrix& noisy, std::span<const int> taus, std::size_t rows) const;
  DenoiserSpec spec_;
};

/// Fresh network with the standard init.
std::unique_ptr<Denoiser> make_denoiser(const DenoiserSpec& spec, Rng& rng);
/// Network built from stored parameters (layer order as returned by layers()).
std::unique_ptr<Denoiser> restore_denoiser(const DenoiserSpec& spec, std::vector<nnet::DenseLayer> layers);

// ---------------------------------------------------------------------------
// Training.

struct NoisedBatch {
  std::vector<int> taus;
  Matrix noise;      // z
  Matrix noisy;      // a_tau
  std::vector<std::uint8_t> mask;
};

/// Draws tau ~ U{1..T}, z ~ N(0,I) and the conditioning mask for each row.
NoisedBatch draw_noised_batch(const Matrix& actions, const VarianceSchedule& sched, double dropout_prob, Rng& rng);

/// Mean over rows of ||prediction - z||^2.
double ddpm_loss(const Matrix& prediction, const Matrix& noise);

struct TrainStepResult {
  double loss = 0.0;
  std::size_t masked_rows = 0;
};

/// One optimizer step on the noise-prediction loss. Returns the pre-step loss.
TrainStepResult ddpm_training_step(Denoiser& model, const Matrix& obs, const Matrix& actions,
                                   const VarianceSchedule& sched, double dropout_prob, Rng& rng,
                                   nnet::OptimizerState& opt, double learning_rate);

// ---------------------------------------------------------------------------
// Sampling primitives.

struct GuidanceConfig {
  double weight = 0.0;
  double dropout = 0.1;
};

void validate(const GuidanceConfig& cfg);

/// (1+w) eps_cond - w eps_uncond
Matrix cfg_epsilon(const Denoiser& model, const Matrix& cond_encoding, const Matrix& noisy, std::span<const int> taus,
                   double weight);

/// One reverse step for a batch. `z` rows are used as given (pass zeros at tau = 1).
/// With a guidance weight the prediction is the CFG combination.
Matrix denoise_step(const Denoiser& model, const Matrix& encoding, const Matrix& a_tau, int tau,
                    const VarianceSchedule& sched, const Matrix& z, std::optional<double> guidance = std::nullopt);

}  // namespace dbc::diffusion
