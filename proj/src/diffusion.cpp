#include "dbc/diffusion.hpp"

#include <algorithm>
#include <cmath>

namespace dbc::diffusion {

// --- schedule ---------------------------------------------------------------

std::size_t VarianceSchedule::index(int tau) const {
  if (tau < 1 || tau > steps())
    throw DomainError("denoising step " + std::to_string(tau) + " outside 1.." + std::to_string(steps()));
  return static_cast<std::size_t>(tau - 1);
}

VarianceSchedule build_schedule(int steps, double beta_min, double beta_max, SigmaChoice sigma) {
  if (steps < 1) throw ConfigError("diffusion steps must be >= 1");
  if (!(beta_min > 0.0) || !(beta_min <= beta_max) || !(beta_max < 1.0))
    throw ConfigError("beta endpoints must satisfy 0 < beta_min <= beta_max < 1");
  VarianceSchedule s;
  s.beta_min_ = beta_min;
  s.beta_max_ = beta_max;
  s.sigma_choice_ = sigma;
  const auto n = static_cast<std::size_t>(steps);
  s.beta_.resize(n);
  s.alpha_.resize(n);
  s.alpha_bar_.resize(n);
  s.sigma_.resize(n);
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    s.beta_[i] = beta_min + (beta_max - beta_min) * frac;
    s.alpha_[i] = 1.0 - s.beta_[i];
    running *= s.alpha_[i];
    s.alpha_bar_[i] = running;
    if (sigma == SigmaChoice::beta) {
      s.sigma_[i] = std::sqrt(s.beta_[i]);
    } else {
      const double prev = i == 0 ? 1.0 : s.alpha_bar_[i - 1];
      s.sigma_[i] = std::sqrt((1.0 - prev) / (1.0 - s.alpha_bar_[i]) * s.beta_[i]);
    }
  }
  return s;
}

std::vector<double> forward_noise(std::span<const double> action, int tau, const VarianceSchedule& sched,
                                  std::span<const double> z) {
  if (action.size() != z.size()) throw ShapeError("forward_noise: action and noise sizes differ");
  const double ab = sched.alpha_bar(tau);
  const double keep = std::sqrt(ab);
  const double add = std::sqrt(1.0 - ab);
  std::vector<double> out(action.size());
  for (std::size_t i = 0; i < action.size(); ++i) out[i] = keep * action[i] + add * z[i];
  return out;
}

void denoise_update(std::span<const double> a_tau, std::span<const double> eps, int tau, const VarianceSchedule& sched,
                    std::span<const double> z, std::span<double> out) {
  if (a_tau.size() != eps.size() || a_tau.size() != z.size() || a_tau.size() != out.size())
    throw ShapeError("denoise_update: size mismatch");
  const double alpha = sched.alpha(tau);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
  const double eps_coef = (1.0 - alpha) / std::sqrt(1.0 - sched.alpha_bar(tau));
  const double sigma = sched.sigma(tau);
  for (std::size_t i = 0; i < a_tau.size(); ++i)
    out[i] = inv_sqrt_alpha * (a_tau[i] - eps_coef * eps[i]) + sigma * z[i];
}

// --- denoisers --------------------------------------------------------------

const char* to_string(Architecture a) { return a == Architecture::basic_mlp ? "basic_mlp" : "mlp_sieve"; }

std::vector<const nnet::DenseLayer*> Denoiser::layers() const {
  auto mut = const_cast<Denoiser*>(this)->layers();
  return {mut.begin(), mut.end()};
}

std::vector<nnet::ParamRef> Denoiser::params() {
  std::vector<nnet::ParamRef> out;
  int idx = 0;
  for (auto* L : layers()) {
    out.push_back({L->weight, L->grad_weight, idx});
    out.push_back({L->bias, L->grad_bias, idx});
    ++idx;
  }
  return out;
}

void Denoiser::zero_grad() {
  for (auto* L : layers()) L->zero_grad();
}

void Denoiser::check_inputs(const Matrix& noisy, std::span<const int> taus, std::size_t rows) const {
  require_cols(noisy, spec_.action_dim, "noisy action");
  if (noisy.rows() != rows || taus.size() != rows) throw ShapeError("denoiser batch sizes disagree");
  for (int t : taus)
    if (t < 1 || t > spec_.steps) throw DomainError("denoising step out of range");
}

namespace {

Matrix time_features(std::span<const int> taus, std::size_t dim) {
  const nnet::TimeEmbedding emb{dim, 10000.0};
  Matrix out(taus.size(), dim);
  // Chains share one tau per step, so reuse the previous row when it matches.
  for (std::size_t r = 0; r < taus.size(); ++r) {
    if (r > 0 && taus[r] == taus[r - 1]) {
      std::copy(out.row(r - 1).begin(), out.row(r - 1).end(), out.row(r).begin());
    } else {
      nnet::sinusoidal_embed_into(taus[r], emb, out.row(r));
    }
  }
  return out;
}

void zero_masked_rows(Matrix& m, std::span<const std::uint8_t> mask) {
  if (mask.empty()) return;
  if (mask.size() != m.rows()) throw ShapeError("mask length does not match batch");
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (mask[r]) std::fill(m.row(r).begin(), m.row(r).end(), 0.0);
}

// [a_tau, o, time features] -> MLP -> eps
class BasicMlpDenoiser final : public Denoiser {
 public:
  BasicMlpDenoiser(const DenoiserSpec& spec, nnet::Mlp mlp) : Denoiser(spec), mlp_(std::move(mlp)) {
    if (mlp_.input_size() != spec.action_dim + spec.obs_dim + spec.time_embed_dim ||
        mlp_.output_size() != spec.action_dim)
      throw ShapeError("basic MLP denoiser layer shapes do not match spec");
  }

  static std::unique_ptr<Denoiser> create(const DenoiserSpec& spec, Rng& rng) {
    std::vector<std::size_t> widths{spec.action_dim + spec.obs_dim + spec.time_embed_dim};
    for (std::size_t l = 0; l < spec.depth; ++l) widths.push_back(spec.hidden);
    widths.push_back(spec.action_dim);
    return std::make_unique<BasicMlpDenoiser>(spec,
                                              nnet::Mlp(widths, nnet::Activation::gelu, nnet::Activation::identity, rng));
  }

  std::size_t encoding_dim() const override { return spec_.obs_dim; }

  Matrix encode(const Matrix& obs, std::span<const std::uint8_t> mask) const override {
    require_cols(obs, spec_.obs_dim, "observation");
    Matrix enc = obs;
    zero_masked_rows(enc, mask);
    return enc;
  }

  Matrix predict(const Matrix& encoding, const Matrix& noisy, std::span<const int> taus) const override {
    check_inputs(noisy, taus, encoding.rows());
    return mlp_.forward(assemble(encoding, noisy, taus));
  }

  Matrix forward_train(const Matrix& obs, std::span<const std::uint8_t> mask, const Matrix& noisy,
                       std::span<const int> taus, Tape& tape) const override {
    const Matrix enc = encode(obs, mask);
    check_inputs(noisy, taus, enc.rows());
    tape = Tape{};
    tape.mlp.resize(1);
    Matrix eps = mlp_.forward(assemble(enc, noisy, taus), tape.mlp[0]);
    tape.valid = true;
    return eps;
  }

  void backward(const Tape& tape, const Matrix& d_eps) override {
    if (!tape.valid || tape.mlp.size() != 1) throw StateError("denoiser backward without a training forward pass");
    mlp_.backward(tape.mlp[0], d_eps);
  }

  std::vector<nnet::DenseLayer*> layers() override {
    std::vector<nnet::DenseLayer*> out;
    for (auto& L : mlp_.layers()) out.push_back(&L);
    return out;
  }

  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<BasicMlpDenoiser>(*this); }

 private:
  Matrix assemble(const Matrix& enc, const Matrix& noisy, std::span<const int> taus) const {
    const Matrix t = time_features(taus, spec_.time_embed_dim);
    const Matrix* parts[] = {&noisy, &enc, &t};
    return hconcat(parts);
  }

  nnet::Mlp mlp_;
};

// Separate encoders for observation frames, time and action feed a residual
// GELU trunk. Wiring, with side = [a_tau, tau/T]:
//   h1 = gelu(L0 [o_e, t_e, a_e])
//   h_{l+1} = gelu(L_l [h_l, side]) + h_l      for l = 1..depth-1
//   eps = L_depth [h_depth, side]
class SieveDenoiser final : public Denoiser {
 public:
  SieveDenoiser(const DenoiserSpec& spec, nnet::Mlp obs_enc, nnet::Mlp time_enc, nnet::Mlp act_enc,
                std::vector<nnet::DenseLayer> trunk)
      : Denoiser(spec),
        obs_enc_(std::move(obs_enc)),
        time_enc_(std::move(time_enc)),
        act_enc_(std::move(act_enc)),
        trunk_(std::move(trunk)) {
    validate_shapes();
  }

  static std::unique_ptr<Denoiser> create(const DenoiserSpec& spec, Rng& rng) {
    if (spec.history == 0 || spec.obs_dim % spec.history != 0)
      throw ConfigError("observation width must be a multiple of the history length");
    const std::size_t E = spec.embed_dim;
    const std::size_t frame = spec.obs_dim / spec.history;
    const std::size_t obs_w[] = {frame, E, E};
    const std::size_t time_w[] = {E, E, E};
    const std::size_t act_w[] = {spec.action_dim, E, E};
    nnet::Mlp obs_enc(obs_w, nnet::Activation::leaky_relu, nnet::Activation::identity, rng);
    nnet::Mlp time_enc(time_w, nnet::Activation::leaky_relu, nnet::Activation::identity, rng);
    nnet::Mlp act_enc(act_w, nnet::Activation::leaky_relu, nnet::Activation::identity, rng);
    std::vector<nnet::DenseLayer> trunk;
    const std::size_t side = spec.action_dim + 1;
    trunk.emplace_back(spec.history * E + 2 * E, spec.hidden, nnet::Activation::gelu);
    for (std::size_t l = 1; l < spec.depth; ++l) trunk.emplace_back(spec.hidden + side, spec.hidden, nnet::Activation::gelu);
    trunk.emplace_back(spec.hidden + side, spec.action_dim, nnet::Activation::identity);
    for (auto& L : trunk) L.init_uniform(rng);
    return std::make_unique<SieveDenoiser>(spec, std::move(obs_enc), std::move(time_enc), std::move(act_enc),
                                           std::move(trunk));
  }

  static std::unique_ptr<Denoiser> restore(const DenoiserSpec& spec, std::vector<nnet::DenseLayer> layers) {
    if (layers.size() != 6 + spec.depth + 1) throw ShapeError("MLP sieve checkpoint layer count");
    auto take = [&](std::size_t first, std::size_t n) {
      return std::vector<nnet::DenseLayer>(std::make_move_iterator(layers.begin() + static_cast<std::ptrdiff_t>(first)),
                                           std::make_move_iterator(layers.begin() + static_cast<std::ptrdiff_t>(first + n)));
    };
    return std::make_unique<SieveDenoiser>(spec, nnet::Mlp(take(0, 2)), nnet::Mlp(take(2, 2)), nnet::Mlp(take(4, 2)),
                                           take(6, spec.depth + 1));
  }

  std::size_t encoding_dim() const override { return spec_.history * spec_.embed_dim; }

  Matrix encode(const Matrix& obs, std::span<const std::uint8_t> mask) const override {
    require_cols(obs, spec_.obs_dim, "observation");
    Matrix enc = encode_frames(obs, nullptr);
    zero_masked_rows(enc, mask);
    return enc;
  }

  Matrix predict(const Matrix& encoding, const Matrix& noisy, std::span<const int> taus) const override {
    check_inputs(noisy, taus, encoding.rows());
    require_cols(encoding, encoding_dim(), "observation encoding");
    const Matrix te = time_enc_.forward(time_features(taus, spec_.embed_dim));
    const Matrix ae = act_enc_.forward(noisy);
    const Matrix side = side_inputs(noisy, taus);
    const Matrix* parts[] = {&encoding, &te, &ae};
    Matrix h = nnet::dense_forward(trunk_[0], hconcat(parts));
    for (std::size_t l = 1; l < spec_.depth; ++l) {
      const Matrix* in[] = {&h, &side};
      Matrix next = nnet::dense_forward(trunk_[l], hconcat(in));
      add_into(next, h);
      h = std::move(next);
    }
    const Matrix* last[] = {&h, &side};
    return nnet::dense_forward(trunk_.back(), hconcat(last));
  }

  Matrix forward_train(const Matrix& obs, std::span<const std::uint8_t> mask, const Matrix& noisy,
                       std::span<const int> taus, Tape& tape) const override {
    require_cols(obs, spec_.obs_dim, "observation");
    check_inputs(noisy, taus, obs.rows());
    tape = Tape{};
    tape.mlp.resize(3);
    tape.dense.resize(trunk_.size());
    tape.mask.assign(mask.begin(), mask.end());

    Matrix enc = encode_frames(obs, &tape.mlp[0]);
    zero_masked_rows(enc, mask);
    const Matrix te = time_enc_.forward(time_features(taus, spec_.embed_dim), tape.mlp[1]);
    const Matrix ae = act_enc_.forward(noisy, tape.mlp[2]);
    const Matrix side = side_inputs(noisy, taus);
    const Matrix* parts[] = {&enc, &te, &ae};
    Matrix h = nnet::dense_forward(trunk_[0], hconcat(parts), &tape.dense[0]);
    for (std::size_t l = 1; l < spec_.depth; ++l) {
      const Matrix* in[] = {&h, &side};
      Matrix next = nnet::dense_forward(trunk_[l], hconcat(in), &tape.dense[l]);
      add_into(next, h);
      h = std::move(next);
    }
    const Matrix* last[] = {&h, &side};
    Matrix eps = nnet::dense_forward(trunk_.back(), hconcat(last), &tape.dense.back());
    tape.valid = true;
    return eps;
  }

  void backward(const Tape& tape, const Matrix& d_eps) override {
    if (!tape.valid || tape.mlp.size() != 3 || tape.dense.size() != trunk_.size())
      throw StateError("denoiser backward without a training forward pass");
    const std::size_t H = spec_.hidden;
    Matrix dx = nnet::dense_backward(trunk_.back(), tape.dense.back(), d_eps);
    Matrix dh = column_slice(dx, 0, H);
    for (std::size_t l = spec_.depth; l-- > 1;) {
      Matrix dl = column_slice(nnet::dense_backward(trunk_[l], tape.dense[l], dh), 0, H);
      add_into(dl, dh);  // residual path
      dh = std::move(dl);
    }
    const Matrix d0 = nnet::dense_backward(trunk_[0], tape.dense[0], dh);
    const std::size_t enc_w = encoding_dim();
    const std::size_t E = spec_.embed_dim;
    Matrix d_enc = column_slice(d0, 0, enc_w);
    time_enc_.backward(tape.mlp[1], column_slice(d0, enc_w, E));
    act_enc_.backward(tape.mlp[2], column_slice(d0, enc_w + E, E));
    zero_masked_rows(d_enc, tape.mask);
    // (B x history*E) and (B*history x E) share the same row-major layout.
    obs_enc_.backward(tape.mlp[0], Matrix(d_enc.rows() * spec_.history, E, std::move(d_enc.storage())));
  }

  std::vector<nnet::DenseLayer*> layers() override {
    std::vector<nnet::DenseLayer*> out;
    for (auto* m : {&obs_enc_, &time_enc_, &act_enc_})
      for (auto& L : m->layers()) out.push_back(&L);
    for (auto& L : trunk_) out.push_back(&L);
    return out;
  }

  std::unique_ptr<Denoiser> clone() const override { return std::make_unique<SieveDenoiser>(*this); }

 private:
  void validate_shapes() const {
    const std::size_t E = spec_.embed_dim;
    const std::size_t side = spec_.action_dim + 1;
    bool ok = spec_.history > 0 && spec_.obs_dim % spec_.history == 0 &&
              obs_enc_.input_size() == spec_.obs_dim / spec_.history && obs_enc_.output_size() == E &&
              time_enc_.input_size() == E && time_enc_.output_size() == E && act_enc_.input_size() == spec_.action_dim &&
              act_enc_.output_size() == E && trunk_.size() == spec_.depth + 1 &&
              trunk_[0].in == spec_.history * E + 2 * E && trunk_.back().out == spec_.action_dim;
    for (std::size_t l = 1; ok && l < trunk_.size(); ++l)
      ok = trunk_[l].in == spec_.hidden + side && trunk_[l - 1].out == spec_.hidden;
    if (!ok) throw ShapeError("MLP sieve layer shapes do not match spec");
  }

  Matrix encode_frames(const Matrix& obs, nnet::MlpCache* cache) const {
    const std::size_t frame = spec_.obs_dim / spec_.history;
    const Matrix frames(obs.rows() * spec_.history, frame, obs.storage());
    Matrix e = cache ? obs_enc_.forward(frames, *cache) : obs_enc_.forward(frames);
    return Matrix(obs.rows(), spec_.history * spec_.embed_dim, std::move(e.storage()));
  }

  Matrix side_inputs(const Matrix& noisy, std::span<const int> taus) const {
    Matrix side(noisy.rows(), spec_.action_dim + 1);
    for (std::size_t r = 0; r < noisy.rows(); ++r) {
      auto src = noisy.row(r);
      auto dst = side.row(r);
      std::copy(src.begin(), src.end(), dst.begin());
      dst[spec_.action_dim] = static_cast<double>(taus[r]) / static_cast<double>(spec_.steps);
    }
    return side;
  }

  static void add_into(Matrix& dst, const Matrix& src) {
    auto d = dst.flat();
    auto s = src.flat();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }

  nnet::Mlp obs_enc_;
  nnet::Mlp time_enc_;
  nnet::Mlp act_enc_;
  std::vector<nnet::DenseLayer> trunk_;
};

void validate_spec(const DenoiserSpec& spec) {
  if (spec.obs_dim == 0 || spec.action_dim == 0) throw ConfigError("denoiser needs non-empty observation and action");
  if (spec.hidden == 0 || spec.depth == 0) throw ConfigError("denoiser trunk must have at least one hidden layer");
  if (spec.steps < 1) throw ConfigError("diffusion steps must be >= 1");
  if (spec.architecture == Architecture::basic_mlp && (spec.time_embed_dim == 0 || spec.time_embed_dim % 2))
    throw ConfigError("time embedding dimension must be even");
  if (spec.architecture == Architecture::mlp_sieve && (spec.embed_dim == 0 || spec.embed_dim % 2))
    throw ConfigError("embedding dimension must be even");
}

}  // namespace

std::unique_ptr<Denoiser> make_denoiser(const DenoiserSpec& spec, Rng& rng) {
  validate_spec(spec);
  if (spec.architecture == Architecture::basic_mlp) return BasicMlpDenoiser::create(spec, rng);
  return SieveDenoiser::create(spec, rng);
}

std::unique_ptr<Denoiser> restore_denoiser(const DenoiserSpec& spec, std::vector<nnet::DenseLayer> layers) {
  validate_spec(spec);
  if (spec.architecture == Architecture::basic_mlp)
    return std::make_unique<BasicMlpDenoiser>(spec, nnet::Mlp(std::move(layers)));
  return SieveDenoiser::restore(spec, std::move(layers));
}

// --- training ---------------------------------------------------------------

NoisedBatch draw_noised_batch(const Matrix& actions, const VarianceSchedule& sched, double dropout_prob, Rng& rng) {
  if (actions.rows() == 0) throw ShapeError("empty training batch");
  if (!(dropout_prob >= 0.0 && dropout_prob <= 1.0)) throw ConfigError("dropout probability must be in [0,1]");
  const std::size_t B = actions.rows();
  const std::size_t A = actions.cols();
  NoisedBatch b;
  b.taus.resize(B);
  b.mask.resize(B);
  b.noise = Matrix(B, A);
  b.noisy = Matrix(B, A);
  for (std::size_t r = 0; r < B; ++r) {
    b.taus[r] = static_cast<int>(rng.integer(1, sched.steps()));
    rng.fill_normal(b.noise.row(r));
    b.mask[r] = rng.bernoulli(dropout_prob) ? 1 : 0;
    const auto noisy = forward_noise(actions.row(r), b.taus[r], sched, b.noise.row(r));
    std::copy(noisy.begin(), noisy.end(), b.noisy.row(r).begin());
  }
  return b;
}

double ddpm_loss(const Matrix& prediction, const Matrix& noise) {
  if (prediction.rows() != noise.rows() || prediction.cols() != noise.cols())
    throw ShapeError("loss: prediction and noise shapes differ");
  if (prediction.rows() == 0) throw ShapeError("loss over an empty batch");
  double total = 0.0;
  auto p = prediction.flat();
  auto z = noise.flat();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - z[i];
    total += d * d;
  }
  return total / static_cast<double>(prediction.rows());
}

TrainStepResult ddpm_training_step(Denoiser& model, const Matrix& obs, const Matrix& actions,
                                   const VarianceSchedule& sched, double dropout_prob, Rng& rng,
                                   nnet::OptimizerState& opt, double learning_rate) {
  if (obs.rows() != actions.rows()) throw ShapeError("observation and action batches differ in length");
  NoisedBatch batch = draw_noised_batch(actions, sched, dropout_prob, rng);
  Tape tape;
  const Matrix eps = model.forward_train(obs, batch.mask, batch.noisy, batch.taus, tape);
  const double loss = ddpm_loss(eps, batch.noise);
  if (!std::isfinite(loss)) throw TrainingError("non-finite diffusion loss");

  Matrix grad(eps.rows(), eps.cols());
  const double scale = 2.0 / static_cast<double>(eps.rows());
  for (std::size_t i = 0; i < grad.size(); ++i) grad.flat()[i] = scale * (eps.flat()[i] - batch.noise.flat()[i]);
  model.zero_grad();
  model.backward(tape, grad);
  const auto params = model.params();
  nnet::adam_step(params, opt, learning_rate);

  TrainStepResult out;
  out.loss = loss;
  out.masked_rows = static_cast<std::size_t>(std::count(batch.mask.begin(), batch.mask.end(), 1));
  return out;
}

// --- sampling primitives ------------------------------------------------------

void validate(const GuidanceConfig& cfg) {
  if (!(cfg.weight >= 0.0)) throw ConfigError("guidance weight must be >= 0");
  if (!(cfg.dropout >= 0.0 && cfg.dropout <= 1.0)) throw ConfigError("conditioning dropout must be in [0,1]");
}

Matrix cfg_epsilon(const Denoiser& model, const Matrix& cond_encoding, const Matrix& noisy, std::span<const int> taus,
                   double weight) {
  if (!(weight >= 0.0)) throw ConfigError("guidance weight must be >= 0");
  Matrix cond = model.predict(cond_encoding, noisy, taus);
  const Matrix uncond = model.predict(model.null_encoding(noisy.rows()), noisy, taus);
  auto c = cond.flat();
  auto u = uncond.flat();
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = (1.0 + weight) * c[i] - weight * u[i];
  return cond;
}

Matrix denoise_step(const Denoiser& model, const Matrix& encoding, const Matrix& a_tau, int tau,
                    const VarianceSchedule& sched, const Matrix& z, std::optional<double> guidance) {
  if (z.rows() != a_tau.rows() || z.cols() != a_tau.cols()) throw ShapeError("denoise_step: noise shape");
  const std::vector<int> taus(a_tau.rows(), tau);
  const Matrix eps =
      guidance ? cfg_epsilon(model, encoding, a_tau, taus, *guidance) : model.predict(encoding, a_tau, taus);
  Matrix out(a_tau.rows(), a_tau.cols());
  for (std::size_t r = 0; r < a_tau.rows(); ++r) denoise_update(a_tau.row(r), eps.row(r), tau, sched, z.row(r), out.row(r));
  return out;
}

}  // namespace dbc::diffusion
