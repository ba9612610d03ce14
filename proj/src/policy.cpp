#include "dbc/policy.hpp"

#include <utility>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace dbc {

samplers::DiffusionPolicy train_diffusion_policy(const envs::DemoDataset& data, const DiffusionTrainConfig& cfg,
                                                 Rng& rng, TrainingLog* log) {
  if (data.size() == 0) throw ConfigError("empty dataset");
  if (cfg.batch_size < 1 || cfg.epochs < 1) throw ConfigError("batch size and epochs must be >= 1");
  samplers::DiffusionPolicy policy;
  policy.schedule = diffusion::build_schedule(cfg.net.steps, cfg.beta_min, cfg.beta_max, cfg.sigma);
  policy.action_norm = data.action_normalizer();
  diffusion::DenoiserSpec spec = cfg.net;
  spec.obs_dim = data.observations.cols();
  spec.action_dim = data.actions.cols();
  spec.history = data.history;
  Rng init = rng.substream("init");
  policy.model = diffusion::make_denoiser(spec, init);

  const Matrix actions = policy.action_norm.normalize(data.actions);
  const std::size_t N = data.size();
  const std::size_t steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  const auto total_steps = static_cast<std::int64_t>(steps_per_epoch * cfg.epochs);
  Rng shuffle = rng.substream("shuffle");
  Rng noise = rng.substream("noise");
  nnet::OptimizerState opt;
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle.engine());
    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * cfg.batch_size;
      const std::size_t B = std::min(cfg.batch_size, N - lo);
      Matrix obs(B, spec.obs_dim), act(B, spec.action_dim);
      for (std::size_t i = 0; i < B; ++i) {
        const std::size_t src = order[lo + i];
        std::copy(data.observations.row(src).begin(), data.observations.row(src).end(), obs.row(i).begin());
        std::copy(actions.row(src).begin(), actions.row(src).end(), act.row(i).begin());
      }
      const double lr =
          cfg.cosine_decay ? nnet::cosine_learning_rate(cfg.learning_rate, opt.step, total_steps) : cfg.learning_rate;
      const auto res =
          diffusion::ddpm_training_step(*policy.model, obs, act, policy.schedule, cfg.dropout, noise, opt, lr);
      epoch_loss += res.loss * static_cast<double>(B);
    }
    if (log) log->epoch_loss.push_back(epoch_loss / static_cast<double>(N));
  }
  return policy;
}

// --- checkpoints --------------------------------------------------------------

namespace {

enum class Family : std::uint8_t { diffusion = 0, baseline = 1 };

void write_normalizer(nnet::ByteWriter& w, const Normalizer& n) {
  w.u64(n.dim());
  w.f64s(n.min);
  w.f64s(n.max);
}

Normalizer read_normalizer(nnet::ByteReader& r) {
  const std::uint64_t d = r.u64();
  if (d > r.remaining()) throw CorruptionError("implausible normalizer size");
  Normalizer n;
  n.min.resize(d);
  n.max.resize(d);
  r.f64s(n.min);
  r.f64s(n.max);
  return n;
}

std::vector<nnet::DenseLayer> copy_layers(const std::vector<const nnet::DenseLayer*>& ptrs) {
  std::vector<nnet::DenseLayer> out;
  out.reserve(ptrs.size());
  for (const auto* p : ptrs) out.push_back(*p);
  return out;
}

}  // namespace

void save_checkpoint(const std::string& path, const samplers::DiffusionPolicy& policy, double train_dropout) {
  nnet::ByteWriter w;
  w.u8(static_cast<std::uint8_t>(Family::diffusion));
  const auto& s = policy.model->spec();
  w.u8(static_cast<std::uint8_t>(s.architecture));
  w.u64(s.obs_dim);
  w.u64(s.history);
  w.u64(s.action_dim);
  w.u64(s.hidden);
  w.u64(s.depth);
  w.u64(s.embed_dim);
  w.u64(s.time_embed_dim);
  // Schedule parameters travel with the weights.
  w.u64(static_cast<std::uint64_t>(policy.schedule.steps()));
  w.f64(policy.schedule.beta_min());
  w.f64(policy.schedule.beta_max());
  w.u8(static_cast<std::uint8_t>(policy.schedule.sigma_choice()));
  w.f64(train_dropout);
  write_normalizer(w, policy.action_norm);
  nnet::write_layers(w, copy_layers(std::as_const(*policy.model).layers()));
  nnet::write_container(path, kCheckpointMagic, kCheckpointVersion, w.bytes());
}

void save_checkpoint(const std::string& path, const baselines::BaselineModel& model) {
  model.validate();
  nnet::ByteWriter w;
  w.u8(static_cast<std::uint8_t>(Family::baseline));
  w.u8(static_cast<std::uint8_t>(model.kind));
  w.u64(model.obs_dim);
  w.u64(model.action_dim);
  w.u64(model.bins);
  w.u64(model.bin_edges.size());
  for (const auto& e : model.bin_edges) {
    w.u64(e.size());
    w.f64s(e);
  }
  w.u64(model.centroids.rows());
  w.u64(model.centroids.cols());
  w.f64s(model.centroids.flat());
  write_normalizer(w, model.action_norm);
  nnet::write_layers(w, model.trunk.layers());
  nnet::write_container(path, kCheckpointMagic, kCheckpointVersion, w.bytes());
}

Checkpoint load_checkpoint(const std::string& path) {
  const auto payload = nnet::read_container(path, kCheckpointMagic, kCheckpointVersion);
  nnet::ByteReader r(payload);
  try {
    const auto family = r.u8();
    if (family == static_cast<std::uint8_t>(Family::diffusion)) {
      diffusion::DenoiserSpec s;
      const auto arch = r.u8();
      if (arch > 1) throw CorruptionError("unknown architecture tag");
      s.architecture = static_cast<diffusion::Architecture>(arch);
      s.obs_dim = r.u64();
      s.history = r.u64();
      s.action_dim = r.u64();
      s.hidden = r.u64();
      s.depth = r.u64();
      s.embed_dim = r.u64();
      s.time_embed_dim = r.u64();
      const auto steps = r.u64();
      const double bmin = r.f64();
      const double bmax = r.f64();
      const auto sigma = r.u8();
      if (sigma > 1 || steps == 0 || steps > 100000) throw CorruptionError("bad schedule header");
      s.steps = static_cast<int>(steps);
      DiffusionCheckpoint ck;
      ck.train_dropout = r.f64();
      ck.policy.schedule = diffusion::build_schedule(s.steps, bmin, bmax, static_cast<diffusion::SigmaChoice>(sigma));
      ck.policy.action_norm = read_normalizer(r);
      ck.policy.model = diffusion::restore_denoiser(s, nnet::read_layers(r));
      if (!r.at_end()) throw CorruptionError("trailing bytes in checkpoint");
      return ck;
    }
    if (family == static_cast<std::uint8_t>(Family::baseline)) {
      baselines::BaselineModel m;
      const auto kind = r.u8();
      if (kind > 3) throw CorruptionError("unknown baseline kind");
      m.kind = static_cast<baselines::Kind>(kind);
      m.obs_dim = r.u64();
      m.action_dim = r.u64();
      m.bins = r.u64();
      const auto dims = r.u64();
      if (dims > r.remaining()) throw CorruptionError("implausible bin table");
      for (std::uint64_t d = 0; d < dims; ++d) {
        const auto n = r.u64();
        if (n > r.remaining()) throw CorruptionError("implausible bin table");
        std::vector<double> e(n);
        r.f64s(e);
        m.bin_edges.push_back(std::move(e));
      }
      const auto kr = r.u64();
      const auto kc = r.u64();
      if (kr * kc > r.remaining()) throw CorruptionError("implausible centroid table");
      m.centroids = Matrix(kr, kc);
      r.f64s(m.centroids.flat());
      m.action_norm = read_normalizer(r);
      m.trunk = nnet::Mlp(nnet::read_layers(r));
      if (!r.at_end()) throw CorruptionError("trailing bytes in checkpoint");
      m.validate();
      return m;
    }
    throw CorruptionError("unknown model family");
  } catch (const ShapeError& e) {
    throw CorruptionError(path + ": " + e.what());
  } catch (const ConfigError& e) {
    throw CorruptionError(path + ": " + e.what());
  } catch (const DomainError& e) {
    throw CorruptionError(path + ": " + e.what());
  }
}

}  // namespace dbc
