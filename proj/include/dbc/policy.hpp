#pragma once

// Diffusion policy training over a demonstration dataset, and the shared
// checkpoint container for diffusion and baseline models.

#include <string>
#include <variant>
#include <vector>

#include "dbc/baselines.hpp"
#include "dbc/diffusion.hpp"
#include "dbc/envs.hpp"
#include "dbc/samplers.hpp"

namespace dbc {

struct DiffusionTrainConfig {
  diffusion::DenoiserSpec net;  // obs/action widths are taken from the dataset
  double beta_min = 1e-4;
  double beta_max = 0.02;
  diffusion::SigmaChoice sigma = diffusion::SigmaChoice::beta;
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  bool cosine_decay = true;
  double dropout = 0.1;
};

struct TrainingLog {
  std::vector<double> epoch_loss;
};

samplers::DiffusionPolicy train_diffusion_policy(const envs::DemoDataset& data, const DiffusionTrainConfig& cfg,
                                                 Rng& rng, TrainingLog* log = nullptr);

// --- checkpoints --------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "DBCCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct DiffusionCheckpoint {
  samplers::DiffusionPolicy policy;
  double train_dropout = 0.0;
};

using Checkpoint = std::variant<DiffusionCheckpoint, baselines::BaselineModel>;

void save_checkpoint(const std::string& path, const samplers::DiffusionPolicy& policy, double train_dropout);
void save_checkpoint(const std::string& path, const baselines::BaselineModel& model);
/// Throws IoError for a missing file and CorruptionError on any integrity failure.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace dbc
