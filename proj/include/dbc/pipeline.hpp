#pragma once

// Run configuration, artifact persistence and the experiment commands behind
// the `dbc` executable.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dbc/diffusion.hpp"
#include "dbc/metrics.hpp"
#include "dbc/policy.hpp"
#include "dbc/samplers.hpp"

namespace dbc::pipeline {

inline constexpr const char* kToolkitVersion = "0.1.0";

enum class Environment { claw, gridworld };
enum class Method { diffusion_bc, diffusion_x, diffusion_kde, mse, discretised, kmeans, kmeans_residual };

const char* to_string(Environment e);
const char* to_string(Method m);
bool is_diffusion(Method m);

struct RunConfig {
  Environment environment = Environment::claw;
  Method method = Method::diffusion_bc;
  std::uint64_t seed = 0;
  std::string output_dir = "run";

  diffusion::Architecture architecture = diffusion::Architecture::basic_mlp;
  std::size_t hidden = 128;
  std::size_t depth = 3;
  std::size_t embed_dim = 128;
  std::size_t time_embed_dim = 32;

  std::size_t data_size = 20000;  // claw rows or grid-world rollouts
  std::size_t history = 1;
  double p_right = 0.1;

  int steps = 50;
  double beta_min = 1e-4;
  double beta_max = 0.02;
  diffusion::SigmaChoice sigma = diffusion::SigmaChoice::beta;

  int extra_steps = 0;
  std::size_t kde_samples = 100;
  double kde_width = 0.4;
  std::optional<double> guidance;

  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  bool cosine_decay = true;
  double dropout = 0.1;

  std::size_t bins = 20;
  std::size_t clusters = 10;

  std::size_t eval_reference_size = 7000;
  std::size_t eval_emd_points = 500;
  std::size_t eval_knn = 10;

  /// Keys given explicitly by the user (file or flags).
  std::set<std::string> explicit_keys;

  samplers::SamplerConfig sampler() const;
  DiffusionTrainConfig diffusion_training() const;
  baselines::BaselineConfig baseline_training() const;
};

/// Every accepted key, in canonical order.
const std::vector<std::string>& config_keys();

/// Defaults that depend on the environment, before any user value.
RunConfig default_config(Environment env, Method method);

/// Parses a key=value or JSON config text plus dotted-key overrides. Unknown
/// keys, type mismatches and cross-field violations throw ConfigError naming
/// the key.
RunConfig parse_config(const std::string& text, const std::map<std::string, std::string>& overrides = {});
RunConfig parse_config_file(const std::string& path, const std::map<std::string, std::string>& overrides = {});

/// Canonical JSON rendering (sorted keys, output_dir omitted); parses back to an equal config.
std::string serialize_config(const RunConfig& cfg);
bool same_settings(const RunConfig& a, const RunConfig& b);

// --- manifests ----------------------------------------------------------------

struct RunManifest {
  std::string config_hash;
  std::string toolkit_version = kToolkitVersion;
  std::map<std::string, std::string> artifacts;  // name -> path
  std::map<std::string, std::string> checksums;  // name -> hex checksum
  std::map<std::string, double> timings;         // command -> seconds
  std::map<std::string, std::string> notes;

  static RunManifest load_or_new(const std::string& dir);
  void add_artifact(const std::string& name, const std::string& path);
  void write(const std::string& dir) const;
};

std::string file_checksum(const std::string& path);

// --- commands -----------------------------------------------------------------

/// Writes dataset.bin (and dataset.jsonl) into the output directory.
RunManifest cmd_gen_data(const RunConfig& cfg);
/// Trains the configured method; writes config.json, dataset.bin, model.ckpt, loss.csv.
RunManifest cmd_train(const RunConfig& cfg);
/// Writes n actions per observation as JSON arrays (samples.jsonl) plus samples.meta.json.
std::string cmd_sample(const RunConfig& cfg, const std::string& checkpoint, std::size_t n,
                       std::optional<int> only_obs = std::nullopt);
/// Writes metrics.json and metrics.csv. `samples` is a samples.jsonl file or a dataset.bin.
metrics::MetricReport cmd_eval(const RunConfig& cfg, const std::string& samples,
                               const std::optional<std::string>& reference = std::nullopt);

struct SweepRow {
  double weight;
  std::string statistic;
  double value;
};

/// Throws StateError when the checkpoint was trained without conditioning
/// dropout, unless `force` is set.
std::vector<SweepRow> cmd_guidance_sweep(const RunConfig& cfg, const std::string& checkpoint,
                                         const std::vector<double>& weights, std::size_t n, bool force = false);

/// Emits the data behind a figure: fig1, fig3, fig4 or appendixE.
RunManifest cmd_reproduce(const RunConfig& cfg, const std::string& figure, std::size_t samples_per_obs);

// --- shared helpers used by commands and tests ---------------------------------

envs::DemoDataset make_dataset(const RunConfig& cfg, Rng& rng);
/// Observation rows the environment can present (claw scenes or grid states).
std::vector<std::vector<double>> observation_set(const RunConfig& cfg);

/// Batch of actions for one observation from any checkpoint.
Matrix sample_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg, std::span<const double> obs, std::size_t n,
                              Rng& stream);

}  // namespace dbc::pipeline
