// Command-line entry point: `dbc <subcommand> [--config FILE] [--<key> VALUE ...]`.

#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dbc/error.hpp"
#include "dbc/pipeline.hpp"

namespace {

using namespace dbc::pipeline;

struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> values;
};

void add_config_flags(CLI::App* sub, ConfigFlags& flags) {
  sub->add_option("--config", flags.config_path, "Config file (key=value lines or a JSON object)");
  for (const auto& key : config_keys()) sub->add_option("--" + key, flags.values[key], "Overrides '" + key + "'");
}

RunConfig resolve(const CLI::App* sub, const ConfigFlags& flags) {
  std::map<std::string, std::string> overrides;
  for (const auto& key : config_keys())
    if (sub->count("--" + key) > 0) overrides[key] = flags.values.at(key);
  if (flags.config_path.empty()) return parse_config("", overrides);
  return parse_config_file(flags.config_path, overrides);
}

std::string default_path(const RunConfig& cfg, const std::string& given, const char* name) {
  return given.empty() ? cfg.output_dir + "/" + name : given;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion behaviour-cloning toolkit"};
  app.require_subcommand(1);

  ConfigFlags train_flags, sample_flags, eval_flags, sweep_flags, repro_flags, data_flags;

  auto* train = app.add_subcommand("train", "Generate demonstrations and train the configured method");
  add_config_flags(train, train_flags);

  auto* sample = app.add_subcommand("sample", "Draw actions for every observation from a checkpoint");
  add_config_flags(sample, sample_flags);
  std::string sample_ckpt;
  std::size_t sample_n = 100;
  std::optional<int> sample_obs;
  sample->add_option("--checkpoint", sample_ckpt, "Checkpoint file (default <output_dir>/model.ckpt)");
  sample->add_option("-n,--num", sample_n, "Samples per observation");
  sample->add_option("--obs", sample_obs, "Only this observation id");

  auto* eval = app.add_subcommand("eval", "Score samples against held-out demonstrations");
  add_config_flags(eval, eval_flags);
  std::string eval_samples;
  std::optional<std::string> eval_reference;
  eval->add_option("--samples", eval_samples, "samples.jsonl or dataset.bin (default <output_dir>/samples.jsonl)");
  eval->add_option("--reference", eval_reference, "Reference dataset.bin instead of fresh held-out demos");

  auto* sweep = app.add_subcommand("sweep-guidance", "Sample under several guidance weights");
  add_config_flags(sweep, sweep_flags);
  std::string sweep_ckpt;
  std::vector<double> sweep_weights = {0.0, 1.0, 4.0, 8.0};
  std::size_t sweep_n = 1000;
  bool sweep_force = false;
  sweep->add_option("--checkpoint", sweep_ckpt, "Checkpoint file (default <output_dir>/model.ckpt)");
  sweep->add_option("--weights", sweep_weights, "Guidance weights")->delimiter(',');
  sweep->add_option("-n,--num", sweep_n, "Samples per observation and weight");
  sweep->add_flag("--force", sweep_force, "Sweep even if the checkpoint was trained without dropout");

  auto* repro = app.add_subcommand("reproduce", "Emit the data behind a figure");
  add_config_flags(repro, repro_flags);
  std::string figure;
  std::size_t repro_n = 1000;
  repro->add_option("figure", figure, "fig1, fig3, fig4 or appendixE")->required();
  repro->add_option("-n,--num", repro_n, "Samples per observation");

  auto* gen = app.add_subcommand("gen-data", "Write a demonstration dataset");
  add_config_flags(gen, data_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      const RunConfig cfg = resolve(train, train_flags);
      cmd_train(cfg);
      std::cout << cfg.output_dir << "/manifest.json\n";
    } else if (sample->parsed()) {
      const RunConfig cfg = resolve(sample, sample_flags);
      std::cout << cmd_sample(cfg, default_path(cfg, sample_ckpt, "model.ckpt"), sample_n, sample_obs) << "\n";
    } else if (eval->parsed()) {
      const RunConfig cfg = resolve(eval, eval_flags);
      const auto report = cmd_eval(cfg, default_path(cfg, eval_samples, "samples.jsonl"), eval_reference);
      std::cout << report.to_json();
    } else if (sweep->parsed()) {
      const RunConfig cfg = resolve(sweep, sweep_flags);
      try {
        cmd_guidance_sweep(cfg, default_path(cfg, sweep_ckpt, "model.ckpt"), sweep_weights, sweep_n, sweep_force);
      } catch (const dbc::StateError& e) {
        std::cerr << "warning: " << e.what() << "; nothing written (pass --force to sweep anyway)\n";
        return 0;
      }
      std::cout << cfg.output_dir << "/sweep.csv\n";
    } else if (repro->parsed()) {
      const RunConfig cfg = resolve(repro, repro_flags);
      cmd_reproduce(cfg, figure, repro_n);
      std::cout << cfg.output_dir << "/" << figure << "/manifest.json\n";
    } else if (gen->parsed()) {
      const RunConfig cfg = resolve(gen, data_flags);
      cmd_gen_data(cfg);
      std::cout << cfg.output_dir << "/dataset.bin\n";
    }
  } catch (const dbc::Error& e) {
    std::cerr << "dbc: " << e.what() << "\n";
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "dbc: corrupt file: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "dbc: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
