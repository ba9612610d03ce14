#include "dbc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include <nlohmann/json.hpp>

namespace dbc::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* to_string(Environment e) { return e == Environment::claw ? "claw" : "gridworld"; }

const char* to_string(Method m) {
  switch (m) {
    case Method::diffusion_bc:
      return "diffusion_bc";
    case Method::diffusion_x:
      return "diffusion_x";
    case Method::diffusion_kde:
      return "diffusion_kde";
    case Method::mse:
      return "mse";
    case Method::discretised:
      return "discretised";
    case Method::kmeans:
      return "kmeans";
    case Method::kmeans_residual:
      return "kmeans_residual";
  }
  return "?";
}

bool is_diffusion(Method m) {
  return m == Method::diffusion_bc || m == Method::diffusion_x || m == Method::diffusion_kde;
}

samplers::SamplerConfig RunConfig::sampler() const {
  samplers::SamplerConfig s;
  switch (method) {
    case Method::diffusion_x:
      s.scheme = samplers::Scheme::diffusion_x;
      break;
    case Method::diffusion_kde:
      s.scheme = samplers::Scheme::diffusion_kde;
      break;
    default:
      s.scheme = samplers::Scheme::diffusion_bc;
  }
  s.extra_steps = extra_steps;
  s.kde_samples = kde_samples;
  s.kde_width = kde_width;
  s.guidance = guidance;
  return s;
}

DiffusionTrainConfig RunConfig::diffusion_training() const {
  DiffusionTrainConfig t;
  t.net.architecture = architecture;
  t.net.hidden = hidden;
  t.net.depth = depth;
  t.net.embed_dim = embed_dim;
  t.net.time_embed_dim = time_embed_dim;
  t.net.history = history;
  t.net.steps = steps;
  t.beta_min = beta_min;
  t.beta_max = beta_max;
  t.sigma = sigma;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  t.cosine_decay = cosine_decay;
  t.dropout = dropout;
  return t;
}

baselines::BaselineConfig RunConfig::baseline_training() const {
  baselines::BaselineConfig b;
  b.hidden = hidden;
  b.depth = depth;
  b.bins = bins;
  b.clusters = clusters;
  b.epochs = epochs;
  b.batch_size = batch_size;
  b.learning_rate = learning_rate;
  b.cosine_decay = cosine_decay;
  return b;
}

// --- key registry ---------------------------------------------------------------

namespace {

enum class Scope { any, diffusion, baseline };

struct KeyInfo {
  std::string name;
  Scope scope;
  std::function<void(RunConfig&, const json&)> set;
  std::function<json(const RunConfig&)> get;
};

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw ConfigError("key '" + key + "' expects " + expected);
}

std::size_t as_count(const std::string& key, const json& v) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) type_error(key, "a non-negative integer");
  return v.get<std::size_t>();
}

double as_real(const std::string& key, const json& v) {
  if (!v.is_number()) type_error(key, "a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) type_error(key, "a finite number");
  return d;
}

std::string as_text(const std::string& key, const json& v) {
  if (!v.is_string()) type_error(key, "a string");
  return v.get<std::string>();
}

template <class E>
E as_choice(const std::string& key, const json& v, const std::vector<std::pair<std::string, E>>& choices) {
  const std::string s = as_text(key, v);
  for (const auto& [name, value] : choices)
    if (name == s) return value;
  std::string allowed;
  for (const auto& c : choices) allowed += (allowed.empty() ? "" : "|") + c.first;
  throw ConfigError("key '" + key + "' must be one of " + allowed + ", got '" + s + "'");
}

const std::vector<std::pair<std::string, Environment>> kEnvs = {{"claw", Environment::claw},
                                                               {"gridworld", Environment::gridworld}};
const std::vector<std::pair<std::string, Method>> kMethods = {
    {"diffusion_bc", Method::diffusion_bc}, {"diffusion_x", Method::diffusion_x},
    {"diffusion_kde", Method::diffusion_kde}, {"mse", Method::mse},
    {"discretised", Method::discretised}, {"kmeans", Method::kmeans},
    {"kmeans_residual", Method::kmeans_residual}};
const std::vector<std::pair<std::string, diffusion::Architecture>> kArchs = {
    {"basic_mlp", diffusion::Architecture::basic_mlp}, {"mlp_sieve", diffusion::Architecture::mlp_sieve}};
const std::vector<std::pair<std::string, diffusion::SigmaChoice>> kSigmas = {
    {"beta", diffusion::SigmaChoice::beta}, {"beta_tilde", diffusion::SigmaChoice::beta_tilde}};

template <class E>
std::string choice_name(E value, const std::vector<std::pair<std::string, E>>& choices) {
  for (const auto& [name, v] : choices)
    if (v == value) return name;
  return "?";
}

#define DBC_COUNT_KEY(KEY, SCOPE, FIELD)                                                   \
  KeyInfo {                                                                                \
    KEY, SCOPE, [](RunConfig& c, const json& v) { c.FIELD = as_count(KEY, v); },           \
        [](const RunConfig& c) { return json(c.FIELD); }                                   \
  }
#define DBC_REAL_KEY(KEY, SCOPE, FIELD)                                                    \
  KeyInfo {                                                                                \
    KEY, SCOPE, [](RunConfig& c, const json& v) { c.FIELD = as_real(KEY, v); },            \
        [](const RunConfig& c) { return json(c.FIELD); }                                   \
  }

const std::vector<KeyInfo>& registry() {
  static const std::vector<KeyInfo> keys = {
      {"baseline.bins", Scope::baseline, [](RunConfig& c, const json& v) { c.bins = as_count("baseline.bins", v); },
       [](const RunConfig& c) { return json(c.bins); }},
      DBC_COUNT_KEY("baseline.clusters", Scope::baseline, clusters),
      DBC_COUNT_KEY("data.history", Scope::any, history),
      DBC_REAL_KEY("data.p_right", Scope::any, p_right),
      DBC_COUNT_KEY("data.size", Scope::any, data_size),
      DBC_REAL_KEY("diffusion.beta_max", Scope::diffusion, beta_max),
      DBC_REAL_KEY("diffusion.beta_min", Scope::diffusion, beta_min),
      {"diffusion.sigma", Scope::diffusion,
       [](RunConfig& c, const json& v) { c.sigma = as_choice("diffusion.sigma", v, kSigmas); },
       [](const RunConfig& c) { return json(choice_name(c.sigma, kSigmas)); }},
      {"diffusion.steps", Scope::diffusion,
       [](RunConfig& c, const json& v) { c.steps = static_cast<int>(as_count("diffusion.steps", v)); },
       [](const RunConfig& c) { return json(c.steps); }},
      {"environment", Scope::any,
       [](RunConfig& c, const json& v) { c.environment = as_choice("environment", v, kEnvs); },
       [](const RunConfig& c) { return json(choice_name(c.environment, kEnvs)); }},
      DBC_COUNT_KEY("eval.emd_points", Scope::any, eval_emd_points),
      DBC_COUNT_KEY("eval.knn", Scope::any, eval_knn),
      DBC_COUNT_KEY("eval.reference_size", Scope::any, eval_reference_size),
      {"method", Scope::any, [](RunConfig& c, const json& v) { c.method = as_choice("method", v, kMethods); },
       [](const RunConfig& c) { return json(choice_name(c.method, kMethods)); }},
      {"net.architecture", Scope::diffusion,
       [](RunConfig& c, const json& v) { c.architecture = as_choice("net.architecture", v, kArchs); },
       [](const RunConfig& c) { return json(choice_name(c.architecture, kArchs)); }},
      DBC_COUNT_KEY("net.depth", Scope::any, depth),
      DBC_COUNT_KEY("net.embed_dim", Scope::diffusion, embed_dim),
      DBC_COUNT_KEY("net.hidden", Scope::any, hidden),
      DBC_COUNT_KEY("net.time_embed_dim", Scope::diffusion, time_embed_dim),
      {"output_dir", Scope::any, [](RunConfig& c, const json& v) { c.output_dir = as_text("output_dir", v); },
       [](const RunConfig& c) { return json(c.output_dir); }},
      {"sampler.extra_steps", Scope::diffusion,
       [](RunConfig& c, const json& v) { c.extra_steps = static_cast<int>(as_count("sampler.extra_steps", v)); },
       [](const RunConfig& c) { return json(c.extra_steps); }},
      {"sampler.guidance", Scope::diffusion,
       [](RunConfig& c, const json& v) {
         if (v.is_null())
           c.guidance.reset();
         else
           c.guidance = as_real("sampler.guidance", v);
       },
       [](const RunConfig& c) { return c.guidance ? json(*c.guidance) : json(nullptr); }},
      DBC_COUNT_KEY("sampler.kde_samples", Scope::diffusion, kde_samples),
      DBC_REAL_KEY("sampler.kde_width", Scope::diffusion, kde_width),
      {"seed", Scope::any,
       [](RunConfig& c, const json& v) {
         if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
           type_error("seed", "a non-negative integer");
         c.seed = v.get<std::uint64_t>();
       },
       [](const RunConfig& c) { return json(c.seed); }},
      DBC_COUNT_KEY("train.batch_size", Scope::any, batch_size),
      DBC_REAL_KEY("train.dropout", Scope::diffusion, dropout),
      DBC_COUNT_KEY("train.epochs", Scope::any, epochs),
      DBC_REAL_KEY("train.learning_rate", Scope::any, learning_rate),
      {"train.lr_schedule", Scope::any,
       [](RunConfig& c, const json& v) {
         const std::vector<std::pair<std::string, bool>> opts = {{"cosine", true}, {"constant", false}};
         c.cosine_decay = as_choice("train.lr_schedule", v, opts);
       },
       [](const RunConfig& c) { return json(c.cosine_decay ? "cosine" : "constant"); }},
  };
  return keys;
}

#undef DBC_COUNT_KEY
#undef DBC_REAL_KEY

const KeyInfo* find_key(const std::string& name) {
  for (const auto& k : registry())
    if (k.name == name) return &k;
  return nullptr;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// A raw text value from key=value input or a command-line flag.
json text_to_json(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "null" || s == "none") return json(nullptr);
  if (!s.empty() && (std::isdigit(static_cast<unsigned char>(s[0])) || s[0] == '-' || s[0] == '+' || s[0] == '.')) {
    try {
      json j = json::parse(s);
      if (j.is_number()) return j;
    } catch (const json::exception&) {
    }
    // Forms such as "1e-4" without a leading digit issue or "+3".
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (end && *end == '\0') return json(d);
    throw ConfigError("key '" + key + "' has malformed number '" + s + "'");
  }
  std::string unq = s;
  if (unq.size() >= 2 && unq.front() == '"' && unq.back() == '"') unq = unq.substr(1, unq.size() - 2);
  return json(unq);
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, json>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object())
      flatten(*it, key, out);
    else
      out[key] = *it;
  }
}

std::map<std::string, json> read_entries(const std::string& text) {
  std::map<std::string, json> entries;
  const std::string t = trim(text);
  if (!t.empty() && t.front() == '{') {
    json j;
    try {
      j = json::parse(t);
    } catch (const json::exception& e) {
      throw ConfigError(std::string("malformed JSON config: ") + e.what());
    }
    flatten(j, "", entries);
    return entries;
  }
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string l = trim(line.substr(0, line.find('#')));
    if (l.empty()) continue;
    const auto eq = l.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(l.substr(0, eq));
    if (entries.count(key)) throw ConfigError("key '" + key + "' given twice");
    entries[key] = text_to_json(key, l.substr(eq + 1));
  }
  return entries;
}

void validate_config(const RunConfig& c) {
  const bool diff = is_diffusion(c.method);
  for (const auto& key : c.explicit_keys) {
    const KeyInfo* k = find_key(key);
    if (k->scope == Scope::diffusion && !diff)
      throw ConfigError("key '" + key + "' applies only to diffusion methods, not " + to_string(c.method));
    if (k->scope == Scope::baseline && diff)
      throw ConfigError("key '" + key + "' applies only to baseline methods, not " + to_string(c.method));
  }
  if (c.explicit_keys.count("data.p_right") && c.environment != Environment::gridworld)
    throw ConfigError("key 'data.p_right' applies only to the gridworld environment");
  if (c.data_size < 1) throw ConfigError("key 'data.size' must be >= 1");
  if (c.history < 1) throw ConfigError("key 'data.history' must be >= 1");
  if (!(c.p_right >= 0.0 && c.p_right <= 1.0)) throw ConfigError("key 'data.p_right' must lie in [0,1]");
  if (c.hidden < 1 || c.depth < 1) throw ConfigError("key 'net.hidden'/'net.depth' must be >= 1");
  if (c.embed_dim < 2 || c.embed_dim % 2) throw ConfigError("key 'net.embed_dim' must be even");
  if (c.time_embed_dim < 2 || c.time_embed_dim % 2) throw ConfigError("key 'net.time_embed_dim' must be even");
  if (c.steps < 1) throw ConfigError("key 'diffusion.steps' must be >= 1");
  if (!(c.beta_min > 0.0 && c.beta_min <= c.beta_max && c.beta_max < 1.0))
    throw ConfigError("keys 'diffusion.beta_min'/'diffusion.beta_max' must satisfy 0 < min <= max < 1");
  if (c.epochs < 1) throw ConfigError("key 'train.epochs' must be >= 1");
  if (c.batch_size < 1) throw ConfigError("key 'train.batch_size' must be >= 1");
  if (!(c.learning_rate > 0.0)) throw ConfigError("key 'train.learning_rate' must be positive");
  if (!(c.dropout >= 0.0 && c.dropout <= 1.0)) throw ConfigError("key 'train.dropout' must lie in [0,1]");
  if (c.bins < 1) throw ConfigError("key 'baseline.bins' must be >= 1");
  if (c.clusters < 1) throw ConfigError("key 'baseline.clusters' must be >= 1");
  if (c.eval_knn < 1) throw ConfigError("key 'eval.knn' must be >= 1");
  if (c.eval_emd_points < 1) throw ConfigError("key 'eval.emd_points' must be >= 1");
  if (c.eval_reference_size < 1) throw ConfigError("key 'eval.reference_size' must be >= 1");
  if (c.guidance && !(*c.guidance >= 0.0)) throw ConfigError("key 'sampler.guidance' must be >= 0");
  if (c.kde_samples < 1) throw ConfigError("key 'sampler.kde_samples' must be >= 1");
  if (!(c.kde_width > 0.0)) throw ConfigError("key 'sampler.kde_width' must be positive");
  if (diff) {
    if (c.method != Method::diffusion_x && c.extra_steps != 0)
      throw ConfigError("key 'sampler.extra_steps' must be 0 for " + std::string(to_string(c.method)));
  }
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& k : registry()) n.push_back(k.name);
    std::sort(n.begin(), n.end());
    return n;
  }();
  return names;
}

RunConfig default_config(Environment env, Method method) {
  RunConfig c;
  c.environment = env;
  c.method = method;
  c.output_dir = std::string("runs/") + to_string(env) + "-" + to_string(method);
  if (env == Environment::claw) {
    c.data_size = 20000;
    c.eval_reference_size = 7000;
  } else {
    c.data_size = 10000;  // rollouts, 3 rows each
    c.eval_reference_size = 3000;
  }
  c.extra_steps = method == Method::diffusion_x ? 8 : 0;
  return c;
}

RunConfig parse_config(const std::string& text, const std::map<std::string, std::string>& overrides) {
  std::map<std::string, json> entries = read_entries(text);
  for (const auto& [k, v] : overrides) entries[k] = text_to_json(k, v);
  for (const auto& [k, v] : entries)
    if (!find_key(k)) throw ConfigError("unknown key '" + k + "'");

  Environment env = Environment::claw;
  Method method = Method::diffusion_bc;
  if (auto it = entries.find("environment"); it != entries.end()) env = as_choice("environment", it->second, kEnvs);
  if (auto it = entries.find("method"); it != entries.end()) method = as_choice("method", it->second, kMethods);
  RunConfig cfg = default_config(env, method);
  for (const auto& [k, v] : entries) {
    find_key(k)->set(cfg, v);
    cfg.explicit_keys.insert(k);
  }
  validate_config(cfg);
  return cfg;
}

RunConfig parse_config_file(const std::string& path, const std::map<std::string, std::string>& overrides) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), overrides);
}

std::string serialize_config(const RunConfig& cfg) {
  json j = json::object();  // std::map ordering: sorted keys
  for (const auto& k : registry()) {
    // Keys outside the method's scope are omitted so the output re-parses.
    if (k.scope == Scope::diffusion && !is_diffusion(cfg.method)) continue;
    if (k.scope == Scope::baseline && is_diffusion(cfg.method)) continue;
    if (k.name == "data.p_right" && cfg.environment != Environment::gridworld) continue;
    // Where a run lives is not one of its settings.
    if (k.name == "output_dir") continue;
    j[k.name] = k.get(cfg);
  }
  return j.dump(2) + "\n";
}

bool same_settings(const RunConfig& a, const RunConfig& b) { return serialize_config(a) == serialize_config(b); }

// --- manifests ----------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp + " for writing");
    f << content;
    if (!f) throw IoError("failed writing " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp + " to " + path);
}

std::string config_hash(const RunConfig& cfg) {
  const std::string s = serialize_config(cfg);
  return hex64(nnet::checksum64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}));
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string file_checksum(const std::string& path) {
  const std::string s = read_file(path);
  return hex64(nnet::checksum64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}));
}

RunManifest RunManifest::load_or_new(const std::string& dir) {
  RunManifest m;
  const std::string path = join(dir, "manifest.json");
  if (!fs::exists(path)) return m;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw CorruptionError(path + ": " + e.what());
  }
  m.config_hash = j.value("config_hash", "");
  m.toolkit_version = j.value("toolkit_version", kToolkitVersion);
  if (j.contains("artifacts"))
    for (auto it = j["artifacts"].begin(); it != j["artifacts"].end(); ++it) {
      m.artifacts[it.key()] = (*it).value("path", "");
      m.checksums[it.key()] = (*it).value("checksum", "");
    }
  if (j.contains("timings"))
    for (auto it = j["timings"].begin(); it != j["timings"].end(); ++it) m.timings[it.key()] = it->get<double>();
  if (j.contains("notes"))
    for (auto it = j["notes"].begin(); it != j["notes"].end(); ++it) m.notes[it.key()] = it->get<std::string>();
  return m;
}

void RunManifest::add_artifact(const std::string& name, const std::string& path) {
  artifacts[name] = path;
  checksums[name] = file_checksum(path);
}

void RunManifest::write(const std::string& dir) const {
  json j;
  j["config_hash"] = config_hash;
  j["toolkit_version"] = toolkit_version;
  j["artifacts"] = json::object();
  for (const auto& [name, path] : artifacts)
    j["artifacts"][name] = {{"path", path}, {"checksum", checksums.count(name) ? checksums.at(name) : ""}};
  j["timings"] = timings;
  j["notes"] = notes;
  write_file_atomic(join(dir, "manifest.json"), j.dump(2) + "\n");
}

// --- datasets and sampling ------------------------------------------------------

envs::DemoDataset make_dataset(const RunConfig& cfg, Rng& rng) {
  if (cfg.environment == Environment::claw) {
    const auto& scenes = envs::default_claw_scenes();
    return envs::generate_claw_dataset(scenes, cfg.data_size, rng, {cfg.history, false});
  }
  return envs::generate_gridworld_dataset(envs::GridWorldSpec{cfg.p_right}, cfg.data_size, rng, cfg.history);
}

std::vector<std::vector<double>> observation_set(const RunConfig& cfg) {
  std::vector<std::vector<double>> out;
  if (cfg.environment == Environment::claw) {
    for (int s = 0; s < envs::kClawSceneCount; ++s) out.push_back(envs::claw_observation(s, cfg.history));
  } else {
    const int previous[] = {-1, 0, 1, 1};
    for (int s = 0; s < static_cast<int>(envs::kGridStates); ++s)
      out.push_back(envs::gridworld_observation(s, previous[s], cfg.history));
  }
  return out;
}

Matrix sample_from_checkpoint(const Checkpoint& ck, const RunConfig& cfg, std::span<const double> obs, std::size_t n,
                              Rng& stream) {
  Matrix o(n, obs.size());
  for (std::size_t i = 0; i < n; ++i) std::copy(obs.begin(), obs.end(), o.row(i).begin());
  std::vector<Rng> rngs;
  rngs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) rngs.push_back(stream.substream("row", i));
  if (const auto* d = std::get_if<DiffusionCheckpoint>(&ck)) {
    if (!is_diffusion(cfg.method)) throw ConfigError("checkpoint holds a diffusion model but method is a baseline");
    return samplers::sample_actions(d->policy, o, cfg.sampler(), rngs);
  }
  if (is_diffusion(cfg.method)) throw ConfigError("checkpoint holds a baseline model but method is a diffusion sampler");
  return baselines::sample_baseline(std::get<baselines::BaselineModel>(ck), o, rngs);
}

// --- commands -----------------------------------------------------------------

namespace {

void start_run(const RunConfig& cfg, RunManifest& m) {
  ensure_dir(cfg.output_dir);
  const std::string cfg_path = join(cfg.output_dir, "config.json");
  write_file_atomic(cfg_path, serialize_config(cfg));
  m.config_hash = config_hash(cfg);
  m.add_artifact("config", cfg_path);
}

void write_loss_csv(const std::string& path, const std::vector<double>& losses) {
  std::string s = "epoch,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) s += std::to_string(i + 1) + "," + fmt_real(losses[i]) + "\n";
  write_file_atomic(path, s);
}

}  // namespace

RunManifest cmd_gen_data(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest m = RunManifest::load_or_new(cfg.output_dir);
  start_run(cfg, m);
  Rng data_rng = Rng(cfg.seed).substream("dataset");
  const auto data = make_dataset(cfg, data_rng);
  const std::string path = join(cfg.output_dir, "dataset.bin");
  envs::save_dataset(path, data);
  m.add_artifact("dataset", path);
  const std::string jl = join(cfg.output_dir, "dataset.jsonl");
  envs::export_dataset_jsonl(jl, data);
  m.add_artifact("dataset_jsonl", jl);
  m.timings["gen-data"] = seconds_since(t0);
  m.write(cfg.output_dir);
  return m;
}

RunManifest cmd_train(const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest m = RunManifest::load_or_new(cfg.output_dir);
  start_run(cfg, m);
  const Rng root(cfg.seed);
  Rng data_rng = root.substream("dataset");
  const auto data = make_dataset(cfg, data_rng);
  const std::string data_path = join(cfg.output_dir, "dataset.bin");
  envs::save_dataset(data_path, data);
  m.add_artifact("dataset", data_path);

  Rng train_rng = root.substream("training");
  const std::string ck_path = join(cfg.output_dir, "model.ckpt");
  std::vector<double> losses;
  if (is_diffusion(cfg.method)) {
    TrainingLog log;
    const auto policy = train_diffusion_policy(data, cfg.diffusion_training(), train_rng, &log);
    save_checkpoint(ck_path, policy, cfg.dropout);
    losses = log.epoch_loss;
  } else {
    baselines::TrainLog log;
    const auto kind = static_cast<baselines::Kind>(static_cast<int>(cfg.method) - static_cast<int>(Method::mse));
    const auto model = baselines::train_baseline(kind, data, cfg.baseline_training(), train_rng, &log);
    save_checkpoint(ck_path, model);
    losses = log.epoch_loss;
  }
  m.add_artifact("checkpoint", ck_path);
  const std::string loss_path = join(cfg.output_dir, "loss.csv");
  write_loss_csv(loss_path, losses);
  m.add_artifact("loss_curve", loss_path);
  m.notes["lr_schedule"] = cfg.cosine_decay ? "cosine decay to zero over the run" : "constant";
  m.timings["train"] = seconds_since(t0);
  m.write(cfg.output_dir);
  return m;
}

namespace {

std::string meta_path_for(const std::string& samples_path) {
  const std::string suffix = ".jsonl";
  if (samples_path.size() > suffix.size() &&
      samples_path.compare(samples_path.size() - suffix.size(), suffix.size(), suffix) == 0)
    return samples_path.substr(0, samples_path.size() - suffix.size()) + ".meta.json";
  return samples_path + ".meta.json";
}

std::string action_line(std::span<const double> a) { return json(std::vector<double>(a.begin(), a.end())).dump(); }

}  // namespace

std::string cmd_sample(const RunConfig& cfg, const std::string& checkpoint, std::size_t n, std::optional<int> only_obs) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
  const Checkpoint ck = load_checkpoint(checkpoint);
  ensure_dir(cfg.output_dir);
  const auto obs = observation_set(cfg);
  std::vector<int> ids;
  for (int i = 0; i < static_cast<int>(obs.size()); ++i)
    if (!only_obs || *only_obs == i) ids.push_back(i);
  if (only_obs && ids.empty()) throw ConfigError("observation id " + std::to_string(*only_obs) + " does not exist");

  const Rng sampling = Rng(cfg.seed).substream("sampling");
  std::string body;
  for (int id : ids) {
    Rng stream = sampling.substream("obs", static_cast<std::uint64_t>(id));
    const Matrix a = sample_from_checkpoint(ck, cfg, obs[static_cast<std::size_t>(id)], n, stream);
    for (std::size_t r = 0; r < a.rows(); ++r) body += action_line(a.row(r)) + "\n";
  }
  const std::string path = join(cfg.output_dir, "samples.jsonl");
  write_file_atomic(path, body);
  json meta;
  meta["environment"] = to_string(cfg.environment);
  meta["method"] = to_string(cfg.method);
  meta["per_observation"] = n;
  meta["observations"] = ids;
  meta["history"] = cfg.history;
  const std::string mpath = meta_path_for(path);
  write_file_atomic(mpath, meta.dump(2) + "\n");

  RunManifest m = RunManifest::load_or_new(cfg.output_dir);
  if (m.config_hash.empty()) m.config_hash = config_hash(cfg);
  m.add_artifact("samples", path);
  m.add_artifact("samples_meta", mpath);
  m.timings["sample"] = seconds_since(t0);
  m.write(cfg.output_dir);
  return path;
}

namespace {

struct LabelledActions {
  Matrix actions;
  std::vector<int> labels;
};

LabelledActions read_samples(const RunConfig& cfg, const std::string& path) {
  if (!fs::exists(path)) throw IoError("samples not found: " + path);
  LabelledActions out;
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".bin") == 0) {
    auto d = envs::load_dataset(path, cfg.history);
    out.actions = std::move(d.actions);
    out.labels = std::move(d.labels);
    return out;
  }
  const std::string mpath = meta_path_for(path);
  if (!fs::exists(mpath)) throw IoError("sample metadata not found: " + mpath);
  json meta;
  try {
    meta = json::parse(read_file(mpath));
  } catch (const json::exception& e) {
    throw CorruptionError(mpath + ": " + e.what());
  }
  const auto per = meta.at("per_observation").get<std::size_t>();
  const auto ids = meta.at("observations").get<std::vector<int>>();
  std::istringstream in(read_file(path));
  std::string line;
  std::vector<double> flat;
  std::size_t rows = 0, cols = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<double> a;
    try {
      a = json::parse(line).get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw CorruptionError(path + ": line " + std::to_string(rows + 1) + ": " + e.what());
    }
    if (rows == 0) cols = a.size();
    if (a.size() != cols || cols == 0) throw CorruptionError(path + ": inconsistent action width");
    flat.insert(flat.end(), a.begin(), a.end());
    ++rows;
  }
  if (rows != per * ids.size()) throw CorruptionError(path + ": row count does not match metadata");
  out.actions = Matrix(rows, cols, std::move(flat));
  for (int id : ids) out.labels.insert(out.labels.end(), per, id);
  return out;
}

Matrix rows_with_label(const LabelledActions& la, int label) {
  std::vector<double> flat;
  std::size_t n = 0;
  for (std::size_t r = 0; r < la.labels.size(); ++r)
    if (la.labels[r] == label) {
      flat.insert(flat.end(), la.actions.row(r).begin(), la.actions.row(r).end());
      ++n;
    }
  return Matrix(n, la.actions.cols(), std::move(flat));
}

}  // namespace

metrics::MetricReport cmd_eval(const RunConfig& cfg, const std::string& samples,
                               const std::optional<std::string>& reference) {
  const auto t0 = std::chrono::steady_clock::now();
  const LabelledActions fake = read_samples(cfg, samples);
  LabelledActions real;
  if (reference) {
    real = read_samples(cfg, *reference);
  } else {
    RunConfig ref_cfg = cfg;
    ref_cfg.data_size = cfg.environment == Environment::claw ? cfg.eval_reference_size
                                                             : std::max<std::size_t>(1, cfg.eval_reference_size / 3);
    Rng heldout = Rng(cfg.seed).substream("heldout");
    auto d = make_dataset(ref_cfg, heldout);
    real.actions = std::move(d.actions);
    real.labels = std::move(d.labels);
  }
  if (real.actions.cols() != fake.actions.cols()) throw ShapeError("samples and reference differ in action width");

  metrics::MetricReport report;
  const metrics::EmdOptions emd_opts{cfg.eval_emd_points, Rng(cfg.seed).substream("subsample").seed()};
  const int groups = cfg.environment == Environment::claw ? envs::kClawSceneCount : static_cast<int>(envs::kGridStates);
  const std::string unit = cfg.environment == Environment::claw ? "scene" : "state";
  double emd_sum = 0.0, dens_sum = 0.0, cov_sum = 0.0;
  int emd_groups = 0, dc_groups = 0;
  report.set("sample_count", static_cast<double>(fake.actions.rows()));

  for (int g = 0; g < groups; ++g) {
    const Matrix f = rows_with_label(fake, g);
    const Matrix r = rows_with_label(real, g);
    if (f.rows() == 0 || r.rows() == 0) continue;
    const std::string tag = unit + std::to_string(g);
    const double e = metrics::emd(metrics::EmpiricalDistribution::uniform(f), metrics::EmpiricalDistribution::uniform(r),
                                  emd_opts);
    report.set("emd." + tag, e);
    emd_sum += e;
    ++emd_groups;
    if (r.rows() >= 2) {
      const std::size_t k = std::min(cfg.eval_knn, r.rows() - 1);
      const auto dc = metrics::density_coverage(r, f, k);
      report.set("density." + tag, dc.density);
      report.set("coverage." + tag, dc.coverage);
      dens_sum += dc.density;
      cov_sum += dc.coverage;
      ++dc_groups;
    }
    if (cfg.environment == Environment::gridworld) {
      std::vector<double> hf(envs::kGridActions, 0.0), hr(envs::kGridActions, 0.0);
      for (std::size_t i = 0; i < f.rows(); ++i) hf[static_cast<std::size_t>(envs::decode_grid_action(f.row(i)))] += 1.0;
      for (std::size_t i = 0; i < r.rows(); ++i) hr[static_cast<std::size_t>(envs::decode_grid_action(r.row(i)))] += 1.0;
      for (auto& v : hf) v /= static_cast<double>(f.rows());
      for (auto& v : hr) v /= static_cast<double>(r.rows());
      report.set("action_w1." + tag, metrics::wasserstein_1d(hf, hr));
      report.set("action_tv." + tag, metrics::total_variation(hf, hr));
      const char* names[] = {"left", "straight", "right"};
      for (std::size_t a = 0; a < envs::kGridActions; ++a) report.set("freq." + tag + "." + names[a], hf[a]);
    }
  }
  if (emd_groups) report.set("emd", emd_sum / emd_groups);
  if (dc_groups) {
    report.set("density", dens_sum / dc_groups);
    report.set("coverage", cov_sum / dc_groups);
  }
  if (cfg.environment == Environment::claw) {
    const auto& scenes = envs::default_claw_scenes();
    report.set("in_distribution", metrics::in_distribution_rate(scenes, fake.labels, fake.actions));
    for (int g = 0; g < groups; ++g) {
      const Matrix f = rows_with_label(fake, g);
      if (f.rows() == 0) continue;
      const std::vector<int> ids(f.rows(), g);
      report.set("in_distribution.scene" + std::to_string(g), metrics::in_distribution_rate(scenes, ids, f));
    }
  } else {
    const Matrix f = rows_with_label(fake, envs::kDecisionState);
    if (f.rows() > 0) {
      std::size_t right = 0;
      for (std::size_t i = 0; i < f.rows(); ++i) right += envs::decode_grid_action(f.row(i)) == envs::kRight;
      report.set("right_turn_rate", static_cast<double>(right) / static_cast<double>(f.rows()));
    }
  }

  ensure_dir(cfg.output_dir);
  const std::string jpath = join(cfg.output_dir, "metrics.json");
  const std::string cpath = join(cfg.output_dir, "metrics.csv");
  write_file_atomic(jpath, report.to_json());
  write_file_atomic(cpath, report.to_csv(config_hash(cfg), to_string(cfg.method)));
  RunManifest m = RunManifest::load_or_new(cfg.output_dir);
  if (m.config_hash.empty()) m.config_hash = config_hash(cfg);
  m.add_artifact("metrics_json", jpath);
  m.add_artifact("metrics_csv", cpath);
  m.timings["eval"] = seconds_since(t0);
  m.write(cfg.output_dir);
  return report;
}

namespace {

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

// Region occupancy of claw samples: fraction per region, outside fraction,
// and the entropy of the in-region occupancy.
void claw_occupancy(const envs::ClawScene& scene, const Matrix& a, const std::string& prefix, std::vector<SweepRow>& out,
                    double w) {
  std::vector<double> counts(scene.regions.size(), 0.0);
  double outside = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const int r = envs::region_of(scene, a.row(i));
    if (r < 0)
      outside += 1.0;
    else
      counts[static_cast<std::size_t>(r)] += 1.0;
  }
  const double n = static_cast<double>(a.rows());
  double inside = 0.0;
  for (std::size_t r = 0; r < counts.size(); ++r) {
    out.push_back({w, prefix + ".region" + std::to_string(r), counts[r] / n});
    inside += counts[r];
  }
  out.push_back({w, prefix + ".outside", outside / n});
  std::vector<double> p(counts.size(), 0.0);
  if (inside > 0.0)
    for (std::size_t r = 0; r < counts.size(); ++r) p[r] = counts[r] / inside;
  out.push_back({w, prefix + ".entropy", entropy(p)});
}

}  // namespace

std::vector<SweepRow> cmd_guidance_sweep(const RunConfig& cfg, const std::string& checkpoint,
                                         const std::vector<double>& weights, std::size_t n, bool force) {
  const auto t0 = std::chrono::steady_clock::now();
  if (!is_diffusion(cfg.method)) throw ConfigError("guidance sweeps need a diffusion method");
  if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto* d = std::get_if<DiffusionCheckpoint>(&ck);
  if (!d) throw ConfigError("guidance sweeps need a diffusion checkpoint");
  if (d->train_dropout <= 0.0 && !force)
    throw StateError("checkpoint was trained without conditioning dropout; the unconditional model is untrained");
  for (double w : weights)
    if (!(w >= 0.0)) throw ConfigError("guidance weights must be >= 0");

  const auto obs = observation_set(cfg);
  const Rng root = Rng(cfg.seed).substream("sweep");
  std::vector<SweepRow> rows;
  for (double w : weights) {
    RunConfig c = cfg;
    c.guidance = w;
    if (cfg.environment == Environment::gridworld) {
      Rng stream = root.substream("obs", envs::kDecisionState);
      const Matrix a = sample_from_checkpoint(ck, c, obs[envs::kDecisionState], n, stream);
      std::vector<double> freq(envs::kGridActions, 0.0);
      for (std::size_t i = 0; i < a.rows(); ++i) freq[static_cast<std::size_t>(envs::decode_grid_action(a.row(i)))] += 1.0;
      const char* names[] = {"left", "straight", "right"};
      for (std::size_t k = 0; k < envs::kGridActions; ++k)
        rows.push_back({w, std::string("state1.") + names[k], n ? freq[k] / static_cast<double>(n) : 0.0});
    } else {
      const auto& scenes = envs::default_claw_scenes();
      for (int s = 0; s < envs::kClawSceneCount; ++s) {
        Rng stream = root.substream("obs", static_cast<std::uint64_t>(s));
        const Matrix a = sample_from_checkpoint(ck, c, obs[static_cast<std::size_t>(s)], n, stream);
        claw_occupancy(scenes[static_cast<std::size_t>(s)], a, "scene" + std::to_string(s), rows, w);
      }
    }
  }

  ensure_dir(cfg.output_dir);
  std::string csv = "weight,statistic,value\n";
  for (const auto& r : rows) csv += fmt_real(r.weight) + "," + r.statistic + "," + fmt_real(r.value) + "\n";
  const std::string path = join(cfg.output_dir, "sweep.csv");
  write_file_atomic(path, csv);
  RunManifest m = RunManifest::load_or_new(cfg.output_dir);
  if (m.config_hash.empty()) m.config_hash = config_hash(cfg);
  m.add_artifact("sweep", path);
  m.timings["sweep-guidance"] = seconds_since(t0);
  m.write(cfg.output_dir);
  return rows;
}

RunManifest cmd_reproduce(const RunConfig& cfg, const std::string& figure, std::size_t samples_per_obs) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::string dir = join(cfg.output_dir, figure);
  RunManifest m;
  m.config_hash = config_hash(cfg);

  auto train_and_sample = [&](Method method, const std::vector<std::pair<std::string, samplers::SamplerConfig>>& variants,
                              std::string& csv, const std::string& label) {
    RunConfig c = cfg;
    c.method = method;
    c.environment = Environment::claw;
    if (method == Method::diffusion_x && c.extra_steps < 1) c.extra_steps = 8;
    const Rng root(c.seed);
    Rng data_rng = root.substream("dataset");
    const auto data = make_dataset(c, data_rng);
    Rng train_rng = root.substream("training");
    Checkpoint ck;
    if (is_diffusion(method)) {
      ck = DiffusionCheckpoint{train_diffusion_policy(data, c.diffusion_training(), train_rng), c.dropout};
    } else {
      const auto kind = static_cast<baselines::Kind>(static_cast<int>(method) - static_cast<int>(Method::mse));
      ck = baselines::train_baseline(kind, data, c.baseline_training(), train_rng);
    }
    const auto obs = observation_set(c);
    const auto& scenes = envs::default_claw_scenes();
    const Rng sampling = root.substream("sampling");
    for (const auto& [name, sc] : variants) {
      RunConfig v = c;
      if (is_diffusion(method)) {
        v.method = sc.scheme == samplers::Scheme::diffusion_x     ? Method::diffusion_x
                   : sc.scheme == samplers::Scheme::diffusion_kde ? Method::diffusion_kde
                                                                  : Method::diffusion_bc;
        v.extra_steps = sc.extra_steps;
        v.kde_samples = sc.kde_samples;
        v.kde_width = sc.kde_width;
        v.guidance = sc.guidance;
      }
      for (int s = 0; s < envs::kClawSceneCount; ++s) {
        Rng stream = sampling.substream("obs", static_cast<std::uint64_t>(s));
        const Matrix a = sample_from_checkpoint(ck, v, obs[static_cast<std::size_t>(s)], samples_per_obs, stream);
        for (std::size_t i = 0; i < a.rows(); ++i)
          csv += (label.empty() ? name : label) + "," + std::to_string(s) + "," + fmt_real(a(i, 0)) + "," +
                 fmt_real(a(i, 1)) + "," + (envs::in_region(scenes[static_cast<std::size_t>(s)], a.row(i)) ? "1" : "0") +
                 "\n";
      }
    }
  };

  std::string csv;
  samplers::SamplerConfig bc;
  if (figure == "appendixE") {
    const auto post = envs::gridworld_exact_posteriors(envs::GridWorldSpec{cfg.p_right});
    csv = "quantity,value\n";
    for (std::size_t i = 0; i < envs::kGridStates; ++i) csv += "p_o" + std::to_string(i) + "," + fmt_real(post.p_obs[i]) + "\n";
    const char* names[] = {"left", "straight", "right"};
    for (std::size_t a = 0; a < envs::kGridActions; ++a) {
      csv += std::string("p_a_") + names[a] + "," + fmt_real(post.p_action[a]) + "\n";
      if (post.p_action[a] > 0.0) csv += std::string("p_o1_given_") + names[a] + "," + fmt_real(post.p_o1_given[a]) + "\n";
    }
  } else if (figure == "fig1") {
    csv = "method,scene,x,y,in_region\n";
    for (Method method : {Method::mse, Method::discretised, Method::kmeans, Method::kmeans_residual, Method::diffusion_bc})
      train_and_sample(method, {{to_string(method), bc}}, csv, to_string(method));
  } else if (figure == "fig3") {
    csv = "weight,scene,x,y,in_region\n";
    std::vector<std::pair<std::string, samplers::SamplerConfig>> variants;
    for (double w : {0.0, 1.0, 4.0, 8.0}) {
      samplers::SamplerConfig g = bc;
      g.guidance = w;
      variants.push_back({fmt_real(w), g});
    }
    train_and_sample(Method::diffusion_bc, variants, csv, "");
  } else if (figure == "fig4") {
    csv = "sampler,scene,x,y,in_region\n";
    samplers::SamplerConfig x = bc, kde = bc;
    x.scheme = samplers::Scheme::diffusion_x;
    x.extra_steps = cfg.extra_steps > 0 ? cfg.extra_steps : 8;
    kde.scheme = samplers::Scheme::diffusion_kde;
    kde.kde_samples = cfg.kde_samples;
    kde.kde_width = cfg.kde_width;
    train_and_sample(Method::diffusion_bc, {{"diffusion_bc", bc}, {"diffusion_x", x}, {"diffusion_kde", kde}}, csv, "");
  } else {
    throw ConfigError("unknown figure id '" + figure + "' (expected fig1, fig3, fig4 or appendixE)");
  }

  ensure_dir(dir);
  const std::string cfg_path = join(dir, "config.json");
  write_file_atomic(cfg_path, serialize_config(cfg));
  m.add_artifact("config", cfg_path);
  const std::string path = join(dir, figure + ".csv");
  write_file_atomic(path, csv);
  m.add_artifact(figure, path);
  m.timings["reproduce"] = seconds_since(t0);
  m.write(dir);
  return m;
}

}  // namespace dbc::pipeline
