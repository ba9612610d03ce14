// Acceptance suite: one PASS/FAIL line per criterion. Thresholds are fixed
// below and are not command-line tunable.

#include <algorithm>
#include <boost/multiprecision/cpp_dec_float.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dbc/pipeline.hpp"
#include "grad_check.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dbc;
namespace fs = std::filesystem;

namespace {

// --- pinned thresholds --------------------------------------------------------
constexpr double kPosteriorTol = 1e-12;
constexpr double kGridGuidanceRatio = 2.0;
constexpr double kMseBimodalMax = 0.2;
constexpr double kDiscretisedCornerMin = 0.05;
constexpr double kBcPerSceneMin = 0.90;
constexpr double kRefinedOverallMin = 0.95;
constexpr double kModeMassMin = 0.10;
constexpr double kGradRelTol = 1e-4;
constexpr std::size_t kGradCombos = 16;
constexpr double kEmdTol = 1e-9;
constexpr double kAlphaBarTol = 1e-12;
constexpr double kMomentTol = 0.05;

// --- experiment sizes -----------------------------------------------------------
constexpr std::size_t kGridRollouts = 10000;
constexpr std::size_t kGridSamples = 4000;
constexpr std::size_t kClawSamplesPerScene = 1000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- 1 --------------------------------------------------------------------------
Outcome posteriors() {
  const auto p = envs::gridworld_exact_posteriors(envs::GridWorldSpec{0.1});
  const double e_right = std::abs(p.p_o1_given[envs::kRight] - 1.0);
  const double e_straight = std::abs(p.p_o1_given[envs::kStraight] - 0.9 / 2.9);
  return {e_right <= kPosteriorTol && e_straight <= kPosteriorTol,
          "p(o1|right)=" + fmt("%.15g", p.p_o1_given[envs::kRight]) +
              " p(o1|straight)=" + fmt("%.15g", p.p_o1_given[envs::kStraight])};
}

// --- 2 --------------------------------------------------------------------------
pipeline::RunConfig grid_config() {
  return pipeline::parse_config(
      "environment=gridworld\nmethod=diffusion_bc\nseed=7\n"
      "data.size=" + std::to_string(kGridRollouts) + "\n"
      // T=50 with beta <= 0.02 leaves alpha_bar(T) near 0.6, and a chain started
      // from N(0, I) then lands a third of its draws in the 10% mode at w=0. A
      // longer chain over the same beta range keeps the prior close to the
      // noised data.
      "diffusion.steps=200\n"
      "train.epochs=40\ntrain.learning_rate=1e-3\ntrain.dropout=0.1\n");
}

Outcome grid_guidance() {
  const auto cfg = grid_config();
  const Rng root(cfg.seed);
  Rng data_rng = root.substream("dataset");
  const auto data = pipeline::make_dataset(cfg, data_rng);
  Rng train_rng = root.substream("training");
  const Checkpoint ck = DiffusionCheckpoint{train_diffusion_policy(data, cfg.diffusion_training(), train_rng), cfg.dropout};
  const auto obs = pipeline::observation_set(cfg)[envs::kDecisionState];
  std::vector<double> freq;
  std::string detail = "right-turn rate at state 1 (T=200):";
  for (double w : {0.0, 1.0, 4.0, 8.0}) {
    auto c = cfg;
    c.guidance = w;
    Rng stream = root.substream("acceptance-sweep");
    const Matrix a = pipeline::sample_from_checkpoint(ck, c, obs, kGridSamples, stream);
    std::size_t right = 0;
    for (std::size_t i = 0; i < a.rows(); ++i) right += envs::decode_grid_action(a.row(i)) == envs::kRight;
    freq.push_back(static_cast<double>(right) / static_cast<double>(a.rows()));
    detail += " w=" + fmt("%g", w) + ":" + fmt("%.4f", freq.back());
  }
  bool monotone = true;
  for (std::size_t i = 1; i < freq.size(); ++i) monotone = monotone && freq[i] >= freq[i - 1];
  return {monotone && freq.back() >= kGridGuidanceRatio * freq.front(), detail};
}

// --- 3 --------------------------------------------------------------------------
pipeline::RunConfig claw_config(pipeline::Method m) {
  auto cfg = pipeline::parse_config("environment=claw\nseed=3\ntrain.learning_rate=1e-3\n");
  cfg.method = m;
  // At 100 epochs the denoiser still blurs region edges on the three-region
  // scene. The remaining out-of-region draws sit just past the edges and come
  // from the last noise injection, which beta_tilde shrinks.
  if (pipeline::is_diffusion(m)) {
    cfg.epochs = 300;
    cfg.sigma = diffusion::SigmaChoice::beta_tilde;
  }
  return cfg;
}

struct ClawSamples {
  std::vector<Matrix> per_scene;  // 1000 x 2 each
};

double rate(const envs::ClawScene& scene, const Matrix& a) {
  std::size_t in = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) in += envs::in_region(scene, a.row(i));
  return static_cast<double>(in) / static_cast<double>(a.rows());
}

ClawSamples draw(const Checkpoint& ck, const pipeline::RunConfig& cfg) {
  ClawSamples out;
  const auto obs = pipeline::observation_set(cfg);
  const Rng root = Rng(cfg.seed).substream("acceptance-sampling");
  for (int s = 0; s < envs::kClawSceneCount; ++s) {
    Rng stream = root.substream("scene", static_cast<std::uint64_t>(s));
    out.per_scene.push_back(pipeline::sample_from_checkpoint(ck, cfg, obs[static_cast<std::size_t>(s)],
                                                             kClawSamplesPerScene, stream));
  }
  return out;
}

void write_cloud(const std::string& path, const ClawSamples& s) {
  std::ofstream f(path);
  f << "scene,x,y\n";
  for (std::size_t sc = 0; sc < s.per_scene.size(); ++sc)
    for (std::size_t i = 0; i < s.per_scene[sc].rows(); ++i)
      f << sc << "," << s.per_scene[sc](i, 0) << "," << s.per_scene[sc](i, 1) << "\n";
}

Outcome claw_phenomena(const std::string& workdir) {
  const auto& scenes = envs::default_claw_scenes();
  const auto base = claw_config(pipeline::Method::diffusion_bc);
  const Rng root(base.seed);
  Rng data_rng = root.substream("dataset");
  const auto data = pipeline::make_dataset(base, data_rng);
  std::vector<std::string> notes;
  bool pass = true;

  auto train_baseline = [&](pipeline::Method m, baselines::Kind kind) {
    const auto cfg = claw_config(m);
    Rng r = root.substream("training").substream(pipeline::to_string(m));
    const Checkpoint ck = baselines::train_baseline(kind, data, cfg.baseline_training(), r);
    const auto s = draw(ck, cfg);
    write_cloud(workdir + "/claw_" + pipeline::to_string(m) + ".csv", s);
    return s;
  };

  // (a) mean collapse
  const auto mse = train_baseline(pipeline::Method::mse, baselines::Kind::mse);
  const double mse_rate = rate(scenes[envs::kBimodalScene], mse.per_scene[envs::kBimodalScene]);
  const bool a_ok = mse_rate <= kMseBimodalMax;
  notes.push_back("(a) mse bimodal " + fmt("%.3f", mse_rate) + (a_ok ? "" : " FAIL"));
  pass = pass && a_ok;

  // (b) marginal-product corner
  const auto disc = train_baseline(pipeline::Method::discretised, baselines::Kind::discretised);
  const double outside = 1.0 - rate(scenes[envs::kDiagonalScene], disc.per_scene[envs::kDiagonalScene]);
  const bool b_ok = outside >= kDiscretisedCornerMin;
  notes.push_back("(b) discretised diagonal outside " + fmt("%.3f", outside) + (b_ok ? "" : " FAIL"));
  pass = pass && b_ok;

  // Remaining baselines feed the figure data only.
  train_baseline(pipeline::Method::kmeans, baselines::Kind::kmeans);
  train_baseline(pipeline::Method::kmeans_residual, baselines::Kind::kmeans_residual);

  // (c) Diffusion BC
  Rng train_rng = root.substream("training").substream("diffusion");
  const Checkpoint ck = DiffusionCheckpoint{train_diffusion_policy(data, base.diffusion_training(), train_rng), base.dropout};
  const auto bc = draw(ck, base);
  write_cloud(workdir + "/claw_diffusion_bc.csv", bc);
  double bc_min = 1.0, bc_sum = 0.0;
  std::string per;
  for (int s = 0; s < envs::kClawSceneCount; ++s) {
    const double r = rate(scenes[static_cast<std::size_t>(s)], bc.per_scene[static_cast<std::size_t>(s)]);
    bc_min = std::min(bc_min, r);
    bc_sum += r;
    per += (s ? "," : "") + fmt("%.3f", r);
  }
  const double bc_overall = bc_sum / envs::kClawSceneCount;
  const bool c_ok = bc_min >= kBcPerSceneMin;
  notes.push_back("(c) diffusion_bc per scene [" + per + "]" + (c_ok ? "" : " FAIL"));
  pass = pass && c_ok;

  // (d) refined samplers
  for (pipeline::Method m : {pipeline::Method::diffusion_x, pipeline::Method::diffusion_kde}) {
    auto cfg = base;
    cfg.method = m;
    cfg.extra_steps = m == pipeline::Method::diffusion_x ? 8 : 0;
    cfg.kde_samples = 100;
    cfg.kde_width = 0.4;
    const auto s = draw(ck, cfg);
    write_cloud(workdir + "/claw_" + pipeline::to_string(m) + ".csv", s);
    double sum = 0.0, min_mode = 1.0;
    int min_scene = -1;
    for (int sc = 0; sc < envs::kClawSceneCount; ++sc) {
      const auto& scene = scenes[static_cast<std::size_t>(sc)];
      const Matrix& a = s.per_scene[static_cast<std::size_t>(sc)];
      sum += rate(scene, a);
      if (scene.regions.size() < 2) continue;
      std::vector<double> counts(scene.regions.size(), 0.0);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        const int r = envs::region_of(scene, a.row(i));
        if (r >= 0) counts[static_cast<std::size_t>(r)] += 1.0;
      }
      for (double c : counts)
        if (c / static_cast<double>(a.rows()) < min_mode) {
          min_mode = c / static_cast<double>(a.rows());
          min_scene = sc;
        }
    }
    const double overall = sum / envs::kClawSceneCount;
    const bool ok = overall >= bc_overall && overall >= kRefinedOverallMin && min_mode >= kModeMassMin;
    notes.push_back(std::string("(d) ") + pipeline::to_string(m) + " overall " + fmt("%.3f", overall) + " vs bc " +
                    fmt("%.3f", bc_overall) + ", smallest mode " + fmt("%.3f", min_mode) + " (scene " + std::to_string(min_scene) + ")" +
                    (ok ? "" : " FAIL"));
    pass = pass && ok;
  }

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {pass, detail};
}

// --- 4 --------------------------------------------------------------------------
Outcome degeneracies() {
  std::size_t cases = 0, equal = 0;
  for (auto arch : {diffusion::Architecture::basic_mlp, diffusion::Architecture::mlp_sieve})
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      Rng init(seed);
      diffusion::DenoiserSpec spec;
      spec.architecture = arch;
      spec.obs_dim = 7;
      spec.action_dim = 2;
      spec.hidden = 32;
      spec.depth = 3;
      spec.embed_dim = 16;
      spec.steps = 50;
      samplers::DiffusionPolicy policy{diffusion::make_denoiser(spec, init), diffusion::build_schedule(50, 1e-4, 0.02),
                                       Normalizer::identity(2)};
      const auto obs = envs::claw_observation(static_cast<int>(seed % 7));
      for (std::uint64_t s = 0; s < 10; ++s) {
        Rng r_bc(s), r_x(s), r_w(s), r_k(s);
        const samplers::SamplerConfig plain;
        const auto bc = samplers::sample_diffusion_bc(policy, obs, plain, r_bc);
        samplers::SamplerConfig x0;
        x0.scheme = samplers::Scheme::diffusion_x;
        x0.extra_steps = 0;
        samplers::SamplerConfig w0;
        w0.guidance = 0.0;
        samplers::SamplerConfig k1;
        k1.scheme = samplers::Scheme::diffusion_kde;
        k1.kde_samples = 1;
        Rng single = Rng(s).substream("kde", 0);
        equal += samplers::sample_diffusion_x(policy, obs, x0, r_x) == bc;
        equal += samplers::sample_diffusion_bc(policy, obs, w0, r_w) == bc;
        equal += samplers::sample_diffusion_kde(policy, obs, k1, r_k) ==
                 samplers::sample_diffusion_bc(policy, obs, plain, single);
        cases += 3;
      }
    }
  return {equal == cases, std::to_string(equal) + "/" + std::to_string(cases) + " bit-identical"};
}

// --- 5 --------------------------------------------------------------------------
Outcome gradients() {
  double worst = 0.0;
  std::size_t combos = 0, params = 0;
  for (auto arch : {diffusion::Architecture::basic_mlp, diffusion::Architecture::mlp_sieve})
    for (std::uint64_t seed = 1; seed <= kGradCombos / 2; ++seed) {
      Rng rng(seed * 7919);
      diffusion::DenoiserSpec spec;
      spec.architecture = arch;
      spec.history = 1 + seed % 2;
      spec.obs_dim = 4 * spec.history;
      spec.action_dim = 1 + seed % 3;
      spec.hidden = 10;
      spec.depth = 1 + seed % 3;
      spec.embed_dim = 6;
      spec.time_embed_dim = 8;
      spec.steps = 30;
      auto model = diffusion::make_denoiser(spec, rng);
      const auto r = testutil::check_denoiser_gradients(*model, rng);
      worst = std::max(worst, r.worst_rel);
      params += r.checked;
      ++combos;
    }
  return {combos >= kGradCombos && worst < kGradRelTol,
          std::to_string(combos) + " models, " + std::to_string(params) + " parameters, worst rel err " +
              fmt("%.2e", worst)};
}

// --- 6 --------------------------------------------------------------------------
Outcome metric_oracles() {
  Rng rng(2024);
  double worst_emd = 0.0;
  for (int t = 0; t < 100; ++t) {
    const Matrix p = testutil::random_matrix(6, 2, rng), q = testutil::random_matrix(6, 2, rng);
    const std::vector<int> ones(6, 1);
    const double got = metrics::emd(metrics::EmpiricalDistribution::uniform(p), metrics::EmpiricalDistribution::uniform(q));
    worst_emd = std::max(worst_emd, std::abs(got - oracle::emd_by_enumeration(p, ones, q, ones)));
  }
  std::size_t dc_exact = 0;
  bool self_cover = true;
  for (int t = 0; t < 50; ++t) {
    const auto nr = static_cast<std::size_t>(rng.integer(5, 200)), nf = static_cast<std::size_t>(rng.integer(1, 200));
    const auto dim = static_cast<std::size_t>(rng.integer(1, 3));
    const auto k = static_cast<std::size_t>(rng.integer(1, std::min<std::int64_t>(5, static_cast<std::int64_t>(nr) - 1)));
    const Matrix r = testutil::random_matrix(nr, dim, rng), f = testutil::random_matrix(nf, dim, rng);
    const auto got = metrics::density_coverage(r, f, k);
    const auto ref = oracle::density_coverage(r, f, k);
    dc_exact += got.density == ref.density && got.coverage == ref.coverage;
    self_cover = self_cover && metrics::density_coverage(r, r, k).coverage == 1.0;
  }
  return {worst_emd <= kEmdTol && dc_exact == 50 && self_cover,
          "emd worst |diff| " + fmt("%.2e", worst_emd) + ", density/coverage exact " + std::to_string(dc_exact) +
              "/50, self coverage " + (self_cover ? "1" : "<1")};
}

// --- 7 --------------------------------------------------------------------------
Outcome schedule_and_noise() {
  using hp = boost::multiprecision::cpp_dec_float_50;
  double worst = 0.0;
  for (int T : {1, 20, 50}) {
    const auto s = diffusion::build_schedule(T, 1e-4, 0.02);
    hp prod = 1;
    for (int t = 1; t <= T; ++t) {
      const hp frac = T == 1 ? hp(0) : hp(t - 1) / hp(T - 1);
      prod *= 1 - (hp("1e-4") + (hp("0.02") - hp("1e-4")) * frac);
      worst = std::max(worst, std::abs(s.alpha_bar(t) - prod.convert_to<double>()));
    }
  }
  const auto s = diffusion::build_schedule(50, 1e-4, 0.02);
  const std::vector<double> a = {0.8, -0.5};
  Rng rng(99);
  const int n = 100000;
  double m[2] = {0, 0}, c[2][2] = {{0, 0}, {0, 0}};
  std::vector<double> z(2);
  std::vector<std::vector<double>> ys;
  ys.reserve(n);
  for (int i = 0; i < n; ++i) {
    rng.fill_normal(z);
    ys.push_back(diffusion::forward_noise(a, 50, s, z));
    m[0] += ys.back()[0], m[1] += ys.back()[1];
  }
  m[0] /= n, m[1] /= n;
  for (const auto& y : ys)
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) c[i][j] += (y[i] - m[i]) * (y[j] - m[j]) / n;
  const double ab = s.alpha_bar(50);
  double worst_moment = 0.0;
  for (int i = 0; i < 2; ++i) {
    worst_moment = std::max(worst_moment, std::abs(m[i] / (std::sqrt(ab) * a[static_cast<std::size_t>(i)]) - 1));
    worst_moment = std::max(worst_moment, std::abs(c[i][i] / (1 - ab) - 1));
  }
  worst_moment = std::max(worst_moment, std::abs(c[0][1]) / (1 - ab));
  return {worst <= kAlphaBarTol && worst_moment <= kMomentTol,
          "alpha_bar worst |diff| " + fmt("%.2e", worst) + ", worst relative moment error " + fmt("%.4f", worst_moment)};
}

// --- 8 --------------------------------------------------------------------------
std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome determinism(const std::string& workdir) {
  const char* files[] = {"config.json", "dataset.bin", "model.ckpt", "loss.csv", "samples.jsonl",
                         "samples.meta.json", "metrics.json", "metrics.csv"};
  std::size_t identical = 0, compared = 0;
  for (const char* method : {"diffusion_x", "kmeans_residual"}) {
    std::vector<std::string> dirs;
    for (int rep = 0; rep < 2; ++rep) {
      const std::string dir = workdir + "/determinism_" + method + "_" + std::to_string(rep);
      fs::remove_all(dir);
      const auto cfg = pipeline::parse_config(std::string("environment=claw\nseed=5\nmethod=") + method +
                                              "\ndata.size=3000\ntrain.epochs=3\neval.reference_size=2000\noutput_dir=" +
                                              dir + "\n");
      pipeline::cmd_train(cfg);
      pipeline::cmd_eval(cfg, pipeline::cmd_sample(cfg, dir + "/model.ckpt", 100));
      dirs.push_back(dir);
    }
    for (const char* f : files) {
      ++compared;
      identical += slurp(dirs[0] + "/" + f) == slurp(dirs[1] + "/" + f) && fs::file_size(dirs[0] + "/" + f) > 0;
    }
  }
  return {identical == compared, std::to_string(identical) + "/" + std::to_string(compared) + " artifacts byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string workdir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory for run artifacts");
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(workdir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"grid-world exact posteriors", posteriors},
      {"guidance raises the grid-world right-turn rate", grid_guidance},
      {"claw expressiveness phenomena", [&] { return claw_phenomena(workdir); }},
      {"sampler degeneracies are exact", degeneracies},
      {"denoiser gradients match finite differences", gradients},
      {"metric oracles", metric_oracles},
      {"schedule and forward noising", schedule_and_noise},
      {"train, sample, eval determinism", [&] { return determinism(workdir); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] criterion %d: %s | %s | %.1fs\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
