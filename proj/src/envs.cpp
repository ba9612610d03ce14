#include "dbc/envs.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>

#include <nlohmann/json.hpp>

#include "dbc/nnet.hpp"

namespace dbc::envs {

double area(const Region& region) {
  return std::visit(
      [](const auto& g) -> double {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, Disc>)
          return std::numbers::pi * g.r * g.r;
        else
          return (g.x1 - g.x0) * (g.y1 - g.y0);
      },
      region);
}

bool contains(const Region& region, double x, double y) {
  return std::visit(
      [x, y](const auto& g) -> bool {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, Disc>) {
          const double dx = x - g.cx;
          const double dy = y - g.cy;
          return dx * dx + dy * dy <= g.r * g.r;
        } else {
          return x >= g.x0 && x <= g.x1 && y >= g.y0 && y <= g.y1;
        }
      },
      region);
}

namespace {

bool inside_unit_square(const Region& region) {
  return std::visit(
      [](const auto& g) -> bool {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, Disc>)
          return g.cx - g.r >= 0.0 && g.cx + g.r <= 1.0 && g.cy - g.r >= 0.0 && g.cy + g.r <= 1.0;
        else
          return g.x0 >= 0.0 && g.x1 <= 1.0 && g.y0 >= 0.0 && g.y1 <= 1.0;
      },
      region);
}

std::array<ClawScene, kClawSceneCount> build_fixture() {
  std::array<ClawScene, kClawSceneCount> s;
  // 0: one central toy.
  s[0].regions = {Disc{0.5, 0.5, 0.16}};
  // 1: two equal toys left and right; their mean lies in the empty gap.
  s[1].regions = {Disc{0.25, 0.5, 0.15}, Disc{0.75, 0.5, 0.15}};
  // 2: diagonal pair; the product of marginals puts half its mass off-diagonal.
  s[2].regions = {Rect{0.1, 0.1, 0.4, 0.4}, Rect{0.6, 0.6, 0.9, 0.9}};
  // 3: three equal toys.
  s[3].regions = {Disc{0.2, 0.22, 0.12}, Disc{0.8, 0.22, 0.12}, Disc{0.5, 0.78, 0.12}};
  // 4: disc and rectangle of equal area.
  s[4].regions = {Disc{0.3, 0.7, 0.15}, Rect{0.55, 0.15, 0.83, 0.15 + std::numbers::pi * 0.15 * 0.15 / 0.28}};
  // 5: one long bar.
  s[5].regions = {Rect{0.15, 0.4, 0.85, 0.6}};
  // 6: scene 0's toy plus an equal-area toy seen in no other scene.
  s[6].regions = {Disc{0.5, 0.5, 0.16}, Rect{0.3, 0.75, 0.7, 0.75 + std::numbers::pi * 0.16 * 0.16 / 0.4}};
  for (int i = 0; i < kClawSceneCount; ++i) s[static_cast<std::size_t>(i)].id = i;
  return s;
}

}  // namespace

const std::array<ClawScene, kClawSceneCount>& default_claw_scenes() {
  static const std::array<ClawScene, kClawSceneCount> scenes = [] {
    auto s = build_fixture();
    for (const auto& sc : s) validate_scene(sc);
    return s;
  }();
  return scenes;
}

void validate_scene(const ClawScene& scene) {
  if (scene.regions.empty()) throw ConfigError("claw scene " + std::to_string(scene.id) + " has no regions");
  for (const auto& r : scene.regions) {
    if (!(area(r) > 0.0)) throw ConfigError("claw scene " + std::to_string(scene.id) + " has an empty region");
    if (!inside_unit_square(r)) throw ConfigError("claw scene " + std::to_string(scene.id) + " leaves the unit square");
  }
}

int region_of(const ClawScene& scene, std::span<const double> action) {
  if (action.size() != kClawActionDim) throw ShapeError("claw actions are 2-D");
  for (std::size_t i = 0; i < scene.regions.size(); ++i)
    if (contains(scene.regions[i], action[0], action[1])) return static_cast<int>(i);
  return -1;
}

bool in_region(const ClawScene& scene, std::span<const double> action) { return region_of(scene, action) >= 0; }

std::vector<double> sample_demo(const ClawScene& scene, Rng& rng) {
  double total = 0.0;
  for (const auto& r : scene.regions) total += area(r);
  double u = rng.uniform() * total;
  std::size_t pick = scene.regions.size() - 1;
  for (std::size_t i = 0; i < scene.regions.size(); ++i) {
    const double a = area(scene.regions[i]);
    if (u < a) {
      pick = i;
      break;
    }
    u -= a;
  }
  return std::visit(
      [&rng](const auto& g) -> std::vector<double> {
        using G = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<G, Disc>) {
          for (;;) {
            const double x = rng.uniform(g.cx - g.r, g.cx + g.r);
            const double y = rng.uniform(g.cy - g.r, g.cy + g.r);
            if ((x - g.cx) * (x - g.cx) + (y - g.cy) * (y - g.cy) <= g.r * g.r) return {x, y};
          }
        } else {
          const double x = rng.uniform(g.x0, g.x1);
          const double y = rng.uniform(g.y0, g.y1);
          return {x, y};
        }
      },
      scene.regions[pick]);
}

std::vector<double> claw_observation(int scene, std::size_t history) {
  if (scene < 0 || scene >= kClawSceneCount) throw DomainError("claw scene id out of range");
  std::vector<double> o(kClawSceneCount * history, 0.0);
  o[static_cast<std::size_t>(scene)] = 1.0;
  return o;
}

DemoDataset generate_claw_dataset(std::span<const ClawScene> scenes, std::size_t n, Rng& rng,
                                  const ClawDatasetOptions& opts) {
  if (n == 0) throw ConfigError("dataset size must be >= 1");
  if (scenes.empty()) throw ConfigError("no claw scenes");
  if (opts.history == 0) throw ConfigError("history length must be >= 1");
  const std::size_t S = scenes.size();
  DemoDataset d;
  d.history = opts.history;
  d.observations = Matrix(n, kClawSceneCount * opts.history);
  d.actions = Matrix(n, kClawActionDim);
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t s = opts.round_robin ? i % S : static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(S) - 1));
    const ClawScene& scene = scenes[s];
    const auto a = sample_demo(scene, rng);
    if (!in_region(scene, a)) throw StateError("generated demonstration fell outside its scene");
    const auto o = claw_observation(scene.id, opts.history);
    std::copy(o.begin(), o.end(), d.observations.row(i).begin());
    std::copy(a.begin(), a.end(), d.actions.row(i).begin());
    d.labels[i] = scene.id;
  }
  return d;
}

// --- grid-world ---------------------------------------------------------------

GridPosteriors gridworld_exact_posteriors(const GridWorldSpec& spec) {
  const double p = spec.p_right;
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("p_right must lie in (0,1)");
  // Demonstration policy p(a|o_i).
  double policy[kGridStates][kGridActions] = {
      {0.0, 1.0, 0.0},
      {0.0, 1.0 - p, p},
      {0.0, 1.0, 0.0},
      {0.0, 1.0, 0.0},
  };
  // A rollout visits three states: 0, 1, then 2 (right) or 3 (straight).
  GridPosteriors out;
  out.p_obs = {1.0 / 3.0, 1.0 / 3.0, p / 3.0, (1.0 - p) / 3.0};
  for (std::size_t a = 0; a < kGridActions; ++a) {
    double total = 0.0;
    for (std::size_t o = 0; o < kGridStates; ++o) total += policy[o][a] * out.p_obs[o];
    out.p_action[a] = total;
    out.p_o1_given[a] = total > 0.0 ? policy[kDecisionState][a] * out.p_obs[kDecisionState] / total
                                    : std::numeric_limits<double>::quiet_NaN();
  }
  return out;
}

std::vector<double> gridworld_observation(int state, int previous, std::size_t history) {
  if (state < 0 || state >= static_cast<int>(kGridStates)) throw DomainError("grid-world state out of range");
  if (history == 0) throw ConfigError("history length must be >= 1");
  std::vector<double> o(kGridStates * history, 0.0);
  o[static_cast<std::size_t>(state)] = 1.0;
  if (history > 1 && previous >= 0) o[kGridStates + static_cast<std::size_t>(previous)] = 1.0;
  return o;
}

DemoDataset generate_gridworld_dataset(const GridWorldSpec& spec, std::size_t rollouts, Rng& rng,
                                       std::size_t history) {
  if (rollouts == 0) throw ConfigError("rollout count must be >= 1");
  if (!(spec.p_right >= 0.0 && spec.p_right <= 1.0)) throw ConfigError("p_right must lie in [0,1]");
  const std::size_t n = 3 * rollouts;
  DemoDataset d;
  d.history = history;
  d.observations = Matrix(n, kGridStates * history);
  d.actions = Matrix(n, kGridActions);
  d.labels.resize(n);
  std::size_t row = 0;
  auto emit = [&](int state, int previous, int action) {
    const auto o = gridworld_observation(state, previous, history);
    std::copy(o.begin(), o.end(), d.observations.row(row).begin());
    d.actions(row, static_cast<std::size_t>(action)) = 1.0;
    d.labels[row] = state;
    ++row;
  };
  for (std::size_t r = 0; r < rollouts; ++r) {
    emit(0, -1, kStraight);
    const bool right = rng.uniform() < spec.p_right;
    emit(kDecisionState, 0, right ? kRight : kStraight);
    emit(right ? 2 : 3, kDecisionState, kStraight);
  }
  return d;
}

int decode_grid_action(std::span<const double> action) {
  if (action.size() != kGridActions) throw ShapeError("grid-world actions are 3-D");
  return static_cast<int>(std::max_element(action.begin(), action.end()) - action.begin());
}

// --- files --------------------------------------------------------------------

namespace {
constexpr char kDataMagic[8] = {'D', 'B', 'C', 'D', 'A', 'T', 'A', '\0'};
constexpr std::uint32_t kDataVersion = 1;
}  // namespace

void save_dataset(const std::string& path, const DemoDataset& data) {
  nnet::ByteWriter w;
  w.raw({reinterpret_cast<const std::uint8_t*>(kDataMagic), 8});
  w.u32(kDataVersion);
  w.u64(data.observations.cols());
  w.u64(data.actions.cols());
  w.u64(data.size());
  w.f64s(data.observations.flat());
  w.f64s(data.actions.flat());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  if (!f) throw IoError("failed writing " + path);
}

DemoDataset load_dataset(const std::string& path, std::size_t history) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 36 || std::memcmp(bytes.data(), kDataMagic, 8) != 0) throw CorruptionError(path + ": not a dataset file");
  nnet::ByteReader r(std::span<const std::uint8_t>(bytes).subspan(8));
  if (r.u32() != kDataVersion) throw CorruptionError(path + ": unsupported dataset version");
  const std::uint64_t od = r.u64();
  const std::uint64_t ad = r.u64();
  const std::uint64_t n = r.u64();
  if (od == 0 || ad == 0 || r.remaining() != 8 * n * (od + ad)) throw CorruptionError(path + ": size mismatch");
  if (history == 0 || od % history != 0) throw ConfigError("history does not divide the observation width");
  DemoDataset d;
  d.history = history;
  d.observations = Matrix(n, od);
  d.actions = Matrix(n, ad);
  r.f64s(d.observations.flat());
  r.f64s(d.actions.flat());
  const std::size_t frame = od / history;
  d.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = d.observations.row(i).first(frame);
    d.labels[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return d;
}

void export_dataset_jsonl(const std::string& path, const DemoDataset& data) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  for (std::size_t i = 0; i < data.size(); ++i) {
    nlohmann::json j;
    auto o = data.observations.row(i);
    auto a = data.actions.row(i);
    j["obs"] = std::vector<double>(o.begin(), o.end());
    j["action"] = std::vector<double>(a.begin(), a.end());
    j["label"] = data.labels[i];
    f << j.dump() << '\n';
  }
  if (!f) throw IoError("failed writing " + path);
}

}  // namespace dbc::envs
