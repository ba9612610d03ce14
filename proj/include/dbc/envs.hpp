#pragma once

// Synthetic evaluation environments: the seven-scene claw machine with exact
// region membership, and the four-state grid-world with its exact Bayes table.

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "dbc/matrix.hpp"
#include "dbc/normalizer.hpp"
#include "dbc/rng.hpp"

namespace dbc::envs {

struct Disc {
  double cx, cy, r;
};

struct Rect {
  double x0, y0, x1, y1;
};

using Region = std::variant<Disc, Rect>;

double area(const Region& region);
bool contains(const Region& region, double x, double y);

struct ClawScene {
  int id = 0;
  std::vector<Region> regions;
};

inline constexpr int kClawSceneCount = 7;
inline constexpr int kClawFixtureVersion = 1;
inline constexpr std::size_t kClawActionDim = 2;

/// Frozen fixture. Scene 1 is the symmetric bimodal scene, scene 2 the
/// diagonal scene, scene 6 shares its disc with scene 0 and adds a region
/// unique to itself.
const std::array<ClawScene, kClawSceneCount>& default_claw_scenes();

inline constexpr int kBimodalScene = 1;
inline constexpr int kDiagonalScene = 2;

/// Throws ConfigError when a scene violates the fixture rules.
void validate_scene(const ClawScene& scene);

bool in_region(const ClawScene& scene, std::span<const double> action);
/// Index of the first region containing the action, or -1.
int region_of(const ClawScene& scene, std::span<const double> action);
std::vector<double> sample_demo(const ClawScene& scene, Rng& rng);

/// Observation and action rows. `labels` holds the scene id (claw) or state
/// (grid-world) of each row's current frame.
struct DemoDataset {
  Matrix observations;
  Matrix actions;
  std::vector<int> labels;
  std::size_t history = 1;

  std::size_t size() const { return actions.rows(); }
  Normalizer action_normalizer() const { return Normalizer::fit(actions); }
};

struct ClawDatasetOptions {
  std::size_t history = 1;
  bool round_robin = false;  // scene = row % 7 instead of a uniform draw
};

DemoDataset generate_claw_dataset(std::span<const ClawScene> scenes, std::size_t n, Rng& rng,
                                  const ClawDatasetOptions& opts = {});

/// One-hot observation of a claw scene, padded with zero frames for history.
std::vector<double> claw_observation(int scene, std::size_t history = 1);

// --- grid-world ---------------------------------------------------------------

enum GridAction : int { kLeft = 0, kStraight = 1, kRight = 2 };
inline constexpr std::size_t kGridStates = 4;
inline constexpr std::size_t kGridActions = 3;
inline constexpr int kDecisionState = 1;

struct GridWorldSpec {
  double p_right = 0.1;
};

struct GridPosteriors {
  std::array<double, kGridStates> p_obs{};          // p(o_i)
  std::array<double, kGridActions> p_action{};      // p(a)
  std::array<double, kGridActions> p_o1_given{};    // p(o_1 | a); NaN where p(a) = 0
};

/// Exact tables by Bayes' rule over the demonstration distribution.
GridPosteriors gridworld_exact_posteriors(const GridWorldSpec& spec);

std::vector<double> gridworld_observation(int state, int previous = -1, std::size_t history = 1);

DemoDataset generate_gridworld_dataset(const GridWorldSpec& spec, std::size_t rollouts, Rng& rng,
                                       std::size_t history = 1);

/// Action decoded from a continuous sample by argmax.
int decode_grid_action(std::span<const double> action);

// --- dataset files ------------------------------------------------------------

/// Binary: magic "DBCDATA", version u32, |o| u64, |a| u64, N u64, then the
/// observation block and action block, row-major little-endian f64.
void save_dataset(const std::string& path, const DemoDataset& data);
/// `history` is not stored in the file and is supplied by the caller.
DemoDataset load_dataset(const std::string& path, std::size_t history = 1);
void export_dataset_jsonl(const std::string& path, const DemoDataset& data);

}  // namespace dbc::envs
