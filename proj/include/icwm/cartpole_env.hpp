#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icwm/common.hpp"

namespace icwm::cartpole {

inline constexpr std::size_t kObsDim = 4;
inline constexpr std::size_t kNumActions = 2;

struct CartPoleParams {
  double g = 9.8;
  double m_c = 1.0;
  double m_p = 0.1;
  double l = 0.5;  // half-length

  std::array<double, 4> to_array() const { return {g, m_c, m_p, l}; }
  bool operator==(const CartPoleParams&) const = default;
};

struct CartPoleState {
  double x = 0.0;
  double x_dot = 0.0;
  double theta = 0.0;
  double theta_dot = 0.0;

  std::array<double, 4> to_array() const { return {x, x_dot, theta, theta_dot}; }
  bool operator==(const CartPoleState&) const = default;
};

enum class Scope { kScope1, kScope1Plus2Excl1, kScope1Plus2, kOriginal };

std::string to_string(Scope scope);
Scope scope_from_string(const std::string& name);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
  bool contains(double v) const { return lo <= v && v <= hi; }
};

/// Per-parameter ranges in (g, m_c, m_p, l) order. ORIGINAL is a point box.
std::array<Range, 4> scope_ranges(Scope scope);

bool inside_scope1(const CartPoleParams& p);

CartPoleParams sample_params(Scope scope, Rng& rng);

enum class Integrator { kEuler, kSemiImplicitEuler };

std::string to_string(Integrator integrator);
Integrator integrator_from_string(const std::string& name);

struct DynamicsConfig {
  double force_mag = 10.0;
  double dt = 0.02;
  Integrator integrator = Integrator::kEuler;
};

/// One step with an explicit applied force.
CartPoleState step_force(const CartPoleParams& p, const CartPoleState& s, double force,
                         const DynamicsConfig& cfg = {});

/// Action 1 pushes right (+force_mag), action 0 pushes left.
CartPoleState step_dynamics(const CartPoleParams& p, const CartPoleState& s, int action,
                            const DynamicsConfig& cfg = {});

inline constexpr std::array<double, 4> kPolicyWeights = {0.05, 0.3, 12.0, 2.0};

/// 1 if w . state >= 0 else 0.
int scripted_policy(const CartPoleState& s);

struct Trajectory {
  CartPoleParams params;
  double noise_level = 0.0;
  std::vector<float> observations;  // (length + 1) x kObsDim, row-major
  std::vector<std::uint8_t> actions;

  std::size_t length() const { return actions.size(); }
  const float* obs(std::size_t t) const { return observations.data() + t * kObsDim; }
};

/// Runs `length` steps from `initial` (or a U[-0.05, 0.05]^4 draw). Each step
/// takes a uniform-random action with probability noise_level, otherwise the
/// scripted action. No termination on pole fall.
Trajectory collect_trajectory(const CartPoleParams& params, double noise_level, std::size_t length,
                              Rng& rng, std::optional<CartPoleState> initial = std::nullopt,
                              const DynamicsConfig& dyn = {});

struct DatasetSpec {
  std::string name = "dataset";
  std::size_t n_envs = 1;
  Scope scope = Scope::kOriginal;
  std::size_t traj_per_env = 1;
  std::size_t length = 200;
  double noise_lo = 0.3;
  double noise_hi = 0.7;
  Integrator integrator = Integrator::kEuler;

  std::size_t total_steps() const { return n_envs * traj_per_env * length; }
  void validate() const;
};

struct Dataset {
  DatasetSpec spec;
  std::uint64_t seed = 0;
  std::vector<CartPoleParams> env_params;
  std::vector<Trajectory> trajectories;  // env-major

  std::size_t env_of(std::size_t traj_index) const { return traj_index / spec.traj_per_env; }
  std::size_t total_steps() const;
};

/// Deterministic under (spec, seed); env i and trajectory (i, j) draw from
/// independent derived streams so `threads` does not change the result.
Dataset build_dataset(const DatasetSpec& spec, std::uint64_t seed, std::size_t threads = 1);

inline constexpr int kDatasetFormatVersion = 1;

void write_dataset(const Dataset& ds, std::ostream& out);
Dataset read_dataset(std::istream& in);
void save_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

nlohmann::json spec_to_json(const DatasetSpec& spec);
DatasetSpec spec_from_json(const nlohmann::json& doc);
nlohmann::json dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(const nlohmann::json& doc);

}  // namespace icwm::cartpole
