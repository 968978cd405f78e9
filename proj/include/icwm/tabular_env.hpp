#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icwm/common.hpp"

namespace icwm::tabular {

enum class EnvKind { kMdp, kPomdp };

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& name);

struct Dims {
  std::size_t states = 0;
  std::size_t actions = 0;
  std::size_t obs = 0;

  std::size_t queries() const { return states * actions; }
  bool operator==(const Dims&) const = default;
};

using ProbVector = std::vector<double>;

/// A tabular (PO)MDP. Transition rows are indexed [s][a][s'], observation
/// rows [s][o]; both flattened row-major. For an MDP the observation table is
/// the identity and obs == states.
struct DiscreteEnv {
  Dims dims;
  EnvKind kind = EnvKind::kMdp;
  std::uint64_t env_id = 0;
  std::vector<double> transition;
  std::vector<double> observation;

  std::span<const double> transition_row(std::size_t s, std::size_t a) const;
  std::span<const double> observation_row(std::size_t s) const;

  /// Throws ContractViolation if any row is not a distribution (1e-12).
  void validate() const;
};

struct EnvFamilyConfig {
  std::size_t count = 1;
  Dims dims{};
  double concentration = 1.0;
  double determinism_fraction = 0.0;
  EnvKind kind = EnvKind::kMdp;
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
};

enum class ContextMode { kUniformQuery, kRollout };

std::string to_string(ContextMode mode);
ContextMode context_mode_from_string(const std::string& name);

/// One (s, a, o') record. `belief`, when non-empty, is the filtered belief
/// over states at the time of the query and replaces the one-hot `state` in
/// belief-weighted accumulation.
struct ContextRecord {
  std::size_t state = 0;
  std::size_t action = 0;
  std::size_t next_obs = 0;
  std::vector<double> belief;
};

struct DiscreteContext {
  ContextMode mode = ContextMode::kUniformQuery;
  std::vector<ContextRecord> records;

  std::size_t length() const { return records.size(); }
};

/// Draws `config.count` environments; deterministic in config.seed.
std::vector<DiscreteEnv> sample_env_family(const EnvFamilyConfig& config);

/// Draws a single environment from the family law with its own stream seed.
DiscreteEnv sample_env(const EnvFamilyConfig& config, std::uint64_t stream_seed,
                       std::uint64_t env_id);

struct StepResult {
  std::size_t next_state = 0;
  std::size_t next_obs = 0;
};

StepResult step(const DiscreteEnv& env, std::size_t s, std::size_t a, Rng& rng);

/// UNIFORM_QUERY: (s, a) i.i.d. uniform. ROLLOUT: trajectory from state 0
/// under uniform-random actions; POMDP rollouts attach the exact filtered
/// belief to every record.
DiscreteContext sample_context(const DiscreteEnv& env, std::size_t length,
                               ContextMode mode, Rng& rng);

/// p(o' | s, a) = sum_{s'} T(s, a, s') Z(s', o').
ProbVector true_transition_dist(const DiscreteEnv& env, std::size_t s,
                                std::size_t a);

/// Bayes filter: b'(s') ∝ Z(s', o) sum_s b(s) T(s, a, s'). Throws
/// ContractViolation when the observation has zero predictive probability.
ProbVector filter_belief(const DiscreteEnv& env, std::span<const double> belief,
                         std::size_t a, std::size_t o);

std::size_t sample_categorical(std::span<const double> probs, Rng& rng);

// JSON document: {format_version, config, envs: [...]}.
nlohmann::json family_to_json(const EnvFamilyConfig& config,
                              std::span<const DiscreteEnv> envs);
std::vector<DiscreteEnv> family_from_json(const nlohmann::json& doc,
                                          EnvFamilyConfig* config = nullptr);
nlohmann::json env_to_json(const DiscreteEnv& env);
DiscreteEnv env_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const EnvFamilyConfig& config);
EnvFamilyConfig config_from_json(const nlohmann::json& doc);

inline constexpr int kFamilyFormatVersion = 1;

}  // namespace icwm::tabular
