#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icwm/estimators.hpp"
#include "icwm/tabular_env.hpp"

namespace icwm::bounds {

using tabular::DiscreteEnv;
using tabular::Dims;

struct BoundConfig {
  double delta = 0.1;
  std::vector<std::size_t> T_grid;  // strictly ascending, positive
  std::size_t trials = 200;
  std::uint64_t seed = 0;
  std::size_t fit_samples = 100000;  // per training environment
  double model_smoothing = 1.0;
  double el_smoothing = 0.0;
  std::size_t threads = 1;

  void validate() const;
};

/// min{ alpha (|E| - 1) / (3 sqrt(T)) + best, worst }.
double er_bound(double alpha, std::size_t n_envs, double T, double best_tv, double worst_tv);

/// 4 |S|^2 |A|^2 ln(4 |S| |A| / delta).
double el_threshold(const Dims& dims, double delta);

struct ElBound {
  double value = 0.0;
  bool valid = false;  // T above el_threshold
};

/// sqrt(2 |O| |S| |A| ln(4 |O| / delta) / T).
ElBound el_bound(const Dims& dims, double delta, double T);

/// Same radical with ln(4 |S| / delta), the form on the last line of the
/// derivation; reported alongside for comparison only.
double el_bound_state_log_variant(const Dims& dims, double delta, double T);

/// One-sided 95% Clopper-Pearson upper limit for k successes out of n.
double binomial_upper95(std::size_t k, std::size_t n);

enum class PredictorKind { kEl, kErArgmax, kErMixture };
std::string to_string(PredictorKind kind);
PredictorKind predictor_from_string(const std::string& name);

struct TrialRecord {
  PredictorKind predictor = PredictorKind::kEl;
  std::size_t T = 0;
  std::size_t trial = 0;
  double empirical_tv = 0.0;
  double bound = 0.0;
  bool valid = true;
  bool violated = false;
};

struct GridPoint {
  PredictorKind predictor = PredictorKind::kEl;
  std::size_t T = 0;
  double median_tv = 0.0;
  double mean_tv = 0.0;
  double bound = 0.0;
  bool valid = true;
  std::size_t violations = 0;
  std::size_t counted = 0;  // trials eligible for violation counting
  double violation_rate = 0.0;
  double violation_upper95 = 0.0;
  double misidentification_rate = 0.0;  // ER argmax only
};

/// Training environments fitted by maximum-likelihood counting.
struct FittedFamily {
  std::vector<estimators::TabularWorldModel> models;
  estimators::DivergenceStats stats;
};

FittedFamily fit_family(std::span<const DiscreteEnv> family, const BoundConfig& config);

/// Either a held-out environment or the index of a training environment.
struct BoundTarget {
  std::optional<DiscreteEnv> holdout;
  std::size_t seen_index = 0;

  static BoundTarget seen(std::size_t index) { return {std::nullopt, index}; }
  static BoundTarget unseen(DiscreteEnv env) { return {std::move(env), 0}; }
};

struct BoundReport {
  Dims dims;
  std::size_t n_envs = 0;
  double delta = 0.1;
  double alpha = 1.0;
  bool alpha_degenerate = false;
  double min_pairwise_delta = 0.0;
  double best_tv = 0.0;
  double worst_tv = 0.0;
  std::size_t best_index = 0;
  double el_threshold = 0.0;
  bool target_seen = false;
  std::size_t target_index = 0;  // when seen
  std::vector<std::size_t> T_grid;
  std::vector<TrialRecord> trials;  // sorted by (predictor, T, trial)
  std::vector<GridPoint> grid;

  const GridPoint& point(PredictorKind predictor, std::size_t T) const;
  std::vector<double> medians(PredictorKind predictor) const;
};

BoundReport verify_bound_montecarlo(std::span<const DiscreteEnv> family, const BoundTarget& target,
                                    const BoundConfig& config);
BoundReport verify_bound_montecarlo(std::span<const DiscreteEnv> family, const FittedFamily& fitted,
                                    const BoundTarget& target, const BoundConfig& config);

/// Least-squares slope of log(median TV) against log T over [T_min, T_max].
/// Throws InsufficientDataError with fewer than three usable grid points.
double fit_decay_slope(const BoundReport& report, PredictorKind predictor, std::size_t T_min,
                       std::size_t T_max);
double fit_log_log_slope(std::span<const double> xs, std::span<const double> ys);

struct CrossoverSweep {
  std::vector<std::size_t> n_envs;
  std::vector<Dims> dims;
  std::vector<std::size_t> T_grid;
  std::size_t runs = 1;
  double min_holdout_best_tv = 0.05;
  std::size_t max_holdout_draws = 200;
};

struct CrossoverCell {
  std::size_t n_envs = 0;
  Dims dims;
  std::size_t run = 0;
  double best_tv_unseen = 0.0;
  double worst_tv_unseen = 0.0;
  double alpha = 1.0;
  std::optional<std::size_t> crossover_unseen;
  std::optional<std::size_t> crossover_seen;
  std::vector<double> el_median_unseen, er_median_unseen;
  std::vector<double> el_median_seen, er_median_seen;
};

struct CrossoverReport {
  std::vector<std::size_t> T_grid;
  std::vector<CrossoverCell> cells;
};

/// Smallest grid T at which median EL error is strictly below median ER error.
std::optional<std::size_t> crossover_T(std::span<const std::size_t> T_grid,
                                       std::span<const double> el_median,
                                       std::span<const double> er_median);

CrossoverReport crossover_scan(const tabular::EnvFamilyConfig& base_family,
                               const BoundConfig& base_config, const CrossoverSweep& sweep);

// Report emission.
void write_trials_csv(const BoundReport& report, std::ostream& out);
nlohmann::json summary_json(const BoundReport& report);
void write_crossover_csv(const CrossoverReport& report, std::ostream& out);
nlohmann::json crossover_json(const CrossoverReport& report);
nlohmann::json config_to_json(const BoundConfig& config);
BoundConfig config_from_json(const nlohmann::json& doc);

}  // namespace icwm::bounds
