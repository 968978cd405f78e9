#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "icwm/tabular_env.hpp"

namespace icwm::estimators {

using tabular::DiscreteContext;
using tabular::DiscreteEnv;
using tabular::Dims;
using tabular::ProbVector;

/// Occurrence statistics n(s,a) and n(s,a,o') of a context. Counts are
/// real-valued so belief-weighted records accumulate fractional mass.
struct ContextCounts {
  Dims dims;
  std::vector<double> n_sa;   // [s][a]
  std::vector<double> n_sao;  // [s][a][o]
  double total = 0.0;

  static ContextCounts zeros(const Dims& dims);

  double sa(std::size_t s, std::size_t a) const { return n_sa[s * dims.actions + a]; }
  double sao(std::size_t s, std::size_t a, std::size_t o) const {
    return n_sao[(s * dims.actions + a) * dims.obs + o];
  }
  bool operator==(const ContextCounts&) const = default;
};

void accumulate(ContextCounts& counts, const tabular::ContextRecord& record);
void accumulate(ContextCounts& counts, const DiscreteContext& context);

/// (n(s,a,o') + k) / (n(s,a) + k|O|); uniform when the denominator is zero.
ProbVector el_predict(const ContextCounts& counts, std::size_t s, std::size_t a,
                      double smoothing = 0.0);

/// Belief-weighted form: sum_s b(s) n(s,a,o') / sum_s b(s) n(s,a).
ProbVector el_predict_pomdp(const ContextCounts& counts, std::span<const double> belief,
                            std::size_t a, double smoothing = 0.0);

/// Per-environment conditional table p(o' | s, a).
struct TabularWorldModel {
  Dims dims;
  std::vector<double> probs;  // [s][a][o]
  double fit_count = 0.0;

  std::span<const double> row(std::size_t s, std::size_t a) const {
    return std::span<const double>(probs).subspan((s * dims.actions + a) * dims.obs, dims.obs);
  }
};

TabularWorldModel fit_tabular_model(std::span<const DiscreteContext> contexts, const Dims& dims,
                                    double smoothing = 1.0);
TabularWorldModel model_from_counts(const ContextCounts& counts, double smoothing);

/// Exact model of an environment's marginal observation transition.
TabularWorldModel model_from_env(const DiscreteEnv& env);

/// Sum of log p(o' | s, a); -infinity when a record has zero probability.
double context_log_likelihood(const TabularWorldModel& model, const DiscreteContext& context);

struct Identification {
  std::size_t index = 0;
  std::vector<double> log_likelihoods;
};

/// argmax_e log p_e(C); ties resolve to the lowest index.
Identification er_identify(std::span<const TabularWorldModel> models,
                           const DiscreteContext& context);

enum class RecognitionMode { kArgmax, kMixture };

/// Posterior p(e | C) ∝ prior(e) p_e(C), evaluated with max-subtraction.
/// If every model assigns the context zero probability the prior is returned.
std::vector<double> er_posterior(std::span<const double> log_likelihoods,
                                 std::span<const double> prior);

ProbVector er_predict(std::span<const TabularWorldModel> models, const DiscreteContext& context,
                      std::size_t s, std::size_t a, RecognitionMode mode,
                      std::span<const double> prior = {});

/// Half L1 distance.
double tv_distance(std::span<const double> p, std::span<const double> q);

/// KL(p || q) in nats; +infinity when q has a zero where p has mass.
double kl_divergence(std::span<const double> p, std::span<const double> q);

using Predictor = std::function<ProbVector(std::size_t s, std::size_t a)>;

/// Mean TV to the truth under the uniform query distribution.
double expected_tv(const Predictor& predictor, const DiscreteEnv& env);
double expected_tv(const TabularWorldModel& model, const DiscreteEnv& env);

struct DivergenceStats {
  std::size_t n_models = 0;
  std::vector<double> delta;  // [e1][e2], mean KL over uniform queries
  std::vector<double> kappa;  // [e1][e2], max KL over queries
  double alpha = 1.0;
  bool degenerate = false;    // every pair has delta == 0
  std::vector<std::size_t> best_index;

  double delta_at(std::size_t i, std::size_t j) const { return delta[i * n_models + j]; }
  double kappa_at(std::size_t i, std::size_t j) const { return kappa[i * n_models + j]; }
  double min_offdiag_delta() const;
};

DivergenceStats divergence_stats(std::span<const TabularWorldModel> models);

/// Closest stored model to each query environment: argmin_e E_q KL(p_e0 || p̂_e).
std::vector<std::size_t> best_match_indices(std::span<const TabularWorldModel> models,
                                            std::span<const DiscreteEnv> query_envs);

nlohmann::json counts_to_json(const ContextCounts& counts);
ContextCounts counts_from_json(const nlohmann::json& doc);
nlohmann::json model_to_json(const TabularWorldModel& model);
TabularWorldModel model_from_json(const nlohmann::json& doc);

}  // namespace icwm::estimators
