#include "icwm/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace icwm::estimators {

namespace {

void check_record(const Dims& dims, const tabular::ContextRecord& r) {
  ICWM_REQUIRE(r.state < dims.states && r.action < dims.actions && r.next_obs < dims.obs,
               "context record index outside counts dimensions");
  ICWM_REQUIRE(r.belief.empty() || r.belief.size() == dims.states,
               "context record belief has wrong size");
}

ProbVector uniform(std::size_t n) { return ProbVector(n, 1.0 / static_cast<double>(n)); }

void check_smoothing(double smoothing) {
  if (!(smoothing >= 0.0) || !std::isfinite(smoothing))
    throw ConfigError("smoothing must be a nonnegative finite number");
}

}  // namespace

ContextCounts ContextCounts::zeros(const Dims& dims) {
  ContextCounts c;
  c.dims = dims;
  c.n_sa.assign(dims.states * dims.actions, 0.0);
  c.n_sao.assign(dims.states * dims.actions * dims.obs, 0.0);
  return c;
}

void accumulate(ContextCounts& counts, const tabular::ContextRecord& r) {
  const Dims& d = counts.dims;
  check_record(d, r);
  if (r.belief.empty()) {
    counts.n_sa[r.state * d.actions + r.action] += 1.0;
    counts.n_sao[(r.state * d.actions + r.action) * d.obs + r.next_obs] += 1.0;
  } else {
    for (std::size_t s = 0; s < d.states; ++s) {
      const double w = r.belief[s];
      if (w == 0.0) continue;
      counts.n_sa[s * d.actions + r.action] += w;
      counts.n_sao[(s * d.actions + r.action) * d.obs + r.next_obs] += w;
    }
  }
  counts.total += 1.0;
}

void accumulate(ContextCounts& counts, const DiscreteContext& context) {
  for (const auto& r : context.records) accumulate(counts, r);
}

ProbVector el_predict(const ContextCounts& counts, std::size_t s, std::size_t a,
                      double smoothing) {
  check_smoothing(smoothing);
  const Dims& d = counts.dims;
  ICWM_REQUIRE(s < d.states && a < d.actions, "el_predict: query out of range");
  const double n = counts.sa(s, a);
  const double denom = n + smoothing * static_cast<double>(d.obs);
  if (!(denom > 0.0)) return uniform(d.obs);
  ProbVector out(d.obs);
  for (std::size_t o = 0; o < d.obs; ++o) out[o] = (counts.sao(s, a, o) + smoothing) / denom;
  return out;
}

ProbVector el_predict_pomdp(const ContextCounts& counts, std::span<const double> belief,
                            std::size_t a, double smoothing) {
  check_smoothing(smoothing);
  const Dims& d = counts.dims;
  ICWM_REQUIRE(belief.size() == d.states, "el_predict_pomdp: belief size mismatch");
  ICWM_REQUIRE(a < d.actions, "el_predict_pomdp: action out of range");
  double mass = 0.0;
  for (double b : belief) {
    ICWM_REQUIRE(b >= 0.0, "el_predict_pomdp: negative belief entry");
    mass += b;
  }
  ICWM_REQUIRE(std::abs(mass - 1.0) <= 1e-9, "el_predict_pomdp: belief not normalized");

  ProbVector num(d.obs, 0.0);
  double den = 0.0;
  for (std::size_t s = 0; s < d.states; ++s) {
    if (belief[s] == 0.0) continue;
    den += belief[s] * counts.sa(s, a);
    for (std::size_t o = 0; o < d.obs; ++o) num[o] += belief[s] * counts.sao(s, a, o);
  }
  const double denom = den + smoothing * static_cast<double>(d.obs);
  if (!(denom > 0.0)) return uniform(d.obs);
  for (double& v : num) v = (v + smoothing) / denom;
  return num;
}

TabularWorldModel model_from_counts(const ContextCounts& counts, double smoothing) {
  check_smoothing(smoothing);
  TabularWorldModel m;
  m.dims = counts.dims;
  m.fit_count = counts.total;
  m.probs.reserve(counts.n_sao.size());
  for (std::size_t s = 0; s < m.dims.states; ++s)
    for (std::size_t a = 0; a < m.dims.actions; ++a) {
      auto row = el_predict(counts, s, a, smoothing);
      m.probs.insert(m.probs.end(), row.begin(), row.end());
    }
  return m;
}

TabularWorldModel fit_tabular_model(std::span<const DiscreteContext> contexts, const Dims& dims,
                                    double smoothing) {
  check_smoothing(smoothing);
  auto counts = ContextCounts::zeros(dims);
  for (const auto& c : contexts) accumulate(counts, c);
  if (counts.total == 0.0 && smoothing == 0.0)
    throw DegenerateFitError("fit_tabular_model: no data and zero smoothing");
  return model_from_counts(counts, smoothing);
}

TabularWorldModel model_from_env(const DiscreteEnv& env) {
  TabularWorldModel m;
  m.dims = env.dims;
  m.fit_count = std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < env.dims.states; ++s)
    for (std::size_t a = 0; a < env.dims.actions; ++a) {
      auto row = tabular::true_transition_dist(env, s, a);
      m.probs.insert(m.probs.end(), row.begin(), row.end());
    }
  return m;
}

double context_log_likelihood(const TabularWorldModel& model, const DiscreteContext& context) {
  double ll = 0.0;
  for (const auto& r : context.records) {
    check_record(model.dims, r);
    const double p = model.row(r.state, r.action)[r.next_obs];
    if (p <= 0.0) return -std::numeric_limits<double>::infinity();
    ll += std::log(p);
  }
  return ll;
}

Identification er_identify(std::span<const TabularWorldModel> models,
                           const DiscreteContext& context) {
  ICWM_REQUIRE(!models.empty(), "er_identify: no models");
  Identification id;
  id.log_likelihoods.reserve(models.size());
  for (const auto& m : models) id.log_likelihoods.push_back(context_log_likelihood(m, context));
  // Strict comparison keeps the lowest index on ties.
  for (std::size_t e = 1; e < models.size(); ++e)
    if (id.log_likelihoods[e] > id.log_likelihoods[id.index]) id.index = e;
  return id;
}

std::vector<double> er_posterior(std::span<const double> log_likelihoods,
                                 std::span<const double> prior) {
  const std::size_t n = log_likelihoods.size();
  std::vector<double> pri(prior.begin(), prior.end());
  if (pri.empty()) pri.assign(n, 1.0 / static_cast<double>(n));
  ICWM_REQUIRE(pri.size() == n, "er_posterior: prior size mismatch");
  double psum = 0.0;
  for (double p : pri) {
    ICWM_REQUIRE(p >= 0.0, "er_posterior: negative prior");
    psum += p;
  }
  ICWM_REQUIRE(std::abs(psum - 1.0) <= 1e-9, "er_posterior: prior does not sum to 1");

  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < n; ++e)
    if (pri[e] > 0.0) best = std::max(best, log_likelihoods[e] + std::log(pri[e]));
  if (!std::isfinite(best)) return pri;
  std::vector<double> post(n, 0.0);
  double z = 0.0;
  for (std::size_t e = 0; e < n; ++e) {
    if (pri[e] == 0.0 || !std::isfinite(log_likelihoods[e])) continue;
    post[e] = std::exp(log_likelihoods[e] + std::log(pri[e]) - best);
    z += post[e];
  }
  for (double& p : post) p /= z;
  return post;
}

ProbVector er_predict(std::span<const TabularWorldModel> models, const DiscreteContext& context,
                      std::size_t s, std::size_t a, RecognitionMode mode,
                      std::span<const double> prior) {
  ICWM_REQUIRE(!models.empty(), "er_predict: no models");
  auto id = er_identify(models, context);
  if (mode == RecognitionMode::kArgmax) {
    auto row = models[id.index].row(s, a);
    return ProbVector(row.begin(), row.end());
  }
  auto post = er_posterior(id.log_likelihoods, prior);
  ProbVector out(models.front().dims.obs, 0.0);
  for (std::size_t e = 0; e < models.size(); ++e) {
    if (post[e] == 0.0) continue;
    auto row = models[e].row(s, a);
    for (std::size_t o = 0; o < out.size(); ++o) out[o] += post[e] * row[o];
  }
  return out;
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  ICWM_REQUIRE(p.size() == q.size(), "tv_distance: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  ICWM_REQUIRE(p.size() == q.size(), "kl_divergence: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] <= 0.0) return std::numeric_limits<double>::infinity();
    acc += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(acc, 0.0);
}

double expected_tv(const Predictor& predictor, const DiscreteEnv& env) {
  double acc = 0.0;
  for (std::size_t s = 0; s < env.dims.states; ++s)
    for (std::size_t a = 0; a < env.dims.actions; ++a) {
      auto pred = predictor(s, a);
      auto truth = tabular::true_transition_dist(env, s, a);
      acc += tv_distance(pred, truth);
    }
  return acc / static_cast<double>(env.dims.queries());
}

double expected_tv(const TabularWorldModel& model, const DiscreteEnv& env) {
  ICWM_REQUIRE(model.dims == env.dims, "expected_tv: dimension mismatch");
  return expected_tv(
      [&](std::size_t s, std::size_t a) {
        auto r = model.row(s, a);
        return ProbVector(r.begin(), r.end());
      },
      env);
}

double DivergenceStats::min_offdiag_delta() const {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n_models; ++i)
    for (std::size_t j = 0; j < n_models; ++j)
      if (i != j) best = std::min(best, delta_at(i, j));
  return best;
}

DivergenceStats divergence_stats(std::span<const TabularWorldModel> models) {
  ICWM_REQUIRE(!models.empty(), "divergence_stats: no models");
  const Dims dims = models.front().dims;
  for (const auto& m : models) {
    ICWM_REQUIRE(m.dims == dims, "divergence_stats: dimension mismatch");
    for (double p : m.probs)
      ICWM_REQUIRE(p > 0.0, "divergence_stats: model rows must be strictly positive (smooth the fit)");
  }
  const std::size_t n = models.size();
  DivergenceStats st;
  st.n_models = n;
  st.delta.assign(n * n, 0.0);
  st.kappa.assign(n * n, 0.0);
  const double nq = static_cast<double>(dims.queries());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      double sum = 0.0, mx = 0.0;
      for (std::size_t s = 0; s < dims.states; ++s)
        for (std::size_t a = 0; a < dims.actions; ++a) {
          const double kl = kl_divergence(models[i].row(s, a), models[j].row(s, a));
          sum += kl;
          mx = std::max(mx, kl);
        }
      st.delta[i * n + j] = sum / nq;
      st.kappa[i * n + j] = mx;
    }
  st.alpha = 1.0;
  bool any = false;
  for (std::size_t k = 0; k < n * n; ++k) {
    if (st.delta[k] > 0.0) {
      any = true;
      st.alpha = std::max(st.alpha, std::sqrt(st.kappa[k] / st.delta[k]));
    }
  }
  st.degenerate = !any;
  return st;
}

std::vector<std::size_t> best_match_indices(std::span<const TabularWorldModel> models,
                                            std::span<const DiscreteEnv> query_envs) {
  ICWM_REQUIRE(!models.empty(), "best_match_indices: no models");
  std::vector<std::size_t> out;
  for (const auto& env : query_envs) {
    std::size_t best = 0;
    double best_val = std::numeric_limits<double>::infinity();
    for (std::size_t e = 0; e < models.size(); ++e) {
      double sum = 0.0;
      for (std::size_t s = 0; s < env.dims.states; ++s)
        for (std::size_t a = 0; a < env.dims.actions; ++a)
          sum += kl_divergence(tabular::true_transition_dist(env, s, a), models[e].row(s, a));
      if (sum < best_val) {
        best_val = sum;
        best = e;
      }
    }
    out.push_back(best);
  }
  return out;
}

nlohmann::json counts_to_json(const ContextCounts& counts) {
  return {{"dims", {counts.dims.states, counts.dims.actions, counts.dims.obs}},
          {"n_sa", counts.n_sa},
          {"n_sao", counts.n_sao},
          {"total", counts.total}};
}

ContextCounts counts_from_json(const nlohmann::json& doc) {
  try {
    const auto& d = doc.at("dims");
    auto c = ContextCounts::zeros({d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(),
                                   d.at(2).get<std::size_t>()});
    c.n_sa = doc.at("n_sa").get<std::vector<double>>();
    c.n_sao = doc.at("n_sao").get<std::vector<double>>();
    c.total = doc.at("total").get<double>();
    ICWM_REQUIRE(c.n_sa.size() == c.dims.queries() && c.n_sao.size() == c.dims.queries() * c.dims.obs,
                 "counts document: table size mismatch");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("counts document: ") + e.what());
  }
}

nlohmann::json model_to_json(const TabularWorldModel& model) {
  return {{"dims", {model.dims.states, model.dims.actions, model.dims.obs}},
          {"probs", model.probs},
          {"fit_count", std::isfinite(model.fit_count) ? nlohmann::json(model.fit_count)
                                                       : nlohmann::json(nullptr)}};
}

TabularWorldModel model_from_json(const nlohmann::json& doc) {
  try {
    TabularWorldModel m;
    const auto& d = doc.at("dims");
    m.dims = {d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(), d.at(2).get<std::size_t>()};
    m.probs = doc.at("probs").get<std::vector<double>>();
    const auto& fc = doc.at("fit_count");
    m.fit_count = fc.is_null() ? std::numeric_limits<double>::infinity() : fc.get<double>();
    ICWM_REQUIRE(m.probs.size() == m.dims.queries() * m.dims.obs, "model document: size mismatch");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model document: ") + e.what());
  }
}

}  // namespace icwm::estimators
