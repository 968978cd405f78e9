#include "icwm/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/special_functions/beta.hpp>

namespace icwm::bounds {

namespace {

using estimators::ContextCounts;
using estimators::TabularWorldModel;

double median_of(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + n / 2, v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  const double lo = *std::max_element(v.begin(), v.begin() + n / 2);
  return 0.5 * (lo + hi);
}

// log p_e(C) from the context's sufficient statistics.
double log_likelihood_from_counts(const std::vector<double>& log_probs, const ContextCounts& c) {
  double ll = 0.0;
  for (std::size_t k = 0; k < c.n_sao.size(); ++k) {
    if (c.n_sao[k] == 0.0) continue;
    if (log_probs[k] == -std::numeric_limits<double>::infinity())
      return -std::numeric_limits<double>::infinity();
    ll += c.n_sao[k] * log_probs[k];
  }
  return ll;
}

double mixture_tv(std::span<const TabularWorldModel> models, std::span<const double> post,
                  const std::vector<tabular::ProbVector>& truth, const Dims& dims) {
  double acc = 0.0;
  std::vector<double> row(dims.obs);
  for (std::size_t s = 0; s < dims.states; ++s)
    for (std::size_t a = 0; a < dims.actions; ++a) {
      std::fill(row.begin(), row.end(), 0.0);
      for (std::size_t e = 0; e < models.size(); ++e) {
        if (post[e] == 0.0) continue;
        auto r = models[e].row(s, a);
        for (std::size_t o = 0; o < dims.obs; ++o) row[o] += post[e] * r[o];
      }
      acc += estimators::tv_distance(row, truth[s * dims.actions + a]);
    }
  return acc / static_cast<double>(dims.queries());
}

}  // namespace

void BoundConfig::validate() const {
  if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
  if (T_grid.empty()) throw ConfigError("T_grid must be nonempty");
  for (std::size_t i = 0; i < T_grid.size(); ++i) {
    if (T_grid[i] == 0) throw ConfigError("T_grid values must be positive");
    if (i > 0 && T_grid[i] <= T_grid[i - 1]) throw ConfigError("T_grid must be strictly ascending");
  }
  if (trials == 0) throw ConfigError("trials must be positive");
  if (!(model_smoothing > 0.0)) throw ConfigError("model_smoothing must be positive");
  if (!(el_smoothing >= 0.0)) throw ConfigError("el_smoothing must be nonnegative");
}

double er_bound(double alpha, std::size_t n_envs, double T, double best_tv, double worst_tv) {
  ICWM_REQUIRE(T >= 1.0, "er_bound: T must be >= 1");
  ICWM_REQUIRE(n_envs >= 1, "er_bound: need at least one environment");
  ICWM_REQUIRE(0.0 <= best_tv && best_tv <= worst_tv && worst_tv <= 1.0,
               "er_bound: need 0 <= best_tv <= worst_tv <= 1");
  const double identification = alpha * static_cast<double>(n_envs - 1) / (3.0 * std::sqrt(T));
  return std::min(identification + best_tv, worst_tv);
}

double el_threshold(const Dims& dims, double delta) {
  ICWM_REQUIRE(delta > 0.0 && delta < 1.0, "el_threshold: delta must lie in (0, 1)");
  const double sa = static_cast<double>(dims.states * dims.actions);
  return 4.0 * sa * sa * std::log(4.0 * sa / delta);
}

ElBound el_bound(const Dims& dims, double delta, double T) {
  ICWM_REQUIRE(delta > 0.0 && delta < 1.0, "el_bound: delta must lie in (0, 1)");
  ICWM_REQUIRE(T >= 1.0, "el_bound: T must be >= 1");
  const double osa = static_cast<double>(dims.obs * dims.states * dims.actions);
  ElBound b;
  b.value = std::sqrt(2.0 * osa * std::log(4.0 * static_cast<double>(dims.obs) / delta) / T);
  b.valid = T > el_threshold(dims, delta);
  return b;
}

double el_bound_state_log_variant(const Dims& dims, double delta, double T) {
  const double osa = static_cast<double>(dims.obs * dims.states * dims.actions);
  return std::sqrt(2.0 * osa * std::log(4.0 * static_cast<double>(dims.states) / delta) / T);
}

double binomial_upper95(std::size_t k, std::size_t n) {
  ICWM_REQUIRE(n > 0 && k <= n, "binomial_upper95: need 0 <= k <= n, n > 0");
  if (k == n) return 1.0;
  return boost::math::ibeta_inv(static_cast<double>(k + 1), static_cast<double>(n - k), 0.95);
}

std::string to_string(PredictorKind kind) {
  switch (kind) {
    case PredictorKind::kEl: return "EL";
    case PredictorKind::kErArgmax: return "ER";
    case PredictorKind::kErMixture: return "ER_MIXTURE";
  }
  return "?";
}

PredictorKind predictor_from_string(const std::string& name) {
  if (name == "EL") return PredictorKind::kEl;
  if (name == "ER") return PredictorKind::kErArgmax;
  if (name == "ER_MIXTURE") return PredictorKind::kErMixture;
  throw ConfigError("unknown predictor: " + name);
}

const GridPoint& BoundReport::point(PredictorKind predictor, std::size_t T) const {
  for (const auto& g : grid)
    if (g.predictor == predictor && g.T == T) return g;
  throw ContractViolation("BoundReport::point: no such grid point");
}

std::vector<double> BoundReport::medians(PredictorKind predictor) const {
  std::vector<double> out;
  for (std::size_t T : T_grid) out.push_back(point(predictor, T).median_tv);
  return out;
}

FittedFamily fit_family(std::span<const DiscreteEnv> family, const BoundConfig& config) {
  ICWM_REQUIRE(!family.empty(), "fit_family: empty family");
  FittedFamily f;
  f.models.resize(family.size());
  parallel_for(family.size(), config.threads, [&](std::size_t e) {
    Rng rng(derive_seed(config.seed, {stream_tag("fit"), e}));
    auto ctx = tabular::sample_context(family[e], config.fit_samples,
                                       tabular::ContextMode::kUniformQuery, rng);
    f.models[e] = estimators::fit_tabular_model(std::span(&ctx, 1), family[e].dims,
                                                config.model_smoothing);
  });
  f.stats = estimators::divergence_stats(f.models);
  return f;
}

BoundReport verify_bound_montecarlo(std::span<const DiscreteEnv> family, const BoundTarget& target,
                                    const BoundConfig& config) {
  config.validate();
  return verify_bound_montecarlo(family, fit_family(family, config), target, config);
}

BoundReport verify_bound_montecarlo(std::span<const DiscreteEnv> family, const FittedFamily& fitted,
                                    const BoundTarget& target, const BoundConfig& config) {
  config.validate();
  ICWM_REQUIRE(!family.empty(), "verify_bound_montecarlo: empty family");
  ICWM_REQUIRE(fitted.models.size() == family.size(), "verify_bound_montecarlo: fit mismatch");
  const DiscreteEnv& env =
      target.holdout ? *target.holdout : family[std::min(target.seen_index, family.size() - 1)];
  ICWM_REQUIRE(target.holdout || target.seen_index < family.size(),
               "verify_bound_montecarlo: seen index out of range");
  const Dims dims = env.dims;
  for (const auto& e : family) ICWM_REQUIRE(e.dims == dims, "verify_bound_montecarlo: dims mismatch");

  BoundReport rep;
  rep.dims = dims;
  rep.n_envs = family.size();
  rep.delta = config.delta;
  rep.alpha = fitted.stats.alpha;
  rep.alpha_degenerate = fitted.stats.degenerate;
  rep.min_pairwise_delta = family.size() > 1 ? fitted.stats.min_offdiag_delta() : 0.0;
  rep.el_threshold = el_threshold(dims, config.delta);
  rep.target_seen = !target.holdout.has_value();
  rep.target_index = target.seen_index;
  rep.T_grid = config.T_grid;

  std::vector<double> model_tv(family.size());
  for (std::size_t e = 0; e < family.size(); ++e) model_tv[e] = estimators::expected_tv(fitted.models[e], env);
  auto [mn, mx] = std::minmax_element(model_tv.begin(), model_tv.end());
  rep.best_tv = *mn;
  rep.worst_tv = *mx;
  rep.best_index = static_cast<std::size_t>(mn - model_tv.begin());

  std::vector<tabular::ProbVector> truth(dims.queries());
  for (std::size_t s = 0; s < dims.states; ++s)
    for (std::size_t a = 0; a < dims.actions; ++a)
      truth[s * dims.actions + a] = tabular::true_transition_dist(env, s, a);

  std::vector<std::vector<double>> log_probs(family.size());
  for (std::size_t e = 0; e < family.size(); ++e) {
    log_probs[e].resize(fitted.models[e].probs.size());
    for (std::size_t k = 0; k < log_probs[e].size(); ++k)
      log_probs[e][k] = fitted.models[e].probs[k] > 0.0 ? std::log(fitted.models[e].probs[k])
                                                        : -std::numeric_limits<double>::infinity();
  }

  const std::size_t nT = config.T_grid.size();
  const std::size_t n_trials = config.trials;
  std::vector<double> el_tv(nT * n_trials), er_tv(nT * n_trials), mix_tv(nT * n_trials);
  std::vector<char> misid(nT * n_trials, 0);
  const std::size_t truth_index = rep.target_seen ? target.seen_index : rep.best_index;

  parallel_for(nT * n_trials, config.threads, [&](std::size_t flat) {
    const std::size_t ti = flat / n_trials;
    const std::size_t trial = flat % n_trials;
    Rng rng(derive_seed(config.seed, {stream_tag("trial"), config.T_grid[ti], trial}));
    auto ctx = tabular::sample_context(env, config.T_grid[ti], tabular::ContextMode::kUniformQuery, rng);
    auto counts = ContextCounts::zeros(dims);
    estimators::accumulate(counts, ctx);

    el_tv[flat] = estimators::expected_tv(
        [&](std::size_t s, std::size_t a) { return estimators::el_predict(counts, s, a, config.el_smoothing); },
        env);

    std::vector<double> ll(family.size());
    for (std::size_t e = 0; e < family.size(); ++e) ll[e] = log_likelihood_from_counts(log_probs[e], counts);
    std::size_t best = 0;
    for (std::size_t e = 1; e < ll.size(); ++e)
      if (ll[e] > ll[best]) best = e;
    er_tv[flat] = model_tv[best];
    misid[flat] = best != truth_index;
    auto post = estimators::er_posterior(ll, {});
    mix_tv[flat] = mixture_tv(fitted.models, post, truth, dims);
  });

  const PredictorKind kinds[] = {PredictorKind::kEl, PredictorKind::kErArgmax, PredictorKind::kErMixture};
  for (PredictorKind kind : kinds) {
    const auto& src = kind == PredictorKind::kEl ? el_tv : kind == PredictorKind::kErArgmax ? er_tv : mix_tv;
    for (std::size_t ti = 0; ti < nT; ++ti) {
      const double T = static_cast<double>(config.T_grid[ti]);
      GridPoint g;
      g.predictor = kind;
      g.T = config.T_grid[ti];
      if (kind == PredictorKind::kEl) {
        auto b = el_bound(dims, config.delta, T);
        g.bound = b.value;
        g.valid = b.valid;
      } else {
        g.bound = er_bound(rep.alpha, rep.n_envs, T, rep.best_tv, rep.worst_tv);
        g.valid = true;
      }
      std::vector<double> vals(src.begin() + ti * n_trials, src.begin() + (ti + 1) * n_trials);
      std::size_t wrong = 0;
      for (std::size_t k = 0; k < n_trials; ++k) {
        TrialRecord r;
        r.predictor = kind;
        r.T = g.T;
        r.trial = k;
        r.empirical_tv = vals[k];
        r.bound = g.bound;
        r.valid = g.valid;
        r.violated = g.valid && vals[k] > g.bound;
        if (g.valid) {
          ++g.counted;
          g.violations += r.violated;
        }
        wrong += misid[ti * n_trials + k];
        rep.trials.push_back(r);
      }
      g.median_tv = median_of(vals);
      g.mean_tv = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(n_trials);
      if (g.counted > 0) {
        g.violation_rate = static_cast<double>(g.violations) / static_cast<double>(g.counted);
        g.violation_upper95 = binomial_upper95(g.violations, g.counted);
      }
      if (kind == PredictorKind::kErArgmax)
        g.misidentification_rate = static_cast<double>(wrong) / static_cast<double>(n_trials);
      rep.grid.push_back(g);
    }
  }
  return rep;
}

double fit_log_log_slope(std::span<const double> xs, std::span<const double> ys) {
  ICWM_REQUIRE(xs.size() == ys.size(), "fit_log_log_slope: size mismatch");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] > 0.0 && ys[i] > 0.0 && std::isfinite(ys[i])) {
      lx.push_back(std::log(xs[i]));
      ly.push_back(std::log(ys[i]));
    }
  }
  if (lx.size() < 3) throw InsufficientDataError("decay slope needs at least 3 positive points");
  const double n = static_cast<double>(lx.size());
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  if (!(sxx > 0.0)) throw InsufficientDataError("decay slope needs distinct T values");
  return sxy / sxx;
}

double fit_decay_slope(const BoundReport& report, PredictorKind predictor, std::size_t T_min,
                       std::size_t T_max) {
  std::vector<double> xs, ys;
  for (std::size_t T : report.T_grid) {
    if (T < T_min || T > T_max) continue;
    xs.push_back(static_cast<double>(T));
    ys.push_back(report.point(predictor, T).median_tv);
  }
  return fit_log_log_slope(xs, ys);
}

std::optional<std::size_t> crossover_T(std::span<const std::size_t> T_grid,
                                       std::span<const double> el_median,
                                       std::span<const double> er_median) {
  ICWM_REQUIRE(T_grid.size() == el_median.size() && T_grid.size() == er_median.size(),
               "crossover_T: size mismatch");
  for (std::size_t i = 0; i < T_grid.size(); ++i)
    if (el_median[i] < er_median[i]) return T_grid[i];
  return std::nullopt;
}

CrossoverReport crossover_scan(const tabular::EnvFamilyConfig& base_family,
                               const BoundConfig& base_config, const CrossoverSweep& sweep) {
  if (sweep.n_envs.empty() || sweep.dims.empty() || sweep.T_grid.empty() || sweep.runs == 0)
    throw ConfigError("crossover sweep must be nonempty");
  CrossoverReport rep;
  rep.T_grid = sweep.T_grid;
  std::size_t cell_index = 0;
  for (const Dims& dims : sweep.dims) {
    for (std::size_t n_envs : sweep.n_envs) {
      for (std::size_t run = 0; run < sweep.runs; ++run, ++cell_index) {
        tabular::EnvFamilyConfig fam = base_family;
        fam.count = n_envs;
        fam.dims = dims;
        if (fam.kind == tabular::EnvKind::kMdp) fam.dims.obs = dims.states;
        fam.seed = derive_seed(base_family.seed, {stream_tag("crossover"), cell_index});
        auto family = tabular::sample_env_family(fam);

        BoundConfig cfg = base_config;
        cfg.T_grid = sweep.T_grid;
        cfg.seed = derive_seed(base_config.seed, {stream_tag("crossover"), cell_index});
        auto fitted = fit_family(family, cfg);

        // Held-out environment far enough from every stored model.
        std::optional<DiscreteEnv> holdout;
        double best_tv = 0.0;
        for (std::size_t attempt = 0; attempt < sweep.max_holdout_draws; ++attempt) {
          const auto stream = derive_seed(fam.seed, {stream_tag("holdout"), attempt});
          auto cand = tabular::sample_env(fam, stream, stream);
          double b = std::numeric_limits<double>::infinity();
          for (const auto& m : fitted.models) b = std::min(b, estimators::expected_tv(m, cand));
          if (b >= sweep.min_holdout_best_tv) {
            holdout = std::move(cand);
            best_tv = b;
            break;
          }
        }
        if (!holdout) throw ConfigError("crossover_scan: no holdout met min_holdout_best_tv");

        CrossoverCell cell;
        cell.n_envs = n_envs;
        cell.dims = fam.dims;
        cell.run = run;
        cell.best_tv_unseen = best_tv;
        cell.alpha = fitted.stats.alpha;
        auto unseen = verify_bound_montecarlo(family, fitted, BoundTarget::unseen(*holdout), cfg);
        cell.worst_tv_unseen = unseen.worst_tv;
        cell.el_median_unseen = unseen.medians(PredictorKind::kEl);
        cell.er_median_unseen = unseen.medians(PredictorKind::kErArgmax);
        cell.crossover_unseen = crossover_T(rep.T_grid, cell.el_median_unseen, cell.er_median_unseen);
        auto seen = verify_bound_montecarlo(family, fitted, BoundTarget::seen(0), cfg);
        cell.el_median_seen = seen.medians(PredictorKind::kEl);
        cell.er_median_seen = seen.medians(PredictorKind::kErArgmax);
        cell.crossover_seen = crossover_T(rep.T_grid, cell.el_median_seen, cell.er_median_seen);
        rep.cells.push_back(std::move(cell));
      }
    }
  }
  return rep;
}

void write_trials_csv(const BoundReport& report, std::ostream& out) {
  out << "predictor,T,trial,empirical_tv,bound,valid,violated\n";
  for (const auto& r : report.trials)
    out << to_string(r.predictor) << ',' << r.T << ',' << r.trial << ',' << format_double(r.empirical_tv)
        << ',' << format_double(r.bound) << ',' << (r.valid ? 1 : 0) << ',' << (r.violated ? 1 : 0)
        << '\n';
}

nlohmann::json summary_json(const BoundReport& report) {
  nlohmann::json grid = nlohmann::json::array();
  for (const auto& g : report.grid) {
    grid.push_back({{"predictor", to_string(g.predictor)},
                    {"T", g.T},
                    {"median_tv", g.median_tv},
                    {"mean_tv", g.mean_tv},
                    {"bound", g.bound},
                    {"valid", g.valid},
                    {"violations", g.violations},
                    {"counted", g.counted},
                    {"violation_rate", g.violation_rate},
                    {"violation_upper95", g.violation_upper95},
                    {"misidentification_rate", g.misidentification_rate}});
  }
  nlohmann::json slopes = nlohmann::json::object();
  for (PredictorKind k : {PredictorKind::kEl, PredictorKind::kErArgmax}) {
    try {
      slopes[to_string(k)] = fit_decay_slope(report, k, 0, std::numeric_limits<std::size_t>::max());
    } catch (const InsufficientDataError&) {
      slopes[to_string(k)] = nullptr;
    }
  }
  const double T_last = report.T_grid.empty() ? 1.0 : static_cast<double>(report.T_grid.back());
  return {{"dims", {report.dims.states, report.dims.actions, report.dims.obs}},
          {"n_envs", report.n_envs},
          {"delta", report.delta},
          {"alpha", report.alpha},
          {"alpha_degenerate", report.alpha_degenerate},
          {"min_pairwise_delta", report.min_pairwise_delta},
          {"best_matching_tv", report.best_tv},
          {"worst_matching_tv", report.worst_tv},
          {"best_index", report.best_index},
          {"el_threshold", report.el_threshold},
          {"target_seen", report.target_seen},
          {"el_bound_log_argument", "4|O|/delta"},
          {"el_bound_state_log_variant_at_last_T",
           el_bound_state_log_variant(report.dims, report.delta, T_last)},
          {"slopes", slopes},
          {"grid", grid}};
}

void write_crossover_csv(const CrossoverReport& report, std::ostream& out) {
  out << "states,actions,obs,n_envs,run,target,T,el_median,er_median\n";
  for (const auto& c : report.cells) {
    for (int seen = 0; seen < 2; ++seen) {
      const auto& el = seen ? c.el_median_seen : c.el_median_unseen;
      const auto& er = seen ? c.er_median_seen : c.er_median_unseen;
      for (std::size_t i = 0; i < report.T_grid.size(); ++i)
        out << c.dims.states << ',' << c.dims.actions << ',' << c.dims.obs << ',' << c.n_envs << ','
            << c.run << ',' << (seen ? "seen" : "unseen") << ',' << report.T_grid[i] << ','
            << format_double(el[i]) << ',' << format_double(er[i]) << '\n';
    }
  }
}

nlohmann::json crossover_json(const CrossoverReport& report) {
  nlohmann::json cells = nlohmann::json::array();
  auto opt = [](const std::optional<std::size_t>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  for (const auto& c : report.cells)
    cells.push_back({{"dims", {c.dims.states, c.dims.actions, c.dims.obs}},
                     {"n_envs", c.n_envs},
                     {"run", c.run},
                     {"alpha", c.alpha},
                     {"best_tv_unseen", c.best_tv_unseen},
                     {"worst_tv_unseen", c.worst_tv_unseen},
                     {"crossover_unseen", opt(c.crossover_unseen)},
                     {"crossover_seen", opt(c.crossover_seen)}});
  return {{"T_grid", report.T_grid}, {"cells", cells}};
}

nlohmann::json config_to_json(const BoundConfig& c) {
  return {{"delta", c.delta},         {"T_grid", c.T_grid},
          {"trials", c.trials},       {"seed", c.seed},
          {"fit_samples", c.fit_samples}, {"model_smoothing", c.model_smoothing},
          {"el_smoothing", c.el_smoothing}};
}

BoundConfig config_from_json(const nlohmann::json& doc) {
  try {
    BoundConfig c;
    c.delta = doc.value("delta", 0.1);
    c.T_grid = doc.at("T_grid").get<std::vector<std::size_t>>();
    c.trials = doc.value("trials", std::size_t{200});
    c.seed = doc.value("seed", std::uint64_t{0});
    c.fit_samples = doc.value("fit_samples", std::size_t{100000});
    c.model_smoothing = doc.value("model_smoothing", 1.0);
    c.el_smoothing = doc.value("el_smoothing", 0.0);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bound config: ") + e.what());
  }
}

}  // namespace icwm::bounds
