#include "icwm/tabular_env.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace icwm::tabular {

namespace {

constexpr double kRowTolerance = 1e-12;

void check_distribution(std::span<const double> row, const char* what) {
  double sum = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p))
      throw ContractViolation(std::string(what) + ": negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kRowTolerance)
    throw ContractViolation(std::string(what) + ": row does not sum to 1");
}

// Symmetric Dirichlet row via normalized gamma draws.
void sample_dirichlet_row(std::span<double> row, double concentration, Rng& rng) {
  std::gamma_distribution<double> gamma(concentration, 1.0);
  double sum = 0.0;
  for (double& p : row) {
    p = gamma(rng);
    sum += p;
  }
  if (!(sum > 0.0)) {
    // Every draw underflowed (tiny concentration): the limit is a one-hot row.
    std::fill(row.begin(), row.end(), 0.0);
    row[uniform_index(rng, row.size())] = 1.0;
    return;
  }
  for (double& p : row) p /= sum;
  // Fold the rounding residue into the largest entry so the row sums to 1.
  double total = std::accumulate(row.begin(), row.end(), 0.0);
  auto it = std::max_element(row.begin(), row.end());
  *it += 1.0 - total;
}

// Replaces round(fraction * rows) randomly chosen rows by one-hot rows.
void make_rows_deterministic(std::vector<double>& table, std::size_t rows,
                             std::size_t width, double fraction, Rng& rng) {
  const auto forced = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows)));
  if (forced == 0) return;
  std::vector<std::size_t> order(rows);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < forced && k < rows; ++k) {
    auto row = std::span<double>(table).subspan(order[k] * width, width);
    std::fill(row.begin(), row.end(), 0.0);
    row[uniform_index(rng, width)] = 1.0;
  }
}

void check_dims(const Dims& dims) {
  if (dims.states == 0 || dims.actions == 0 || dims.obs == 0)
    throw ConfigError("environment dimensions must be positive");
}

}  // namespace

std::string to_string(EnvKind kind) { return kind == EnvKind::kMdp ? "MDP" : "POMDP"; }

EnvKind env_kind_from_string(const std::string& name) {
  if (name == "MDP") return EnvKind::kMdp;
  if (name == "POMDP") return EnvKind::kPomdp;
  throw ConfigError("unknown environment kind: " + name);
}

std::string to_string(ContextMode mode) {
  return mode == ContextMode::kUniformQuery ? "UNIFORM_QUERY" : "ROLLOUT";
}

ContextMode context_mode_from_string(const std::string& name) {
  if (name == "UNIFORM_QUERY") return ContextMode::kUniformQuery;
  if (name == "ROLLOUT") return ContextMode::kRollout;
  throw ConfigError("unknown context mode: " + name);
}

std::span<const double> DiscreteEnv::transition_row(std::size_t s, std::size_t a) const {
  ICWM_REQUIRE(s < dims.states && a < dims.actions, "transition_row: index out of range");
  return std::span<const double>(transition).subspan((s * dims.actions + a) * dims.states,
                                                     dims.states);
}

std::span<const double> DiscreteEnv::observation_row(std::size_t s) const {
  ICWM_REQUIRE(s < dims.states, "observation_row: index out of range");
  return std::span<const double>(observation).subspan(s * dims.obs, dims.obs);
}

void DiscreteEnv::validate() const {
  ICWM_REQUIRE(dims.states > 0 && dims.actions > 0 && dims.obs > 0, "env: zero dimension");
  ICWM_REQUIRE(transition.size() == dims.states * dims.actions * dims.states,
               "env: transition table size mismatch");
  ICWM_REQUIRE(observation.size() == dims.states * dims.obs,
               "env: observation table size mismatch");
  for (std::size_t s = 0; s < dims.states; ++s) {
    for (std::size_t a = 0; a < dims.actions; ++a) check_distribution(transition_row(s, a), "transition");
    check_distribution(observation_row(s), "observation");
  }
  if (kind == EnvKind::kMdp) {
    ICWM_REQUIRE(dims.obs == dims.states, "MDP requires |O| == |S|");
    for (std::size_t s = 0; s < dims.states; ++s)
      ICWM_REQUIRE(observation[s * dims.obs + s] == 1.0, "MDP observation must be identity");
  }
}

void EnvFamilyConfig::validate() const {
  check_dims(dims);
  if (count < 1) throw ConfigError("family count must be >= 1");
  if (!(concentration > 0.0) || !std::isfinite(concentration))
    throw ConfigError("concentration must be positive");
  if (!(determinism_fraction >= 0.0 && determinism_fraction <= 1.0))
    throw ConfigError("determinism_fraction must lie in [0, 1]");
  if (kind == EnvKind::kMdp && dims.obs != dims.states)
    throw ConfigError("MDP families require |O| == |S|");
}

DiscreteEnv sample_env(const EnvFamilyConfig& config, std::uint64_t stream_seed,
                       std::uint64_t env_id) {
  config.validate();
  Rng rng(stream_seed);
  const Dims& d = config.dims;
  DiscreteEnv env;
  env.dims = d;
  env.kind = config.kind;
  env.env_id = env_id;
  env.transition.assign(d.states * d.actions * d.states, 0.0);
  for (std::size_t row = 0; row < d.states * d.actions; ++row)
    sample_dirichlet_row(std::span<double>(env.transition).subspan(row * d.states, d.states),
                         config.concentration, rng);
  make_rows_deterministic(env.transition, d.states * d.actions, d.states,
                          config.determinism_fraction, rng);

  env.observation.assign(d.states * d.obs, 0.0);
  if (config.kind == EnvKind::kMdp) {
    for (std::size_t s = 0; s < d.states; ++s) env.observation[s * d.obs + s] = 1.0;
  } else {
    for (std::size_t s = 0; s < d.states; ++s)
      sample_dirichlet_row(std::span<double>(env.observation).subspan(s * d.obs, d.obs),
                           config.concentration, rng);
    make_rows_deterministic(env.observation, d.states, d.obs, config.determinism_fraction, rng);
  }
  return env;
}

std::vector<DiscreteEnv> sample_env_family(const EnvFamilyConfig& config) {
  config.validate();
  std::vector<DiscreteEnv> envs;
  envs.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) {
    const std::uint64_t stream = derive_seed(config.seed, {stream_tag("env"), i});
    envs.push_back(sample_env(config, stream, stream));
  }
  return envs;
}

std::size_t sample_categorical(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  return last_positive;
}

StepResult step(const DiscreteEnv& env, std::size_t s, std::size_t a, Rng& rng) {
  ICWM_REQUIRE(s < env.dims.states, "step: state out of range");
  ICWM_REQUIRE(a < env.dims.actions, "step: action out of range");
  StepResult r;
  r.next_state = sample_categorical(env.transition_row(s, a), rng);
  r.next_obs = env.kind == EnvKind::kMdp ? r.next_state
                                         : sample_categorical(env.observation_row(r.next_state), rng);
  return r;
}

ProbVector true_transition_dist(const DiscreteEnv& env, std::size_t s, std::size_t a) {
  auto row = env.transition_row(s, a);
  if (env.kind == EnvKind::kMdp) return ProbVector(row.begin(), row.end());
  ProbVector out(env.dims.obs, 0.0);
  for (std::size_t sn = 0; sn < env.dims.states; ++sn) {
    if (row[sn] == 0.0) continue;
    auto z = env.observation_row(sn);
    for (std::size_t o = 0; o < env.dims.obs; ++o) out[o] += row[sn] * z[o];
  }
  return out;
}

ProbVector filter_belief(const DiscreteEnv& env, std::span<const double> belief,
                         std::size_t a, std::size_t o) {
  ICWM_REQUIRE(belief.size() == env.dims.states, "filter_belief: belief size mismatch");
  ICWM_REQUIRE(a < env.dims.actions && o < env.dims.obs, "filter_belief: index out of range");
  ProbVector next(env.dims.states, 0.0);
  for (std::size_t s = 0; s < env.dims.states; ++s) {
    if (belief[s] == 0.0) continue;
    auto row = env.transition_row(s, a);
    for (std::size_t sn = 0; sn < env.dims.states; ++sn) next[sn] += belief[s] * row[sn];
  }
  double norm = 0.0;
  for (std::size_t sn = 0; sn < env.dims.states; ++sn) {
    next[sn] *= env.observation[sn * env.dims.obs + o];
    norm += next[sn];
  }
  ICWM_REQUIRE(norm > 0.0, "filter_belief: observation has zero probability");
  for (double& b : next) b /= norm;
  return next;
}

DiscreteContext sample_context(const DiscreteEnv& env, std::size_t length, ContextMode mode,
                               Rng& rng) {
  env.validate();
  DiscreteContext ctx;
  ctx.mode = mode;
  ctx.records.reserve(length);
  if (mode == ContextMode::kUniformQuery) {
    for (std::size_t t = 0; t < length; ++t) {
      ContextRecord rec;
      rec.state = uniform_index(rng, env.dims.states);
      rec.action = uniform_index(rng, env.dims.actions);
      rec.next_obs = step(env, rec.state, rec.action, rng).next_obs;
      ctx.records.push_back(std::move(rec));
    }
    return ctx;
  }
  const bool track_belief = env.kind == EnvKind::kPomdp;
  std::size_t s = 0;
  ProbVector belief;
  if (track_belief) {
    belief.assign(env.dims.states, 0.0);
    belief[0] = 1.0;
  }
  for (std::size_t t = 0; t < length; ++t) {
    ContextRecord rec;
    rec.state = s;
    rec.action = uniform_index(rng, env.dims.actions);
    auto r = step(env, s, rec.action, rng);
    rec.next_obs = r.next_obs;
    if (track_belief) {
      rec.belief = belief;
      belief = filter_belief(env, belief, rec.action, rec.next_obs);
    }
    ctx.records.push_back(std::move(rec));
    s = r.next_state;
  }
  return ctx;
}

nlohmann::json config_to_json(const EnvFamilyConfig& config) {
  return {{"count", config.count},
          {"dims", {config.dims.states, config.dims.actions, config.dims.obs}},
          {"concentration", config.concentration},
          {"determinism_fraction", config.determinism_fraction},
          {"kind", to_string(config.kind)},
          {"seed", config.seed}};
}

EnvFamilyConfig config_from_json(const nlohmann::json& doc) {
  try {
    EnvFamilyConfig c;
    c.count = doc.at("count").get<std::size_t>();
    const auto& dims = doc.at("dims");
    if (!dims.is_array() || dims.size() != 3) throw ConfigError("dims must be [S, A, O]");
    c.dims = {dims[0].get<std::size_t>(), dims[1].get<std::size_t>(), dims[2].get<std::size_t>()};
    c.concentration = doc.value("concentration", 1.0);
    c.determinism_fraction = doc.value("determinism_fraction", 0.0);
    c.kind = env_kind_from_string(doc.value("kind", std::string("MDP")));
    c.seed = doc.value("seed", std::uint64_t{0});
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("env family config: ") + e.what());
  }
}

nlohmann::json env_to_json(const DiscreteEnv& env) {
  return {{"env_id", env.env_id},
          {"kind", to_string(env.kind)},
          {"dims", {env.dims.states, env.dims.actions, env.dims.obs}},
          {"transition", env.transition},
          {"observation", env.observation}};
}

DiscreteEnv env_from_json(const nlohmann::json& doc) {
  try {
    DiscreteEnv env;
    env.env_id = doc.at("env_id").get<std::uint64_t>();
    env.kind = env_kind_from_string(doc.value("kind", std::string("MDP")));
    const auto& dims = doc.at("dims");
    env.dims = {dims.at(0).get<std::size_t>(), dims.at(1).get<std::size_t>(),
                dims.at(2).get<std::size_t>()};
    env.transition = doc.at("transition").get<std::vector<double>>();
    env.observation = doc.at("observation").get<std::vector<double>>();
    env.validate();
    return env;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("environment document: ") + e.what());
  }
}

nlohmann::json family_to_json(const EnvFamilyConfig& config, std::span<const DiscreteEnv> envs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& env : envs) arr.push_back(env_to_json(env));
  return {{"format_version", kFamilyFormatVersion}, {"config", config_to_json(config)},
          {"envs", std::move(arr)}};
}

std::vector<DiscreteEnv> family_from_json(const nlohmann::json& doc, EnvFamilyConfig* config) {
  if (doc.value("format_version", 0) != kFamilyFormatVersion)
    throw ConfigError("unsupported environment family format_version");
  if (config) *config = config_from_json(doc.at("config"));
  std::vector<DiscreteEnv> envs;
  for (const auto& e : doc.at("envs")) envs.push_back(env_from_json(e));
  return envs;
}

}  // namespace icwm::tabular
