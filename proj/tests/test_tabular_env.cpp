#include <doctest.h>

#include <cmath>
#include <numeric>

#include "icwm/tabular_env.hpp"

using namespace icwm;
using namespace icwm::tabular;

namespace {

EnvFamilyConfig family_cfg(std::size_t count, Dims dims, double conc = 1.0, double det = 0.0,
                           EnvKind kind = EnvKind::kMdp, std::uint64_t seed = 7) {
  EnvFamilyConfig c;
  c.count = count;
  c.dims = dims;
  c.concentration = conc;
  c.determinism_fraction = det;
  c.kind = kind;
  c.seed = seed;
  return c;
}

DiscreteEnv hand_env(Dims dims, std::vector<double> transition, std::vector<double> observation,
                     EnvKind kind) {
  DiscreteEnv e;
  e.dims = dims;
  e.kind = kind;
  e.transition = std::move(transition);
  e.observation = std::move(observation);
  e.validate();
  return e;
}

std::vector<double> identity(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) m[i * n + i] = 1.0;
  return m;
}

}  // namespace

TEST_CASE("sample_env_family sizes and row sums") {
  auto envs = sample_env_family(family_cfg(4, {6, 3, 6}));
  REQUIRE(envs.size() == 4);
  for (const auto& e : envs) {
    for (std::size_t s = 0; s < 6; ++s)
      for (std::size_t a = 0; a < 3; ++a) {
        auto row = e.transition_row(s, a);
        double sum = 0.0;
        for (double p : row) {
          CHECK(p >= 0.0);
          sum += p;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
      }
    CHECK(e.observation == identity(6));
  }
}

TEST_CASE("determinism fraction one gives one-hot rows") {
  auto envs = sample_env_family(family_cfg(1, {5, 2, 5}, 1.0, 1.0));
  const auto& e = envs[0];
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t a = 0; a < 2; ++a) {
      auto row = e.transition_row(s, a);
      CHECK(std::count(row.begin(), row.end(), 1.0) == 1);
      CHECK(std::count(row.begin(), row.end(), 0.0) == 4);
    }
}

TEST_CASE("same seed same family, different seed different family") {
  auto cfg = family_cfg(3, {4, 2, 3}, 0.5, 0.25, EnvKind::kPomdp, 11);
  auto a = sample_env_family(cfg);
  auto b = sample_env_family(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].transition == b[i].transition);
    CHECK(a[i].observation == b[i].observation);
    CHECK(a[i].env_id == b[i].env_id);
  }
  cfg.seed = 12;
  auto c = sample_env_family(cfg);
  CHECK(a[0].transition != c[0].transition);
}

TEST_CASE("invalid family configs") {
  CHECK_THROWS_AS(sample_env_family(family_cfg(1, {0, 2, 2})), ConfigError);
  CHECK_THROWS_AS(sample_env_family(family_cfg(0, {2, 2, 2})), ConfigError);
  CHECK_THROWS_AS(sample_env_family(family_cfg(1, {2, 2, 2}, 0.0)), ConfigError);
  CHECK_THROWS_AS(sample_env_family(family_cfg(1, {3, 2, 2})), ConfigError);  // MDP needs |O|=|S|
}

TEST_CASE("step on one-hot row and MDP observation") {
  // 4 states, 1 action, every row one-hot at 3.
  std::vector<double> t(4 * 4, 0.0);
  for (std::size_t s = 0; s < 4; ++s) t[s * 4 + 3] = 1.0;
  auto env = hand_env({4, 1, 4}, t, identity(4), EnvKind::kMdp);
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    auto r = step(env, i % 4, 0, rng);
    CHECK(r.next_state == 3);
    CHECK(r.next_obs == r.next_state);
  }
  CHECK_THROWS_AS(step(env, 4, 0, rng), ContractViolation);
  CHECK_THROWS_AS(step(env, 0, 1, rng), ContractViolation);
}

TEST_CASE("step frequencies match a half-half row") {
  std::vector<double> t = {0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.5, 0.5, 0.0};
  auto env = hand_env({3, 1, 3}, t, identity(3), EnvKind::kMdp);
  Rng rng(2);
  const int n = 100000;
  int zero = 0, two = 0;
  for (int i = 0; i < n; ++i) {
    auto r = step(env, 0, 0, rng);
    zero += r.next_state == 0;
    two += r.next_state == 2;
  }
  CHECK(std::abs(zero / double(n) - 0.5) < 0.01);
  CHECK(two == 0);
}

TEST_CASE("sample_context lengths and uniform coverage") {
  auto env = sample_env_family(family_cfg(1, {5, 2, 5}))[0];
  Rng rng(3);
  CHECK(sample_context(env, 0, ContextMode::kUniformQuery, rng).length() == 0);

  const std::size_t T = 100000;
  auto ctx = sample_context(env, T, ContextMode::kUniformQuery, rng);
  REQUIRE(ctx.length() == T);
  std::vector<double> n(10, 0.0);
  for (const auto& r : ctx.records) n[r.state * 2 + r.action] += 1.0;
  const double p = 0.1, mean = T * p, sd = std::sqrt(T * p * (1 - p));
  for (double c : n) CHECK(std::abs(c - mean) < 3.0 * sd);
}

TEST_CASE("rollout traces a deterministic chain") {
  // s -> s+1 mod 4 under the single action.
  std::vector<double> t(16, 0.0);
  for (std::size_t s = 0; s < 4; ++s) t[s * 4 + (s + 1) % 4] = 1.0;
  auto env = hand_env({4, 1, 4}, t, identity(4), EnvKind::kMdp);
  Rng rng(4);
  auto ctx = sample_context(env, 9, ContextMode::kRollout, rng);
  for (std::size_t i = 0; i < ctx.length(); ++i) {
    CHECK(ctx.records[i].state == i % 4);
    CHECK(ctx.records[i].next_obs == (i + 1) % 4);
  }
}

TEST_CASE("POMDP rollout beliefs are normalized") {
  auto env = sample_env_family(family_cfg(1, {4, 2, 3}, 1.0, 0.0, EnvKind::kPomdp))[0];
  Rng rng(5);
  auto ctx = sample_context(env, 50, ContextMode::kRollout, rng);
  for (const auto& r : ctx.records) {
    REQUIRE(r.belief.size() == 4);
    CHECK(std::abs(std::accumulate(r.belief.begin(), r.belief.end(), 0.0) - 1.0) < 1e-9);
  }
  CHECK(ctx.records[0].belief[0] == 1.0);
}

TEST_CASE("true_transition_dist") {
  auto mdp = sample_env_family(family_cfg(1, {3, 2, 3}))[0];
  auto row = mdp.transition_row(1, 1);
  CHECK(true_transition_dist(mdp, 1, 1) == std::vector<double>(row.begin(), row.end()));

  // POMDP with identity observation reduces to the transition row.
  auto pomdp = mdp;
  pomdp.kind = EnvKind::kPomdp;
  CHECK(true_transition_dist(pomdp, 2, 0) ==
        std::vector<double>(mdp.transition_row(2, 0).begin(), mdp.transition_row(2, 0).end()));

  // Both states emit observation 0.
  auto degenerate = hand_env({2, 1, 2}, {0.5, 0.5, 0.5, 0.5}, {1.0, 0.0, 1.0, 0.0}, EnvKind::kPomdp);
  auto d = true_transition_dist(degenerate, 0, 0);
  CHECK(d[0] == 1.0);
  CHECK(d[1] == 0.0);
}

TEST_CASE("frequency lower bound holds above the threshold") {
  // min n(s,a) > T / (2|S||A|) in at least 1 - delta/2 of trials.
  const std::size_t S = 3, A = 2;
  const double delta = 0.1;
  const double threshold = 4.0 * S * S * A * A * std::log(4.0 * S * A / delta);
  const std::size_t T = static_cast<std::size_t>(threshold) + 1;
  auto env = sample_env_family(family_cfg(1, {S, A, S}))[0];
  const int trials = 400;
  int ok = 0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(derive_seed(99, {std::uint64_t(t)}));
    auto ctx = sample_context(env, T, ContextMode::kUniformQuery, rng);
    std::vector<double> n(S * A, 0.0);
    for (const auto& r : ctx.records) n[r.state * A + r.action] += 1.0;
    ok += *std::min_element(n.begin(), n.end()) > T / (2.0 * S * A);
  }
  CHECK(ok >= trials * (1.0 - delta / 2.0));
}

TEST_CASE("family JSON round trip") {
  auto cfg = family_cfg(2, {3, 2, 4}, 0.7, 0.5, EnvKind::kPomdp, 21);
  auto envs = sample_env_family(cfg);
  auto doc = family_to_json(cfg, envs);
  CHECK(doc.at("format_version") == kFamilyFormatVersion);
  EnvFamilyConfig back_cfg;
  auto back = family_from_json(nlohmann::json::parse(doc.dump()), &back_cfg);
  REQUIRE(back.size() == 2);
  CHECK(back[1].transition == envs[1].transition);
  CHECK(back[1].observation == envs[1].observation);
  CHECK(back[1].env_id == envs[1].env_id);
  CHECK(back_cfg.seed == 21);
  CHECK(back_cfg.kind == EnvKind::kPomdp);
}
