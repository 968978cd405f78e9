#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "icwm/cartpole_env.hpp"

using namespace icwm;
using namespace icwm::cartpole;

namespace {

// Kolmogorov-Smirnov statistic of samples against U[lo, hi].
double ks_uniform(std::vector<double> xs, double lo, double hi) {
  std::sort(xs.begin(), xs.end());
  const double n = static_cast<double>(xs.size());
  double d = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double f = (xs[i] - lo) / (hi - lo);
    d = std::max({d, (i + 1) / n - f, f - i / n});
  }
  return d;
}

}  // namespace

TEST_CASE("original params and scope ranges") {
  Rng rng(1);
  CHECK(sample_params(Scope::kOriginal, rng) == CartPoleParams{9.8, 1.0, 0.1, 0.5});
  for (int i = 0; i < 1000; ++i) {
    auto p = sample_params(Scope::kScope1, rng);
    CHECK(inside_scope1(p));
  }
  for (int i = 0; i < 10000; ++i) {
    auto p = sample_params(Scope::kScope1Plus2Excl1, rng);
    REQUIRE_FALSE(inside_scope1(p));
  }
  CHECK(scope_from_string(to_string(Scope::kScope1Plus2)) == Scope::kScope1Plus2);
  CHECK_THROWS_AS(scope_from_string("SCOPE3"), ConfigError);
}

TEST_CASE("parameter draws are uniform") {
  Rng rng(2);
  const auto r = scope_ranges(Scope::kScope1Plus2);
  std::array<std::vector<double>, 4> cols;
  for (int i = 0; i < 10000; ++i) {
    auto v = sample_params(Scope::kScope1Plus2, rng).to_array();
    for (std::size_t k = 0; k < 4; ++k) cols[k].push_back(v[k]);
  }
  for (std::size_t k = 0; k < 4; ++k) CHECK(ks_uniform(cols[k], r[k].lo, r[k].hi) < 0.02);
}

TEST_CASE("dynamics equilibrium and hand-evaluated push") {
  CartPoleParams p;
  CartPoleState rest;
  CHECK(step_force(p, rest, 0.0) == rest);

  // temp = F/(m_c+m_p); theta_acc = -temp / (l (4/3 - m_p/(m_c+m_p))); x_acc = temp - m_p l theta_acc/(m_c+m_p).
  const double total = 1.1;
  const double temp = 10.0 / total;
  const double theta_acc = -temp / (0.5 * (4.0 / 3.0 - 0.1 / total));
  const double x_acc = temp - 0.1 * 0.5 * theta_acc / total;
  auto n = step_dynamics(p, rest, 1);
  CHECK(n.x == 0.0);
  CHECK(n.theta == 0.0);
  CHECK(n.x_dot == doctest::Approx(0.02 * x_acc).epsilon(1e-14));
  CHECK(n.theta_dot == doctest::Approx(0.02 * theta_acc).epsilon(1e-14));
  CHECK(n.x_dot == doctest::Approx(0.19512).epsilon(1e-4));
  CHECK(n.theta_dot == doctest::Approx(-0.29268).epsilon(1e-4));
  CHECK_THROWS_AS(step_force(p, CartPoleState{NAN, 0, 0, 0}, 0.0), ContractViolation);
}

TEST_CASE("dynamics mirror symmetry") {
  CartPoleParams p{11.0, 0.9, 0.15, 0.7};
  CartPoleState s{0.3, -0.2, 0.1, 0.4};
  CartPoleState m{-0.3, 0.2, -0.1, -0.4};
  for (auto integ : {Integrator::kEuler, Integrator::kSemiImplicitEuler}) {
    DynamicsConfig cfg;
    cfg.integrator = integ;
    auto a = step_dynamics(p, s, 1, cfg);
    auto b = step_dynamics(p, m, 0, cfg);
    CHECK(a.x == doctest::Approx(-b.x));
    CHECK(a.x_dot == doctest::Approx(-b.x_dot));
    CHECK(a.theta == doctest::Approx(-b.theta));
    CHECK(a.theta_dot == doctest::Approx(-b.theta_dot));
  }
}

TEST_CASE("pole energy drift with a heavy cart") {
  CartPoleParams p{9.8, 1e9, 0.1, 0.5};
  for (auto integ : {Integrator::kEuler, Integrator::kSemiImplicitEuler}) {
    DynamicsConfig cfg;
    cfg.integrator = integ;
    CartPoleState s{0.0, 0.0, 0.02, 0.0};
    // Energy per unit mass of a pole about its pivot: (2/3) l^2 w^2 + g l cos(theta).
    auto energy = [&](const CartPoleState& st) {
      return (2.0 / 3.0) * p.l * p.l * st.theta_dot * st.theta_dot + p.g * p.l * std::cos(st.theta);
    };
    const double e0 = energy(s);
    for (int t = 0; t < 50; ++t) s = step_force(p, s, 0.0, cfg);
    CHECK(std::abs(energy(s) - e0) / std::abs(e0) < 0.01);
  }
}

TEST_CASE("scripted policy") {
  CHECK(scripted_policy(CartPoleState{}) == 1);
  CHECK(scripted_policy(CartPoleState{0, 0, 0.5, 0}) == 1);
  CHECK(scripted_policy(CartPoleState{0, 0, -0.5, 0}) == 0);

  CartPoleParams p;
  Rng rng(3);
  std::uniform_real_distribution<double> u(-0.05, 0.05);
  int survived = 0;
  for (int i = 0; i < 100; ++i) {
    CartPoleState s{u(rng), u(rng), u(rng), u(rng)};
    bool ok = true;
    for (int t = 0; t < 500 && ok; ++t) {
      s = step_dynamics(p, s, scripted_policy(s));
      ok = std::abs(s.theta) < 0.21;
    }
    survived += ok;
  }
  CHECK(survived >= 95);
}

TEST_CASE("collect_trajectory") {
  CartPoleParams p;
  Rng a(4), b(4);
  auto t1 = collect_trajectory(p, 0.0, 200, a, CartPoleState{});
  auto t2 = collect_trajectory(p, 0.0, 200, b, CartPoleState{});
  CHECK(t1.observations == t2.observations);
  CHECK(t1.actions == t2.actions);
  CHECK(t1.length() == 200);
  CHECK(t1.observations.size() == 201 * kObsDim);

  Rng c(5);
  auto noisy = collect_trajectory(p, 1.0, 10000, c);
  const double ones = std::count(noisy.actions.begin(), noisy.actions.end(), 1);
  CHECK(std::abs(ones - 5000.0) < 3.0 * std::sqrt(2500.0));
  CHECK_THROWS_AS(collect_trajectory(p, 1.5, 10, c), ContractViolation);
}

TEST_CASE("build_dataset layouts and determinism") {
  DatasetSpec one;
  one.n_envs = 1;
  one.scope = Scope::kOriginal;
  one.traj_per_env = 32;
  auto d1 = build_dataset(one, 11);
  CHECK(d1.trajectories.size() == 32);
  for (const auto& t : d1.trajectories) {
    CHECK(t.params == CartPoleParams{});
    CHECK(t.noise_level >= 0.3);
    CHECK(t.noise_level <= 0.7);
  }

  DatasetSpec four;
  four.n_envs = 4;
  four.scope = Scope::kScope1Plus2;
  four.traj_per_env = 8;
  auto d4 = build_dataset(four, 12);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) CHECK_FALSE(d4.env_params[i] == d4.env_params[j]);
  CHECK(d4.total_steps() == d1.total_steps());

  auto again = build_dataset(four, 12, 3);
  for (std::size_t k = 0; k < again.trajectories.size(); ++k)
    CHECK(again.trajectories[k].observations == d4.trajectories[k].observations);

  DatasetSpec bad = one;
  bad.traj_per_env = 0;
  CHECK_THROWS_AS(build_dataset(bad, 1), ConfigError);
}

TEST_CASE("dataset binary and JSON round trip") {
  DatasetSpec s;
  s.n_envs = 3;
  s.scope = Scope::kScope1;
  s.traj_per_env = 2;
  s.length = 20;
  auto ds = build_dataset(s, 9);
  std::stringstream buf;
  write_dataset(ds, buf);
  auto back = read_dataset(buf);
  REQUIRE(back.trajectories.size() == 6);
  CHECK(back.seed == 9);
  CHECK(back.spec.scope == Scope::kScope1);
  for (std::size_t k = 0; k < 6; ++k) {
    CHECK(back.trajectories[k].observations == ds.trajectories[k].observations);
    CHECK(back.trajectories[k].actions == ds.trajectories[k].actions);
    CHECK(back.trajectories[k].params.g == doctest::Approx(ds.trajectories[k].params.g).epsilon(1e-6));
  }
  auto j = dataset_from_json(nlohmann::json::parse(dataset_to_json(ds).dump()));
  CHECK(j.trajectories[5].observations == ds.trajectories[5].observations);
  std::stringstream junk("NOTADATASET");
  CHECK_THROWS_AS(read_dataset(junk), ConfigError);
}
