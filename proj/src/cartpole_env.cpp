#include "icwm/cartpole_env.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace icwm::cartpole {

namespace {

constexpr char kMagic[8] = {'I', 'C', 'W', 'M', 'C', 'P', 'D', '1'};

bool finite_state(const CartPoleState& s) {
  return std::isfinite(s.x) && std::isfinite(s.x_dot) && std::isfinite(s.theta) &&
         std::isfinite(s.theta_dot);
}

void push_obs(std::vector<float>& out, const CartPoleState& s) {
  out.push_back(static_cast<float>(s.x));
  out.push_back(static_cast<float>(s.x_dot));
  out.push_back(static_cast<float>(s.theta));
  out.push_back(static_cast<float>(s.theta_dot));
}

template <class T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError("dataset: truncated stream");
  return v;
}

}  // namespace

std::string to_string(Scope scope) {
  switch (scope) {
    case Scope::kScope1: return "SCOPE1";
    case Scope::kScope1Plus2Excl1: return "SCOPE1PLUS2_EXCL1";
    case Scope::kScope1Plus2: return "SCOPE1PLUS2";
    case Scope::kOriginal: return "ORIGINAL";
  }
  return "?";
}

Scope scope_from_string(const std::string& name) {
  if (name == "SCOPE1") return Scope::kScope1;
  if (name == "SCOPE1PLUS2_EXCL1") return Scope::kScope1Plus2Excl1;
  if (name == "SCOPE1PLUS2") return Scope::kScope1Plus2;
  if (name == "ORIGINAL") return Scope::kOriginal;
  throw ConfigError("unknown scope: " + name);
}

std::array<Range, 4> scope_ranges(Scope scope) {
  switch (scope) {
    case Scope::kScope1:
      return {Range{8.0, 12.0}, Range{0.8, 1.2}, Range{0.08, 0.12}, Range{0.4, 0.6}};
    case Scope::kScope1Plus2Excl1:
    case Scope::kScope1Plus2:
      return {Range{2.0, 16.0}, Range{0.5, 2.0}, Range{0.05, 0.20}, Range{0.20, 1.0}};
    case Scope::kOriginal:
      return {Range{9.8, 9.8}, Range{1.0, 1.0}, Range{0.1, 0.1}, Range{0.5, 0.5}};
  }
  throw ContractViolation("scope_ranges: bad scope");
}

bool inside_scope1(const CartPoleParams& p) {
  const auto r = scope_ranges(Scope::kScope1);
  const auto v = p.to_array();
  for (std::size_t i = 0; i < 4; ++i)
    if (!r[i].contains(v[i])) return false;
  return true;
}

CartPoleParams sample_params(Scope scope, Rng& rng) {
  if (scope == Scope::kOriginal) return CartPoleParams{};
  const auto r = scope_ranges(scope);
  for (;;) {
    std::array<double, 4> v{};
    for (std::size_t i = 0; i < 4; ++i)
      v[i] = std::uniform_real_distribution<double>(r[i].lo, r[i].hi)(rng);
    CartPoleParams p{v[0], v[1], v[2], v[3]};
    if (scope != Scope::kScope1Plus2Excl1 || !inside_scope1(p)) return p;
  }
}

std::string to_string(Integrator integrator) {
  return integrator == Integrator::kEuler ? "EULER" : "SEMI_IMPLICIT_EULER";
}

Integrator integrator_from_string(const std::string& name) {
  if (name == "EULER") return Integrator::kEuler;
  if (name == "SEMI_IMPLICIT_EULER") return Integrator::kSemiImplicitEuler;
  throw ConfigError("unknown integrator: " + name);
}

CartPoleState step_force(const CartPoleParams& p, const CartPoleState& s, double force,
                         const DynamicsConfig& cfg) {
  ICWM_REQUIRE(finite_state(s) && std::isfinite(force), "step_force: non-finite input");
  const double total = p.m_c + p.m_p;
  const double c = std::cos(s.theta);
  const double sn = std::sin(s.theta);
  const double temp = (force + p.m_p * p.l * s.theta_dot * s.theta_dot * sn) / total;
  const double theta_acc = (p.g * sn - c * temp) / (p.l * (4.0 / 3.0 - p.m_p * c * c / total));
  const double x_acc = temp - p.m_p * p.l * theta_acc * c / total;

  CartPoleState n;
  if (cfg.integrator == Integrator::kEuler) {
    n.x = s.x + cfg.dt * s.x_dot;
    n.x_dot = s.x_dot + cfg.dt * x_acc;
    n.theta = s.theta + cfg.dt * s.theta_dot;
    n.theta_dot = s.theta_dot + cfg.dt * theta_acc;
  } else {
    n.x_dot = s.x_dot + cfg.dt * x_acc;
    n.x = s.x + cfg.dt * n.x_dot;
    n.theta_dot = s.theta_dot + cfg.dt * theta_acc;
    n.theta = s.theta + cfg.dt * n.theta_dot;
  }
  return n;
}

CartPoleState step_dynamics(const CartPoleParams& p, const CartPoleState& s, int action,
                            const DynamicsConfig& cfg) {
  ICWM_REQUIRE(action == 0 || action == 1, "step_dynamics: action must be 0 or 1");
  return step_force(p, s, action == 1 ? cfg.force_mag : -cfg.force_mag, cfg);
}

int scripted_policy(const CartPoleState& s) {
  ICWM_REQUIRE(finite_state(s), "scripted_policy: non-finite state");
  const auto v = s.to_array();
  double z = 0.0;
  for (std::size_t i = 0; i < 4; ++i) z += kPolicyWeights[i] * v[i];
  return z >= 0.0 ? 1 : 0;
}

Trajectory collect_trajectory(const CartPoleParams& params, double noise_level, std::size_t length,
                              Rng& rng, std::optional<CartPoleState> initial,
                              const DynamicsConfig& dyn) {
  ICWM_REQUIRE(noise_level >= 0.0 && noise_level <= 1.0, "collect_trajectory: noise_level not in [0,1]");
  Trajectory tr;
  tr.params = params;
  tr.noise_level = noise_level;
  CartPoleState s;
  if (initial) {
    s = *initial;
  } else {
    std::uniform_real_distribution<double> u(-0.05, 0.05);
    s = {u(rng), u(rng), u(rng), u(rng)};
  }
  tr.observations.reserve((length + 1) * kObsDim);
  tr.actions.reserve(length);
  push_obs(tr.observations, s);
  for (std::size_t t = 0; t < length; ++t) {
    int a = scripted_policy(s);
    if (noise_level > 0.0 && uniform01(rng) < noise_level) a = static_cast<int>(uniform_index(rng, 2));
    s = step_dynamics(params, s, a, dyn);
    if (!finite_state(s)) throw NumericalError("collect_trajectory: state diverged");
    tr.actions.push_back(static_cast<std::uint8_t>(a));
    push_obs(tr.observations, s);
  }
  return tr;
}

void DatasetSpec::validate() const {
  if (n_envs == 0) throw ConfigError("dataset: n_envs must be positive");
  if (traj_per_env == 0) throw ConfigError("dataset: zero trajectories");
  if (length == 0) throw ConfigError("dataset: length must be positive");
  if (!(0.0 <= noise_lo && noise_lo <= noise_hi && noise_hi <= 1.0))
    throw ConfigError("dataset: need 0 <= noise_lo <= noise_hi <= 1");
}

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.length();
  return n;
}

Dataset build_dataset(const DatasetSpec& spec, std::uint64_t seed, std::size_t threads) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.seed = seed;
  ds.env_params.resize(spec.n_envs);
  for (std::size_t i = 0; i < spec.n_envs; ++i) {
    Rng rng(derive_seed(seed, {stream_tag("params"), i}));
    ds.env_params[i] = sample_params(spec.scope, rng);
  }
  DynamicsConfig dyn;
  dyn.integrator = spec.integrator;
  ds.trajectories.resize(spec.n_envs * spec.traj_per_env);
  parallel_for(ds.trajectories.size(), threads, [&](std::size_t k) {
    const std::size_t env = k / spec.traj_per_env;
    const std::size_t j = k % spec.traj_per_env;
    Rng rng(derive_seed(seed, {stream_tag("traj"), env, j}));
    const double noise = std::uniform_real_distribution<double>(spec.noise_lo, spec.noise_hi)(rng);
    ds.trajectories[k] = collect_trajectory(ds.env_params[env], noise, spec.length, rng, std::nullopt, dyn);
  });
  return ds;
}

nlohmann::json spec_to_json(const DatasetSpec& s) {
  return {{"name", s.name},         {"n_envs", s.n_envs},     {"scope", to_string(s.scope)},
          {"traj_per_env", s.traj_per_env}, {"length", s.length}, {"noise_lo", s.noise_lo},
          {"noise_hi", s.noise_hi}, {"integrator", to_string(s.integrator)}};
}

DatasetSpec spec_from_json(const nlohmann::json& doc) {
  try {
    DatasetSpec s;
    s.name = doc.value("name", s.name);
    s.n_envs = doc.at("n_envs").get<std::size_t>();
    s.scope = scope_from_string(doc.at("scope").get<std::string>());
    s.traj_per_env = doc.at("traj_per_env").get<std::size_t>();
    s.length = doc.value("length", s.length);
    s.noise_lo = doc.value("noise_lo", s.noise_lo);
    s.noise_hi = doc.value("noise_hi", s.noise_hi);
    s.integrator = integrator_from_string(doc.value("integrator", std::string("EULER")));
    s.validate();
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("dataset spec: ") + e.what());
  }
}

void write_dataset(const Dataset& ds, std::ostream& out) {
  nlohmann::json header = {{"format_version", kDatasetFormatVersion},
                           {"spec", spec_to_json(ds.spec)},
                           {"seed", ds.seed},
                           {"counts", {{"envs", ds.env_params.size()},
                                       {"trajectories", ds.trajectories.size()},
                                       {"steps", ds.total_steps()}}}};
  const std::string h = header.dump();
  out.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& tr : ds.trajectories) {
    for (double v : tr.params.to_array()) put<float>(out, static_cast<float>(v));
    put<float>(out, static_cast<float>(tr.noise_level));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tr.length()));
    out.write(reinterpret_cast<const char*>(tr.observations.data()),
              static_cast<std::streamsize>(tr.observations.size() * sizeof(float)));
    out.write(reinterpret_cast<const char*>(tr.actions.data()),
              static_cast<std::streamsize>(tr.actions.size()));
  }
  if (!out) throw ConfigError("dataset: write failed");
}

Dataset read_dataset(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ConfigError("dataset: bad magic");
  const auto hlen = get<std::uint64_t>(in);
  std::string h(hlen, '\0');
  in.read(h.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw ConfigError("dataset: truncated header");
  const auto header = nlohmann::json::parse(h);
  if (header.at("format_version").get<int>() != kDatasetFormatVersion)
    throw ConfigError("dataset: unsupported format version");
  Dataset ds;
  ds.spec = spec_from_json(header.at("spec"));
  ds.seed = header.at("seed").get<std::uint64_t>();
  const auto n = header.at("counts").at("trajectories").get<std::size_t>();
  ds.trajectories.resize(n);
  for (auto& tr : ds.trajectories) {
    float p[4];
    for (float& v : p) v = get<float>(in);
    tr.params = {p[0], p[1], p[2], p[3]};
    tr.noise_level = get<float>(in);
    const auto len = get<std::uint32_t>(in);
    tr.observations.resize((len + 1) * kObsDim);
    tr.actions.resize(len);
    in.read(reinterpret_cast<char*>(tr.observations.data()),
            static_cast<std::streamsize>(tr.observations.size() * sizeof(float)));
    in.read(reinterpret_cast<char*>(tr.actions.data()), static_cast<std::streamsize>(len));
    if (!in) throw ConfigError("dataset: truncated trajectory");
  }
  for (std::size_t i = 0; i < ds.spec.n_envs; ++i) {
    const std::size_t k = i * ds.spec.traj_per_env;
    ds.env_params.push_back(k < n ? ds.trajectories[k].params : CartPoleParams{});
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  write_dataset(ds, out);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open dataset: " + path);
  return read_dataset(in);
}

nlohmann::json dataset_to_json(const Dataset& ds) {
  nlohmann::json trajs = nlohmann::json::array();
  for (const auto& tr : ds.trajectories)
    trajs.push_back({{"params", tr.params.to_array()},
                     {"noise_level", tr.noise_level},
                     {"observations", tr.observations},
                     {"actions", tr.actions}});
  nlohmann::json envs = nlohmann::json::array();
  for (const auto& p : ds.env_params) envs.push_back(p.to_array());
  return {{"format_version", kDatasetFormatVersion},
          {"spec", spec_to_json(ds.spec)},
          {"seed", ds.seed},
          {"env_params", envs},
          {"trajectories", trajs}};
}

Dataset dataset_from_json(const nlohmann::json& doc) {
  Dataset ds;
  ds.spec = spec_from_json(doc.at("spec"));
  ds.seed = doc.at("seed").get<std::uint64_t>();
  for (const auto& e : doc.at("env_params")) {
    auto v = e.get<std::array<double, 4>>();
    ds.env_params.push_back({v[0], v[1], v[2], v[3]});
  }
  for (const auto& t : doc.at("trajectories")) {
    Trajectory tr;
    auto v = t.at("params").get<std::array<double, 4>>();
    tr.params = {v[0], v[1], v[2], v[3]};
    tr.noise_level = t.at("noise_level").get<double>();
    tr.observations = t.at("observations").get<std::vector<float>>();
    tr.actions = t.at("actions").get<std::vector<std::uint8_t>>();
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

}  // namespace icwm::cartpole
