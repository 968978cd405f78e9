#include "icwm/harness.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "icwm/bounds.hpp"
#include "icwm/common.hpp"
#include "icwm/config_schema.hpp"
#include "icwm/probes.hpp"
#include "icwm/tabular_env.hpp"

namespace icwm::harness {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct KindInfo {
  ExperimentKind kind;
  const char* name;
  const char* schema;  // definition of the kind-specific body
};

const KindInfo kKinds[] = {
    {ExperimentKind::kBoundVerify, "BOUND_VERIFY", "bound_verify_body"},
    {ExperimentKind::kCrossover, "CROSSOVER", "crossover_body"},
    {ExperimentKind::kCartpoleIcl, "CARTPOLE_ICL", "cartpole_icl_body"},
    {ExperimentKind::kProbePredictiveCoding, "PROBE_PREDICTIVE_CODING", "probe_pc_body"},
    {ExperimentKind::kProbeSilhouette, "PROBE_SILHOUETTE", "probe_silhouette_body"},
};

const KindInfo& info(ExperimentKind kind) {
  for (const auto& k : kKinds)
    if (k.kind == kind) return k;
  throw ContractViolation("unknown experiment kind");
}

void write_text(const fs::path& path, const std::string& body) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << body;
  if (!out) throw ConfigError("write failed: " + path.string());
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void require_finite(const std::vector<ReportRow>& rows) {
  for (const auto& r : rows)
    if (!std::isfinite(r.value)) throw NumericalError("non-finite metric " + r.metric + " for " + r.model);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Context {
  const ExperimentSpec& spec;
  fs::path dir;
  std::vector<ReportRow> rows;
  std::vector<std::string> files;
  json summary = json::object();

  ReportRow row(std::string model, std::size_t T, std::optional<std::size_t> k, std::string metric, double value,
                std::size_t trial, std::string split) const {
    return {spec.id, spec.seed, std::move(model), T, k, std::move(metric), value, trial, std::move(split)};
  }
  void write(const std::string& rel, const std::string& body) {
    write_text(dir / rel, body);
    files.push_back(rel);
  }
};

// BOUND_VERIFY ---------------------------------------------------------------

void run_bound_verify(Context& ctx) {
  const auto& c = ctx.spec.config;
  auto family = tabular::config_from_json(c.at("family"));
  auto bound_cfg = bounds::config_from_json(c.at("bound"));
  bound_cfg.threads = ctx.spec.threads;
  const auto n_families = c.value("families", std::size_t{1});
  const auto target = c.value("target", std::string("unseen"));
  if (target != "seen" && target != "unseen") throw ConfigError("bound target must be seen or unseen");
  const auto seen_index = c.value("seen_index", std::size_t{0});
  const auto slope = c.value("slope_range", std::vector<std::size_t>{});
  if (!slope.empty() && slope.size() != 2) throw ConfigError("slope_range must be [T_min, T_max]");
  if (n_families == 0) throw ConfigError("families must be positive");

  json summaries = json::array();
  for (std::size_t f = 0; f < n_families; ++f) {
    auto fam = family;
    fam.seed = derive_seed(ctx.spec.seed, {stream_tag("family"), f});
    auto cfg = bound_cfg;
    cfg.seed = derive_seed(ctx.spec.seed, {stream_tag("bound"), f});
    const auto envs = tabular::sample_env_family(fam);
    const auto tgt = target == "seen"
                         ? bounds::BoundTarget::seen(seen_index)
                         : bounds::BoundTarget::unseen(tabular::sample_env(
                               fam, derive_seed(ctx.spec.seed, {stream_tag("holdout"), f}), fam.count));
    const auto rep = bounds::verify_bound_montecarlo(envs, tgt, cfg);
    std::ostringstream trials;
    bounds::write_trials_csv(rep, trials);
    ctx.write("trials_family" + std::to_string(f) + ".csv", trials.str());
    const std::string split = target;
    for (const auto& g : rep.grid) {
      const auto name = bounds::to_string(g.predictor);
      ctx.rows.push_back(ctx.row(name, g.T, std::nullopt, "median_tv", g.median_tv, f, split));
      ctx.rows.push_back(ctx.row(name, g.T, std::nullopt, "mean_tv", g.mean_tv, f, split));
      ctx.rows.push_back(ctx.row(name, g.T, std::nullopt, "bound", g.bound, f, split));
      ctx.rows.push_back(ctx.row(name, g.T, std::nullopt, "valid", g.valid ? 1.0 : 0.0, f, split));
      ctx.rows.push_back(ctx.row(name, g.T, std::nullopt, "violation_rate", g.violation_rate, f, split));
      ctx.rows.push_back(ctx.row(name, g.T, std::nullopt, "violation_upper95", g.violation_upper95, f, split));
      if (g.predictor == bounds::PredictorKind::kErArgmax)
        ctx.rows.push_back(
            ctx.row(name, g.T, std::nullopt, "misidentification_rate", g.misidentification_rate, f, split));
    }
    auto s = bounds::summary_json(rep);
    s["family_index"] = f;
    if (!slope.empty()) {
      const double el = bounds::fit_decay_slope(rep, bounds::PredictorKind::kEl, slope[0], slope[1]);
      ctx.rows.push_back(ctx.row("EL", 0, std::nullopt, "decay_slope", el, f, split));
      s["el_decay_slope_fit"] = el;
    }
    ctx.rows.push_back(ctx.row(bounds::to_string(bounds::PredictorKind::kErArgmax), 0, std::nullopt, "alpha", rep.alpha, f, split));
    ctx.rows.push_back(ctx.row(bounds::to_string(bounds::PredictorKind::kErArgmax), 0, std::nullopt, "min_pairwise_delta", rep.min_pairwise_delta, f, split));
    ctx.rows.push_back(ctx.row("EL", 0, std::nullopt, "el_threshold", rep.el_threshold, f, split));
    summaries.push_back(std::move(s));
  }
  ctx.summary["families"] = std::move(summaries);
}

// CROSSOVER ------------------------------------------------------------------

bounds::CrossoverSweep sweep_from_json(const json& doc) {
  bounds::CrossoverSweep s;
  s.n_envs = doc.at("n_envs").get<std::vector<std::size_t>>();
  for (const auto& d : doc.at("dims")) {
    if (!d.is_array() || d.size() != 3) throw ConfigError("sweep dims entries must be [S, A, O]");
    s.dims.push_back({d[0].get<std::size_t>(), d[1].get<std::size_t>(), d[2].get<std::size_t>()});
  }
  s.T_grid = doc.at("T_grid").get<std::vector<std::size_t>>();
  s.runs = doc.value("runs", s.runs);
  s.min_holdout_best_tv = doc.value("min_holdout_best_tv", s.min_holdout_best_tv);
  s.max_holdout_draws = doc.value("max_holdout_draws", s.max_holdout_draws);
  return s;
}

void run_crossover(Context& ctx) {
  const auto& c = ctx.spec.config;
  auto family = tabular::config_from_json(c.at("family"));
  family.seed = derive_seed(ctx.spec.seed, {stream_tag("family")});
  auto bound_cfg = bounds::config_from_json(c.at("bound"));
  bound_cfg.seed = derive_seed(ctx.spec.seed, {stream_tag("bound")});
  bound_cfg.threads = ctx.spec.threads;
  const auto sweep = sweep_from_json(c.at("sweep"));
  const auto rep = bounds::crossover_scan(family, bound_cfg, sweep);
  std::ostringstream csv;
  bounds::write_crossover_csv(rep, csv);
  ctx.write("crossover_medians.csv", csv.str());
  for (std::size_t i = 0; i < rep.cells.size(); ++i) {
    const auto& cell = rep.cells[i];
    const std::string model = std::to_string(cell.n_envs) + "env_" + std::to_string(cell.dims.states) + "x" +
                              std::to_string(cell.dims.actions) + "x" + std::to_string(cell.dims.obs);
    for (const auto& [split, found] : {std::pair{"unseen", cell.crossover_unseen}, {"seen", cell.crossover_seen}}) {
      ctx.rows.push_back(ctx.row(model, found.value_or(0), std::nullopt, "crossover_found", found ? 1.0 : 0.0,
                                 cell.run, split));
    }
    for (std::size_t t = 0; t < rep.T_grid.size(); ++t) {
      const auto T = rep.T_grid[t];
      ctx.rows.push_back(ctx.row(model, T, std::nullopt, "el_median", cell.el_median_unseen[t], cell.run, "unseen"));
      ctx.rows.push_back(ctx.row(model, T, std::nullopt, "er_median", cell.er_median_unseen[t], cell.run, "unseen"));
      ctx.rows.push_back(ctx.row(model, T, std::nullopt, "el_median", cell.el_median_seen[t], cell.run, "seen"));
      ctx.rows.push_back(ctx.row(model, T, std::nullopt, "er_median", cell.er_median_seen[t], cell.run, "seen"));
    }
    ctx.rows.push_back(ctx.row(model, 0, std::nullopt, "best_tv_unseen", cell.best_tv_unseen, cell.run, "unseen"));
  }
  ctx.summary["crossover"] = bounds::crossover_json(rep);
}

// CARTPOLE_ICL ---------------------------------------------------------------

struct TrainedModel {
  std::string name;
  std::string checkpoint;
  std::string early_checkpoint;
  std::vector<seqmodel::EpochStats> curve;
};

void add_icl_rows(Context& ctx, const std::vector<IclSummaryRow>& summary, const std::string& model) {
  for (const auto& s : summary) {
    const std::string id = model + "/" + s.eval_set;
    const std::string split = s.seen ? "seen" : "unseen";
    ctx.rows.push_back(ctx.row(id, s.T, s.k, "mean_error", s.mean_error, 0, split));
    ctx.rows.push_back(ctx.row(id, s.T, s.k, "median_env_error", s.median_error, 0, split));
  }
}

json summary_to_json(const std::vector<IclSummaryRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"model", r.model},
                   {"eval_set", r.eval_set},
                   {"seen", r.seen},
                   {"T", r.T},
                   {"k", r.k},
                   {"mean_error", r.mean_error},
                   {"median_error", r.median_error}});
  return arr;
}

void run_cartpole_icl(Context& ctx) {
  const auto cfg = icl_config_from_json(ctx.spec.config);
  const auto seed = ctx.spec.seed;
  const std::size_t n = cfg.train_sets.size();

  std::vector<cartpole::Dataset> train(n);
  for (std::size_t i = 0; i < n; ++i)
    train[i] = cartpole::build_dataset(cfg.train_sets[i], derive_seed(seed, {stream_tag("train-set"), i}),
                                       ctx.spec.threads);
  std::vector<const cartpole::Dataset*> all;
  for (const auto& d : train) all.push_back(&d);
  const auto norm = seqmodel::fit_normalizer(all);

  std::vector<cartpole::Dataset> unseen;
  for (std::size_t u = 0; u < cfg.unseen_scopes.size(); ++u) {
    cartpole::DatasetSpec es;
    es.name = cartpole::to_string(cfg.unseen_scopes[u]);
    es.n_envs = cfg.eval_envs;
    es.scope = cfg.unseen_scopes[u];
    es.traj_per_env = cfg.eval_traj_per_env;
    es.length = cfg.eval_length;
    unseen.push_back(cartpole::build_dataset(es, derive_seed(seed, {stream_tag("eval-set"), u}), ctx.spec.threads));
  }

  fs::create_directories(ctx.dir / "models");
  std::vector<TrainedModel> trained(n);
  // Models train independently, so they may run side by side.
  parallel_for(n, ctx.spec.threads, [&](std::size_t i) {
    const auto& name = cfg.train_sets[i].name;
    seqmodel::GsaModel model(cfg.model, derive_seed(seed, {stream_tag("model"), i}));
    auto tc = cfg.train;
    tc.seed = derive_seed(seed, {stream_tag("train"), i});
    if (name == cfg.early_from)
      tc.snapshot_epoch = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(cfg.early_fraction * static_cast<double>(tc.epochs))));
    const auto t0 = std::chrono::steady_clock::now();
    auto result = seqmodel::train(model, train[i], norm, cfg.loss, tc, [&](const seqmodel::EpochStats& e) {
      const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "[" << name << "] epoch " << e.epoch << "/" << tc.epochs << " loss " << e.mean.total << " ("
                << static_cast<long>(sec) << "s)\n";
    });
    seqmodel::CheckpointMeta meta;
    meta.loss = cfg.loss;
    meta.normalizer = norm;
    meta.step = result.steps;
    meta.extra = {{"dataset", name}};
    TrainedModel& tm = trained[i];
    tm.name = name;
    tm.curve = result.curve;
    tm.checkpoint = "models/" + name + ".ckpt";
    seqmodel::save_checkpoint((ctx.dir / tm.checkpoint).string(), model, meta);
    if (!result.snapshot.empty()) {
      seqmodel::set_parameter_values(model, result.snapshot);
      meta.step = tc.snapshot_epoch * ((train[i].trajectories.size() + tc.batch - 1) / tc.batch);
      tm.early_checkpoint = "models/" + name + "-early.ckpt";
      seqmodel::save_checkpoint((ctx.dir / tm.early_checkpoint).string(), model, meta);
    }
  });

  std::vector<IclSummaryRow> all_summary;
  auto evaluate = [&](const std::string& ckpt, const std::string& label, std::size_t i) {
    auto model = seqmodel::load_checkpoint((ctx.dir / ckpt).string());
    seqmodel::ModelForecaster f(model);
    const auto seen = seen_eval_set(train[i], cfg.eval_envs, cfg.eval_traj_per_env, cfg.eval_length,
                                    derive_seed(seed, {stream_tag("seen-set"), i}));
    std::vector<std::pair<const cartpole::Dataset*, bool>> sets{{&seen, true}};
    for (const auto& u : unseen) sets.push_back({&u, false});
    for (const auto& [ds, is_seen] : sets) {
      const std::string set_name = is_seen ? "SEEN" : ds->spec.name;
      std::size_t skipped = 0;
      const auto rows = seqmodel::evaluate_icl(f, *ds, norm, cfg.eval, &skipped);
      if (skipped) std::cerr << "warning: " << skipped << " short trajectories skipped in " << set_name << "\n";
      const auto summary = summarize_icl(rows, label, set_name, is_seen);
      add_icl_rows(ctx, summary, label);
      all_summary.insert(all_summary.end(), summary.begin(), summary.end());
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    const auto& tm = trained[i];
    for (const auto& e : tm.curve) {
      ctx.rows.push_back(ctx.row(tm.name, 0, std::nullopt, "train_loss", e.mean.total, e.epoch, ""));
      ctx.rows.push_back(ctx.row(tm.name, 0, std::nullopt, "train_reconstruction", e.mean.reconstruction, e.epoch, ""));
    }
    evaluate(tm.checkpoint, tm.name, i);
    if (!tm.early_checkpoint.empty()) evaluate(tm.early_checkpoint, tm.name + "-early", i);
  }
  json models = json::array();
  for (const auto& tm : trained) {
    json m = {{"name", tm.name}, {"checkpoint", tm.checkpoint}};
    if (!tm.early_checkpoint.empty()) m["early_checkpoint"] = tm.early_checkpoint;
    models.push_back(std::move(m));
  }
  for (const auto& tm : trained) {
    ctx.files.push_back(tm.checkpoint);
    if (!tm.early_checkpoint.empty()) ctx.files.push_back(tm.early_checkpoint);
  }
  ctx.summary["models"] = std::move(models);
  ctx.summary["normalizer"] = seqmodel::normalizer_to_json(norm);
  ctx.summary["icl"] = summary_to_json(all_summary);
}

// Probes ---------------------------------------------------------------------

struct LoadedModel {
  seqmodel::GsaModel model;
  seqmodel::Normalizer norm;
};

LoadedModel probe_model(Context& ctx) {
  const auto& c = ctx.spec.config;
  if (!c.contains("checkpoint")) throw ConfigError("probe needs a checkpoint path");
  const auto path = c.at("checkpoint").get<std::string>();
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  seqmodel::CheckpointMeta meta;
  auto model = seqmodel::load_checkpoint(path, &meta);
  return {std::move(model), meta.normalizer};
}

cartpole::Dataset probe_eval_set(Context& ctx) {
  const auto spec = cartpole::spec_from_json(ctx.spec.config.at("eval"));
  return cartpole::build_dataset(spec, derive_seed(ctx.spec.seed, {stream_tag("probe-eval")}), ctx.spec.threads);
}

void run_probe_pc(Context& ctx) {
  auto lm = probe_model(ctx);
  const auto ds = probe_eval_set(ctx);
  const auto& c = ctx.spec.config;
  probes::PcProbeConfig pc;
  pc.positions = c.value("positions", pc.positions);
  pc.ks = c.value("ks", pc.ks);
  if (c.contains("noise_scale") && !c.at("noise_scale").is_null()) pc.noise_scale = c.at("noise_scale").get<double>();
  pc.n_boot = c.value("n_boot", pc.n_boot);
  pc.seed = derive_seed(ctx.spec.seed, {stream_tag("pc-probe")});
  const auto rep = probes::predictive_coding_probe(lm.model, ds, lm.norm, pc);
  std::ostringstream scatter;
  scatter << "traj,env,position,k,substituted_error,delta\n";
  for (const auto& s : rep.samples)
    scatter << s.traj << ',' << s.env << ',' << s.position << ',' << s.k << ',' << format_double(s.substituted_error)
            << ',' << format_double(s.delta) << '\n';
  ctx.write("pc_scatter.csv", scatter.str());
  json arr = json::array();
  for (const auto& s : rep.summary) {
    ctx.rows.push_back(ctx.row("pc_probe", 0, s.k, "spearman", s.spearman, 0, "unseen"));
    ctx.rows.push_back(ctx.row("pc_probe", 0, s.k, "spearman_ci_lo", s.ci.lo, 0, "unseen"));
    ctx.rows.push_back(ctx.row("pc_probe", 0, s.k, "spearman_ci_hi", s.ci.hi, 0, "unseen"));
    ctx.rows.push_back(ctx.row("pc_probe", 0, s.k, "mean_delta", s.mean_delta, 0, "unseen"));
    ctx.rows.push_back(ctx.row("pc_probe", 0, s.k, "n", static_cast<double>(s.n), 0, "unseen"));
    arr.push_back({{"k", s.k},
                   {"n", s.n},
                   {"spearman", s.spearman},
                   {"ci", {s.ci.lo, s.ci.hi}},
                   {"mean_delta", s.mean_delta}});
  }
  ctx.summary["predictive_coding"] = std::move(arr);
}

void run_probe_silhouette(Context& ctx) {
  auto lm = probe_model(ctx);
  const auto ds = probe_eval_set(ctx);
  const auto& c = ctx.spec.config;
  const auto layers = c.value("layers", std::vector<std::size_t>{0});
  const auto steps = c.value("steps", std::vector<std::size_t>{ds.spec.length});
  if (steps.empty()) throw ConfigError("silhouette: steps must be nonempty");
  const std::size_t max_step = *std::max_element(steps.begin(), steps.end());
  std::vector<std::size_t> traj(ds.trajectories.size());
  for (std::size_t i = 0; i < traj.size(); ++i) traj[i] = i;
  const auto dumps = seqmodel::export_memory_states(lm.model, ds, lm.norm, traj, layers, max_step);
  json arr = json::array();
  for (auto step : steps) {
    for (const auto& r : probes::silhouette_probe(dumps, step)) {
      ctx.rows.push_back(ctx.row("layer" + std::to_string(r.layer), step, std::nullopt, "silhouette", r.score, 0, ""));
      arr.push_back({{"layer", r.layer}, {"step", step}, {"n_points", r.n_points}, {"score", r.score}});
    }
  }
  if (c.value("export", true)) {
    for (const auto& d : dumps) {
      std::ostringstream out;
      out << "env,traj,step";
      for (std::size_t j = 0; j < d.dim; ++j) out << ",m" << j;
      out << '\n';
      for (std::size_t i = 0; i < d.step.size(); ++i) {
        if (std::find(steps.begin(), steps.end(), d.step[i]) == steps.end()) continue;
        out << d.env[i] << ',' << d.traj[i] << ',' << d.step[i];
        for (std::size_t j = 0; j < d.dim; ++j) out << ',' << format_double(d.values[i * d.dim + j]);
        out << '\n';
      }
      ctx.write("memory_layer" + std::to_string(d.layer) + ".csv", out.str());
    }
  }
  ctx.summary["silhouette"] = std::move(arr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string to_string(ExperimentKind kind) { return info(kind).name; }

ExperimentKind kind_from_string(const std::string& name) {
  for (const auto& k : kKinds)
    if (name == k.name) return k.kind;
  throw ConfigError("unknown experiment kind: " + name);
}

ExperimentSpec spec_from_json(const json& doc) {
  const json& body = doc.contains("spec") ? doc.at("spec") : doc;
  try {
    ExperimentSpec s;
    s.id = body.value("id", s.id);
    s.kind = kind_from_string(body.at("kind").get<std::string>());
    if (!body.contains("seed")) throw ConfigError("experiment spec: seed must be set");
    s.seed = body.at("seed").get<std::uint64_t>();
    s.threads = body.value("threads", s.threads);
    s.out_dir = body.value("out_dir", s.out_dir);
    s.config = body.value("config", json::object());
    if (s.id.empty() || s.id.find(',') != std::string::npos) throw ConfigError("experiment id must be nonempty, no commas");
    if (s.threads == 0) throw ConfigError("threads must be positive");
    return s;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment spec: ") + e.what());
  }
}

json spec_to_json(const ExperimentSpec& s) {
  return {{"id", s.id},
          {"kind", to_string(s.kind)},
          {"seed", s.seed},
          {"threads", s.threads},
          {"out_dir", s.out_dir},
          {"config", s.config}};
}

ExperimentSpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  try {
    return spec_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
}

void write_rows_csv(const std::vector<ReportRow>& rows, std::ostream& out) {
  out << kReportHeader << '\n';
  for (const auto& r : rows) {
    out << r.experiment_id << ',' << r.seed << ',' << r.model << ',' << r.T << ',';
    if (r.k) out << *r.k;
    out << ',' << r.metric << ',' << format_double(r.value) << ',' << r.trial << ',' << r.split << '\n';
  }
}

std::vector<ReportRow> read_rows_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kReportHeader) throw ConfigError("report CSV: unexpected header");
  std::vector<ReportRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 9) throw ConfigError("report CSV: expected 9 fields in: " + line);
    ReportRow r;
    r.experiment_id = f[0];
    r.seed = std::stoull(f[1]);
    r.model = f[2];
    r.T = std::stoull(f[3]);
    if (!f[4].empty()) r.k = std::stoull(f[4]);
    r.metric = f[5];
    r.value = std::stod(f[6]);
    r.trial = std::stoull(f[7]);
    r.split = f[8];
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<std::string> emit_reports(const std::vector<ReportRow>& rows, const std::string& dir,
                                      const std::string& stem) {
  require_finite(rows);
  const fs::path base(dir);
  std::ostringstream csv;
  write_rows_csv(rows, csv);
  write_text(base / (stem + ".csv"), csv.str());
  std::map<std::string, std::vector<double>> by_metric;
  for (const auto& r : rows) by_metric[r.metric].push_back(r.value);
  json metrics = json::object();
  for (const auto& [m, v] : by_metric) metrics[m] = {{"count", v.size()}, {"mean", mean_of(v)}};
  write_text(base / (stem + ".json"), dump({{"rows", rows.size()}, {"metrics", metrics}}));
  return {(base / (stem + ".csv")).string(), (base / (stem + ".json")).string()};
}

RunResult run(const ExperimentSpec& spec) {
  schema::require_valid(spec.config, info(spec.kind).schema);
  Context ctx{spec, fs::path(spec.out_dir), {}, {}, json::object()};
  fs::create_directories(ctx.dir);
  const auto t0 = std::chrono::steady_clock::now();
  json manifest = {{"spec", spec_to_json(spec)},
                   {"versions",
                    {{"icwm", kVersion},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"compiler", __VERSION__},
                     {"checkpoint_format", seqmodel::kCheckpointFormatVersion},
                     {"dataset_format", cartpole::kDatasetFormatVersion}}},
                   {"seeds", {{"base", spec.seed}}}};
  auto finish = [&](const std::string& status, const std::string& error) {
    manifest["status"] = status;
    if (!error.empty()) manifest["error"] = error;
    manifest["wall_time_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    manifest["outputs"] = ctx.files;
    write_text(ctx.dir / "manifest.json", dump(manifest));
  };
  try {
    switch (spec.kind) {
      case ExperimentKind::kBoundVerify: run_bound_verify(ctx); break;
      case ExperimentKind::kCrossover: run_crossover(ctx); break;
      case ExperimentKind::kCartpoleIcl: run_cartpole_icl(ctx); break;
      case ExperimentKind::kProbePredictiveCoding: run_probe_pc(ctx); break;
      case ExperimentKind::kProbeSilhouette: run_probe_silhouette(ctx); break;
    }
    require_finite(ctx.rows);
    emit_reports(ctx.rows, ctx.dir.string(), "report");
    ctx.files.push_back("report.csv");
    ctx.files.push_back("report.json");
    ctx.write("summary.json", dump(ctx.summary));
  } catch (const NumericalError& e) {
    finish("failed", e.what());
    throw;
  } catch (const json::exception& e) {
    finish("failed", e.what());
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  finish("ok", "");
  return {ctx.files, std::move(ctx.rows), std::move(ctx.summary), std::move(manifest)};
}

// Cart-pole experiment helpers -----------------------------------------------

void IclExperimentConfig::validate() const {
  if (train_sets.empty()) throw ConfigError("icl: at least one training set");
  std::map<std::string, int> names;
  for (const auto& s : train_sets) {
    s.validate();
    if (s.name.empty() || s.name.find_first_of(",/") != std::string::npos)
      throw ConfigError("icl: dataset names must be nonempty without ',' or '/'");
    if (++names[s.name] > 1) throw ConfigError("icl: duplicate dataset name " + s.name);
  }
  model.validate();
  loss.validate();
  train.validate();
  if (eval_envs == 0 || eval_traj_per_env == 0 || eval_length == 0) throw ConfigError("icl: empty evaluation set");
  if (!(early_fraction > 0.0 && early_fraction <= 1.0)) throw ConfigError("icl: early_fraction in (0, 1]");
  if (seqmodel::icl_anchors(eval_length, eval).empty()) throw ConfigError("icl: eval_length too short for T grid");
}

IclExperimentConfig default_icl_config() {
  IclExperimentConfig c;
  cartpole::DatasetSpec one;
  one.name = "1-Env";
  one.n_envs = 1;
  one.scope = cartpole::Scope::kOriginal;
  one.traj_per_env = 8192;
  cartpole::DatasetSpec four = one;
  four.name = "4-Envs";
  four.n_envs = 4;
  four.scope = cartpole::Scope::kScope1Plus2;
  four.traj_per_env = 2048;
  cartpole::DatasetSpec many = four;
  many.name = "many-Envs";
  many.n_envs = 1024;
  many.traj_per_env = 8;
  c.train_sets = {one, four, many};
  c.train.lr = 2e-3;
  c.train.lr_final = 4.08e-4;
  c.train.window = 100;
  c.train.epochs = 10;
  return c;
}

IclExperimentConfig icl_config_from_json(const json& doc) {
  try {
    IclExperimentConfig c = default_icl_config();
    if (doc.contains("train_sets")) {
      c.train_sets.clear();
      for (const auto& s : doc.at("train_sets")) c.train_sets.push_back(cartpole::spec_from_json(s));
    }
    if (doc.contains("model")) c.model = seqmodel::config_from_json(doc.at("model"));
    if (doc.contains("loss")) c.loss = seqmodel::loss_from_json(doc.at("loss"));
    if (doc.contains("train")) c.train = seqmodel::train_config_from_json(doc.at("train"));
    if (doc.contains("eval")) {
      const auto& e = doc.at("eval");
      c.eval.T_grid = e.value("T_grid", c.eval.T_grid);
      c.eval.k_list = e.value("k_list", c.eval.k_list);
      c.eval.n_anchors = e.value("n_anchors", c.eval.n_anchors);
      c.eval_envs = e.value("envs", c.eval_envs);
      c.eval_traj_per_env = e.value("traj_per_env", c.eval_traj_per_env);
      c.eval_length = e.value("length", c.eval_length);
      if (e.contains("unseen_scopes")) {
        c.unseen_scopes.clear();
        for (const auto& s : e.at("unseen_scopes")) c.unseen_scopes.push_back(cartpole::scope_from_string(s));
      }
    }
    c.early_fraction = doc.value("early_fraction", c.early_fraction);
    c.early_from = doc.value("early_from", c.early_from);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("icl config: ") + e.what());
  }
}

json icl_config_to_json(const IclExperimentConfig& c) {
  json sets = json::array();
  for (const auto& s : c.train_sets) sets.push_back(cartpole::spec_to_json(s));
  json scopes = json::array();
  for (auto s : c.unseen_scopes) scopes.push_back(cartpole::to_string(s));
  return {{"train_sets", sets},
          {"model", seqmodel::config_to_json(c.model)},
          {"loss", seqmodel::loss_to_json(c.loss)},
          {"train", seqmodel::train_config_to_json(c.train)},
          {"eval",
           {{"T_grid", c.eval.T_grid},
            {"k_list", c.eval.k_list},
            {"n_anchors", c.eval.n_anchors},
            {"envs", c.eval_envs},
            {"traj_per_env", c.eval_traj_per_env},
            {"length", c.eval_length},
            {"unseen_scopes", scopes}}},
          {"early_fraction", c.early_fraction},
          {"early_from", c.early_from}};
}

cartpole::Dataset seen_eval_set(const cartpole::Dataset& train, std::size_t max_envs, std::size_t traj_per_env,
                                std::size_t length, std::uint64_t seed) {
  cartpole::Dataset out;
  out.spec = train.spec;
  out.spec.name = train.spec.name + "-seen";
  out.spec.n_envs = std::min(max_envs, train.env_params.size());
  out.spec.traj_per_env = traj_per_env;
  out.spec.length = length;
  out.spec.validate();
  out.seed = seed;
  // Spread the picked environments across the training set.
  const std::size_t n = train.env_params.size();
  for (std::size_t i = 0; i < out.spec.n_envs; ++i) out.env_params.push_back(train.env_params[i * n / out.spec.n_envs]);
  for (std::size_t e = 0; e < out.spec.n_envs; ++e)
    for (std::size_t j = 0; j < traj_per_env; ++j) {
      Rng rng(derive_seed(seed, {stream_tag("traj"), e, j}));
      const double noise = out.spec.noise_lo + (out.spec.noise_hi - out.spec.noise_lo) * uniform01(rng);
      out.trajectories.push_back(
          cartpole::collect_trajectory(out.env_params[e], noise, length, rng, std::nullopt,
                                       cartpole::DynamicsConfig{10.0, 0.02, out.spec.integrator}));
    }
  return out;
}

std::vector<IclSummaryRow> summarize_icl(const std::vector<seqmodel::IclErrorRow>& rows, const std::string& model,
                                         const std::string& eval_set, bool seen) {
  // (T, k) -> env -> errors
  std::map<std::pair<std::size_t, std::size_t>, std::map<std::size_t, std::vector<double>>> groups;
  for (const auto& r : rows) groups[{r.T, r.k}][r.env].push_back(r.error);
  std::vector<IclSummaryRow> out;
  for (const auto& [key, envs] : groups) {
    std::vector<double> all, per_env;
    for (const auto& [env, errs] : envs) {
      all.insert(all.end(), errs.begin(), errs.end());
      per_env.push_back(mean_of(errs));
    }
    out.push_back({model, eval_set, seen, key.first, key.second, mean_of(all), median_of(per_env)});
  }
  return out;
}

}  // namespace icwm::harness
