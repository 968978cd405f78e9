#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "icwm/bounds.hpp"
#include "icwm/common.hpp"
#include "icwm/config_schema.hpp"
#include "icwm/harness.hpp"
#include "icwm/tabular_env.hpp"
#include "icwm/training.hpp"

using namespace icwm;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::optional<std::size_t> threads;
};

json load_json(const std::string& path) {
  if (path.empty()) throw ConfigError("--config is required");
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path + " is not valid JSON: " + e.what());
  }
}

void write_file(const fs::path& p, const std::string& body) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << body;
}

std::uint64_t resolve_seed(const Globals& g, const json& body) {
  if (g.seed) return *g.seed;
  if (body.contains("seed")) return body.at("seed").get<std::uint64_t>();
  throw ConfigError("seed must be set (config 'seed' or --seed)");
}

std::size_t threads_of(const Globals& g) { return g.threads.value_or(1); }

void write_manifest(const Globals& g, const std::string& command, const json& body, std::uint64_t seed,
                    const std::vector<std::string>& outputs) {
  json m = {{"command", command},
            {"config", body},
            {"seed", seed},
            {"threads", threads_of(g)},
            {"outputs", outputs},
            {"status", "ok"}};
  write_file(fs::path(g.out_dir) / "manifest.json", m.dump(2) + "\n");
}

int run_experiment(const Globals& g, const std::string& command, std::optional<harness::ExperimentKind> kind) {
  json doc = load_json(g.config);
  if (doc.contains("spec")) doc = doc.at("spec");
  schema::require_valid(doc, "experiment");
  if (kind) {
    const auto name = harness::to_string(*kind);
    if (doc.contains("kind") && doc.at("kind") != name)
      throw ConfigError(command + " runs " + name + " experiments, config says " + doc.at("kind").dump());
    doc["kind"] = name;
  } else if (!doc.contains("kind")) {
    throw ConfigError("experiment config needs a 'kind'");
  }
  if (g.seed) doc["seed"] = *g.seed;
  if (g.threads) doc["threads"] = *g.threads;
  doc["out_dir"] = g.out_dir;
  if (!doc.contains("id")) doc["id"] = command;
  const auto spec = harness::spec_from_json(doc);
  const auto result = harness::run(spec);
  std::cout << spec.id << ": " << result.rows.size() << " rows";
  for (const auto& f : result.files) std::cout << "\n  " << (fs::path(spec.out_dir) / f).string();
  std::cout << '\n';
  return 0;
}

int gen_envs(const Globals& g) {
  const json body = load_json(g.config);
  schema::require_valid(body, "gen-envs");
  auto cfg = tabular::config_from_json(body.at("family"));
  cfg.seed = resolve_seed(g, body);
  const auto envs = tabular::sample_env_family(cfg);
  write_file(fs::path(g.out_dir) / "envs.json", tabular::family_to_json(cfg, envs).dump() + "\n");
  write_manifest(g, "gen-envs", body, cfg.seed, {"envs.json"});
  std::cout << envs.size() << " environments -> " << (fs::path(g.out_dir) / "envs.json").string() << '\n';
  return 0;
}

int build_dataset(const Globals& g) {
  const json body = load_json(g.config);
  schema::require_valid(body, "build-dataset");
  const auto spec = cartpole::spec_from_json(body.at("dataset"));
  const auto seed = resolve_seed(g, body);
  const auto ds = cartpole::build_dataset(spec, seed, threads_of(g));
  const std::string name = spec.name + ".ds";
  fs::create_directories(g.out_dir);
  cartpole::save_dataset(ds, (fs::path(g.out_dir) / name).string());
  write_manifest(g, "build-dataset", body, seed, {name});
  std::cout << ds.trajectories.size() << " trajectories -> " << (fs::path(g.out_dir) / name).string() << '\n';
  return 0;
}

int fit_models(const Globals& g) {
  const json body = load_json(g.config);
  schema::require_valid(body, "fit-models");
  const auto envs = tabular::family_from_json(load_json(body.at("family_file").get<std::string>()));
  bounds::BoundConfig cfg;
  cfg.T_grid = {1};
  cfg.fit_samples = body.value("fit_samples", cfg.fit_samples);
  cfg.model_smoothing = body.value("model_smoothing", cfg.model_smoothing);
  cfg.seed = resolve_seed(g, body);
  cfg.threads = threads_of(g);
  const auto fitted = bounds::fit_family(envs, cfg);
  json models = json::array();
  for (const auto& m : fitted.models) models.push_back(estimators::model_to_json(m));
  const auto& st = fitted.stats;
  json out = {{"models", models},
              {"divergence",
               {{"n_models", st.n_models},
                {"delta", st.delta},
                {"kappa", st.kappa},
                {"alpha", st.alpha},
                {"degenerate", st.degenerate},
                {"min_pairwise_delta", st.min_offdiag_delta()}}}};
  write_file(fs::path(g.out_dir) / "models.json", out.dump() + "\n");
  write_manifest(g, "fit-models", body, cfg.seed, {"models.json"});
  std::cout << fitted.models.size() << " models, min pairwise delta " << format_double(st.min_offdiag_delta())
            << '\n';
  return 0;
}

int train_model(const Globals& g) {
  const json body = load_json(g.config);
  schema::require_valid(body, "train");
  const auto seed = resolve_seed(g, body);
  cartpole::Dataset ds;
  if (body.contains("dataset_file")) {
    ds = cartpole::load_dataset(body.at("dataset_file").get<std::string>());
  } else if (body.contains("dataset")) {
    ds = cartpole::build_dataset(cartpole::spec_from_json(body.at("dataset")),
                                 derive_seed(seed, {stream_tag("train-set")}), threads_of(g));
  } else {
    throw ConfigError("train: give 'dataset' or 'dataset_file'");
  }
  const auto model_cfg = seqmodel::config_from_json(body.value("model", json::object()));
  const auto loss = seqmodel::loss_from_json(body.value("loss", json::object()));
  auto tc = seqmodel::train_config_from_json(body.value("train", json::object()));
  tc.seed = derive_seed(seed, {stream_tag("train")});
  const cartpole::Dataset* sets[] = {&ds};
  const auto norm = seqmodel::fit_normalizer(sets);
  seqmodel::GsaModel model(model_cfg, derive_seed(seed, {stream_tag("model")}));
  const auto result = seqmodel::train(model, ds, norm, loss, tc, [&](const seqmodel::EpochStats& e) {
    std::cerr << "epoch " << e.epoch << "/" << tc.epochs << " loss " << format_double(e.mean.total) << '\n';
  });
  seqmodel::CheckpointMeta meta;
  meta.loss = loss;
  meta.normalizer = norm;
  meta.step = result.steps;
  meta.extra = {{"dataset", ds.spec.name}};
  fs::create_directories(g.out_dir);
  seqmodel::save_checkpoint((fs::path(g.out_dir) / "model.ckpt").string(), model, meta);
  std::vector<harness::ReportRow> rows;
  for (const auto& e : result.curve) {
    rows.push_back({"train", seed, ds.spec.name, 0, std::nullopt, "train_loss", e.mean.total, e.epoch, ""});
    rows.push_back(
        {"train", seed, ds.spec.name, 0, std::nullopt, "train_reconstruction", e.mean.reconstruction, e.epoch, ""});
  }
  harness::emit_reports(rows, g.out_dir, "train_curve");
  write_manifest(g, "train", body, seed, {"model.ckpt", "train_curve.csv", "train_curve.json"});
  std::cout << "checkpoint -> " << (fs::path(g.out_dir) / "model.ckpt").string() << '\n';
  return 0;
}

int eval_icl(const Globals& g) {
  const json body = load_json(g.config);
  schema::require_valid(body, "eval-icl");
  const auto seed = resolve_seed(g, body);
  const auto path = body.at("checkpoint").get<std::string>();
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  seqmodel::CheckpointMeta meta;
  auto model = seqmodel::load_checkpoint(path, &meta);
  seqmodel::IclEvalConfig ec;
  if (body.contains("eval")) {
    const auto& e = body.at("eval");
    ec.T_grid = e.value("T_grid", ec.T_grid);
    ec.k_list = e.value("k_list", ec.k_list);
    ec.n_anchors = e.value("n_anchors", ec.n_anchors);
  }
  seqmodel::ModelForecaster f(model);
  const std::string label = fs::path(path).stem().string();
  std::vector<harness::ReportRow> rows;
  const auto& sets = body.at("eval_sets");
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto spec = cartpole::spec_from_json(sets[i]);
    const auto ds = cartpole::build_dataset(spec, derive_seed(seed, {stream_tag("eval-set"), i}), threads_of(g));
    std::size_t skipped = 0;
    const auto errs = seqmodel::evaluate_icl(f, ds, meta.normalizer, ec, &skipped);
    if (skipped) std::cerr << "warning: " << skipped << " short trajectories skipped in " << spec.name << '\n';
    for (const auto& s : harness::summarize_icl(errs, label, spec.name, false)) {
      const std::string id = label + "/" + s.eval_set;
      rows.push_back({"eval-icl", seed, id, s.T, s.k, "mean_error", s.mean_error, 0, "unseen"});
      rows.push_back({"eval-icl", seed, id, s.T, s.k, "median_env_error", s.median_error, 0, "unseen"});
    }
  }
  harness::emit_reports(rows, g.out_dir, "report");
  write_manifest(g, "eval-icl", body, seed, {"report.csv", "report.json"});
  std::cout << rows.size() << " rows -> " << (fs::path(g.out_dir) / "report.csv").string() << '\n';
  return 0;
}

int merge_reports(const Globals& g) {
  const json body = load_json(g.config);
  schema::require_valid(body, "report");
  std::vector<harness::ReportRow> rows;
  for (const auto& p : body.at("inputs")) {
    std::ifstream in(p.get<std::string>());
    if (!in) throw ConfigError("cannot open report: " + p.get<std::string>());
    auto part = harness::read_rows_csv(in);
    rows.insert(rows.end(), part.begin(), part.end());
  }
  const auto stem = body.value("stem", std::string("merged"));
  const auto files = harness::emit_reports(rows, g.out_dir, stem);
  std::cout << rows.size() << " rows -> " << files.front() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toolkit for in-context world model experiments"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config (see schemas/config.schema.json)");
  app.add_option("--seed", g.seed, "Base seed; overrides the config");
  app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);

  using harness::ExperimentKind;
  std::function<int()> action;
  auto sub = [&](const char* name, const char* help, std::function<int()> fn) {
    app.add_subcommand(name, help)->callback([&action, fn] { action = fn; });
  };
  sub("gen-envs", "Sample a tabular environment family", [&] { return gen_envs(g); });
  sub("build-dataset", "Collect a cart-pole trajectory dataset", [&] { return build_dataset(g); });
  sub("fit-models", "Fit count-based models to a family file", [&] { return fit_models(g); });
  sub("verify-bounds", "Monte Carlo check of the error bounds",
      [&] { return run_experiment(g, "verify-bounds", ExperimentKind::kBoundVerify); });
  sub("crossover", "EL versus ER crossover sweep",
      [&] { return run_experiment(g, "crossover", ExperimentKind::kCrossover); });
  sub("train", "Train one sequence world model", [&] { return train_model(g); });
  sub("eval-icl", "Error versus context length for a checkpoint", [&] { return eval_icl(g); });
  sub("probe-pc", "Predictive-coding probe",
      [&] { return run_experiment(g, "probe-pc", ExperimentKind::kProbePredictiveCoding); });
  sub("probe-silhouette", "Memory clustering probe",
      [&] { return run_experiment(g, "probe-silhouette", ExperimentKind::kProbeSilhouette); });
  sub("report", "Merge report CSVs", [&] { return merge_reports(g); });
  sub("run", "Run any experiment spec or rerun a manifest",
      [&] { return run_experiment(g, "run", std::nullopt); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    return action();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const InsufficientDataError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
