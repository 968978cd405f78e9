#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icwm/cartpole_env.hpp"
#include "icwm/training.hpp"

namespace icwm::harness {

enum class ExperimentKind { kBoundVerify, kCrossover, kCartpoleIcl, kProbePredictiveCoding, kProbeSilhouette };

std::string to_string(ExperimentKind kind);
ExperimentKind kind_from_string(const std::string& name);

struct ExperimentSpec {
  std::string id = "experiment";
  ExperimentKind kind = ExperimentKind::kBoundVerify;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out_dir = "out";
  nlohmann::json config = nlohmann::json::object();  // kind-specific body
};

/// Accepts a bare spec or a manifest (which embeds the spec under "spec").
/// Throws ConfigError on missing or malformed fields.
ExperimentSpec spec_from_json(const nlohmann::json& doc);
nlohmann::json spec_to_json(const ExperimentSpec& spec);
ExperimentSpec load_spec(const std::string& path);

struct ReportRow {
  std::string experiment_id;
  std::uint64_t seed = 0;
  std::string model;
  std::size_t T = 0;
  std::optional<std::size_t> k;
  std::string metric;
  double value = 0.0;
  std::size_t trial = 0;
  std::string split;  // "seen", "unseen" or empty

  bool operator==(const ReportRow&) const = default;
};

inline constexpr const char* kReportHeader = "experiment_id,seed,model,T,k,metric,value,trial,split";

void write_rows_csv(const std::vector<ReportRow>& rows, std::ostream& out);
std::vector<ReportRow> read_rows_csv(std::istream& in);

/// Writes <stem>.csv and <stem>.json (row count plus per-metric means) under
/// dir. Returns the written paths. Throws ConfigError if unwritable.
std::vector<std::string> emit_reports(const std::vector<ReportRow>& rows, const std::string& dir,
                                      const std::string& stem);

struct RunResult {
  std::vector<std::string> files;  // relative to out_dir
  std::vector<ReportRow> rows;
  nlohmann::json summary;
  nlohmann::json manifest;
};

/// Runs the experiment, writes its reports and a manifest.json into
/// spec.out_dir. Non-finite results abort with a partial manifest.
RunResult run(const ExperimentSpec& spec);

// Cart-pole experiment pieces, exposed for the CLI and tests.

struct IclExperimentConfig {
  std::vector<cartpole::DatasetSpec> train_sets;
  seqmodel::GsaConfig model;
  seqmodel::LossConfig loss;
  seqmodel::TrainConfig train;
  seqmodel::IclEvalConfig eval;
  std::size_t eval_envs = 64;
  std::size_t eval_traj_per_env = 4;
  std::size_t eval_length = 200;
  double early_fraction = 0.1;
  std::string early_from = "4-Envs";  // dataset whose early checkpoint is also scored
  std::vector<cartpole::Scope> unseen_scopes{cartpole::Scope::kScope1, cartpole::Scope::kScope1Plus2Excl1};

  void validate() const;
};

IclExperimentConfig icl_config_from_json(const nlohmann::json& doc);
nlohmann::json icl_config_to_json(const IclExperimentConfig& c);
/// Desk-scale defaults: 1-Env, 4-Envs and many-Envs sets with equal budgets.
IclExperimentConfig default_icl_config();

/// Fresh trajectories from up to `max_envs` of the training environments of
/// `train`, drawn with new seeds.
cartpole::Dataset seen_eval_set(const cartpole::Dataset& train, std::size_t max_envs, std::size_t traj_per_env,
                                std::size_t length, std::uint64_t seed);

struct IclSummaryRow {
  std::string model;
  std::string eval_set;
  bool seen = false;
  std::size_t T = 0;
  std::size_t k = 0;
  double mean_error = 0.0;    // over trajectories
  double median_error = 0.0;  // over per-environment means
};

/// Aggregates per-trajectory errors into per-(T, k) means and medians.
std::vector<IclSummaryRow> summarize_icl(const std::vector<seqmodel::IclErrorRow>& rows, const std::string& model,
                                         const std::string& eval_set, bool seen);

}  // namespace icwm::harness
