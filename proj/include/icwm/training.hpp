#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "icwm/cartpole_env.hpp"
#include "icwm/world_model.hpp"

namespace icwm::seqmodel {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, const AdamWConfig& cfg = {});
  void step(double lr);
  std::uint64_t steps() const { return t_; }

 private:
  std::vector<Parameter*> params_;
  AdamWConfig cfg_;
  std::vector<Mat> m_, v_;
  std::uint64_t t_ = 0;
};

/// Cosine interpolation from lr0 (step 0) to lr_final (step total).
double cosine_lr(double lr0, double lr_final, std::size_t step, std::size_t total);

/// Scales all gradients so their joint L2 norm is at most max_norm; returns
/// the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

struct TrainConfig {
  double lr = 1e-3;
  double lr_final = 2.04e-4;
  std::size_t batch = 16;
  std::size_t epochs = 10;
  std::size_t window = 0;  // 0 trains on whole trajectories
  double mask_prob = 0.1;
  double grad_clip = 1.0;
  AdamWConfig adam;
  std::uint64_t seed = 0;
  std::size_t snapshot_epoch = 0;  // keeps parameters after this epoch; 0 disables

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& doc);

struct EpochStats {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown mean;
};

struct TrainResult {
  std::vector<EpochStats> curve;
  std::size_t steps = 0;
  std::vector<Mat> snapshot;  // empty unless snapshot_epoch was reached
};

/// Per-dimension mean and standard deviation over every observation.
Normalizer fit_normalizer(std::span<const cartpole::Dataset* const> datasets);

/// Standardized windows [start, start+T] of the given trajectories.
SequenceBatch make_batch(const cartpole::Dataset& ds, std::span<const std::size_t> traj,
                         std::span<const std::size_t> starts, std::size_t T, const Normalizer& norm);

using EpochCallback = std::function<void(const EpochStats&)>;

/// Deterministic under cfg.seed. Throws NumericalError if the loss diverges.
TrainResult train(GsaModel& model, const cartpole::Dataset& ds, const Normalizer& norm, const LossConfig& lc,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

std::vector<Mat> parameter_values(const GsaModel& model);
void set_parameter_values(GsaModel& model, const std::vector<Mat>& values);

/// Produces k-step forecasts of standardized observations.
class Forecaster {
 public:
  virtual ~Forecaster() = default;
  /// context_obs: batch*T rows, context_actions: batch*T, future_actions:
  /// batch*(k-1). Returns batch*k rows; row j of a sequence predicts the
  /// observation j+1 steps after the last context frame.
  virtual Mat forecast(std::size_t batch, std::size_t T, std::size_t k, const Mat& context_obs,
                       std::span<const std::size_t> context_actions, std::span<const std::size_t> future_actions) = 0;
};

/// Recurrent rollout of a GsaModel: predicted latents are fed back with the
/// given actions.
class ModelForecaster : public Forecaster {
 public:
  explicit ModelForecaster(GsaModel& model) : model_(model) {}
  Mat forecast(std::size_t batch, std::size_t T, std::size_t k, const Mat& context_obs,
               std::span<const std::size_t> context_actions, std::span<const std::size_t> future_actions) override;

 private:
  GsaModel& model_;
};

struct IclEvalConfig {
  std::vector<std::size_t> T_grid{1, 2, 5, 10, 20, 50, 100};
  std::vector<std::size_t> k_list{1};
  std::size_t n_anchors = 4;
};

struct IclErrorRow {
  std::size_t traj = 0;
  std::size_t env = 0;
  std::size_t T = 0;
  std::size_t k = 0;
  double error = 0.0;
};

/// Anchor frames E (context = the T frames before E) shared by every T so
/// all context lengths are scored on the same targets.
std::vector<std::size_t> icl_anchors(std::size_t length, const IclEvalConfig& cfg);

/// Standardized k-step error per (trajectory, T, k), averaged over anchors.
/// Trajectories shorter than max T + max k - 1 are skipped.
std::vector<IclErrorRow> evaluate_icl(Forecaster& f, const cartpole::Dataset& ds, const Normalizer& norm,
                                      const IclEvalConfig& cfg, std::size_t* skipped = nullptr);

struct MemoryDump {
  std::size_t layer = 0;
  std::size_t dim = 0;
  std::vector<std::size_t> env, traj, step;
  std::vector<float> values;  // rows of `dim` floats
};

/// Flattened slot memories after every step, one dump per requested layer.
std::vector<MemoryDump> export_memory_states(GsaModel& model, const cartpole::Dataset& ds, const Normalizer& norm,
                                             std::span<const std::size_t> traj, std::span<const std::size_t> layers,
                                             std::size_t max_steps = 0);

}  // namespace icwm::seqmodel
