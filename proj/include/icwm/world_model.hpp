#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icwm/autodiff.hpp"
#include "icwm/gsa.hpp"

namespace icwm::seqmodel {

using ad::Graph;
using ad::Mat;
using ad::Parameter;
using ad::Var;

struct GsaConfig {
  std::size_t D = 64;
  std::size_t L = 2;
  std::size_t heads = 4;
  std::size_t mem_len = 32;
  std::size_t chunk = 64;
  std::size_t obs_dim = 4;
  std::size_t n_actions = 2;
  double gate_floor = -10.0;
  bool train_sigma_hat = true;
  double fixed_sigma_hat = 1.0;

  static GsaConfig full_scale();
  gsa::GsaShape shape() const;
  void validate() const;
};

struct LossConfig {
  double lambda_kl = 1e-3;
  double transition_weight = 1.0;
  void validate() const;
};

/// Per-dimension affine standardization of raw observations.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;

  static Normalizer identity(std::size_t dim);
  Mat apply(const Mat& raw) const;
};

/// Recurrent memory for a batch: layers[l][b].
struct GsaState {
  std::vector<std::vector<gsa::SlotMemory>> layers;

  static GsaState zeros(const GsaConfig& cfg, std::size_t batch);
  std::size_t batch() const { return layers.empty() ? 0 : layers[0].size(); }
  std::size_t size() const;
};

struct StepOutput {
  Mat h, s_hat, sigma_hat, o_hat;
};

struct LossBreakdown {
  double total = 0.0;
  double reconstruction = 0.0;
  double latent_kl = 0.0;
  double transition_kl = 0.0;
};

/// A batch of equal-length sequences. obs holds (T+1) standardized
/// observations per sequence stacked row-wise; actions holds T per sequence.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t T = 0;
  Mat obs;
  std::vector<std::size_t> actions;
  std::vector<char> mask;  // batch*T; masked inputs take the previous prediction
};

class GsaModel {
 public:
  struct Layer {
    Parameter ln1_g, ln1_b, wq, wk, wv, wg, bg, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  GsaModel(const GsaConfig& cfg, std::uint64_t seed);
  GsaModel(const GsaModel&) = delete;
  GsaModel& operator=(const GsaModel&) = delete;
  GsaModel(GsaModel&&) = default;

  const GsaConfig& config() const { return cfg_; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  // Graph-level building blocks.
  std::pair<Var, Var> encode_obs(Graph& g, Var obs);
  Var encode_action(Graph& g, std::span<const std::size_t> actions);
  std::pair<Var, Var> decode_latent(Graph& g, Var h);
  Var decode_obs(Graph& g, Var s_hat);
  /// Chunkwise temporal core over `batch` stacked sequences of input tokens.
  Var temporal(Graph& g, Var tokens, std::size_t batch);
  /// Recurrent temporal core for one token per sequence.
  Var temporal_step(Graph& g, Var tokens, GsaState& state);

  /// Full training objective. Masked positions are filled from an unmasked
  /// detached pass. Call graph.backward(result) to populate gradients.
  Var loss(Graph& g, const SequenceBatch& batch, const LossConfig& lc, LossBreakdown* parts = nullptr);

  // Inference helpers (no gradient recording).
  Mat encode_mean(const Mat& obs);
  Mat decode_observation(const Mat& s_hat);
  StepOutput step(GsaState& state, const Mat& latent_in, std::span<const std::size_t> actions);
  /// Prediction made with empty memory (h = 0).
  StepOutput empty_prediction(std::size_t batch);
  StepOutput from_hidden(const Mat& h);
  /// Chunkwise hidden states for given input latents (testing and export).
  Mat forward_chunkwise(const Mat& latent_in, std::span<const std::size_t> actions, std::size_t batch);

 private:
  std::pair<Var, Var> decode_latent_impl(Graph& g, Var h);
  Var layer_forward(Graph& g, Layer& layer, Var x, std::size_t batch, GsaState* state, std::size_t index);

  GsaConfig cfg_;
  Parameter enc_w_, enc_b_, enc_sw_, enc_sb_;
  Parameter act_emb_, act_w_, act_b_;
  std::vector<Layer> layers_;
  Parameter dec_ln_g_, dec_ln_b_, dec_w1_, dec_b1_, dec_w2_, dec_b2_, dec_sw_, dec_sb_;
  Parameter out_w_, out_b_;
};

nlohmann::json config_to_json(const GsaConfig& c);
GsaConfig config_from_json(const nlohmann::json& doc);
nlohmann::json loss_to_json(const LossConfig& c);
LossConfig loss_from_json(const nlohmann::json& doc);
nlohmann::json normalizer_to_json(const Normalizer& n);
Normalizer normalizer_from_json(const nlohmann::json& doc);

struct CheckpointMeta {
  LossConfig loss;
  Normalizer normalizer;
  std::uint64_t step = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Header JSON then parameter blobs in declaration order, 32-bit LE floats.
void save_checkpoint(const std::string& path, const GsaModel& model, const CheckpointMeta& meta);
GsaModel load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr);
/// Rounds every parameter to the nearest 32-bit float.
void round_to_float(GsaModel& model);

}  // namespace icwm::seqmodel
