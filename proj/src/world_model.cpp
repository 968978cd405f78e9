#include "icwm/world_model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "icwm/common.hpp"

namespace icwm::seqmodel {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'I', 'C', 'W', 'M', 'C', 'K', 'P', '1'};
constexpr double kLnEps = 1e-5;

Mat uniform_init(std::size_t rows, std::size_t cols, double bound, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-bound, bound);
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Parameter weight(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(in));
  return Parameter(name, uniform_init(in, out, bound, derive_seed(seed, {stream_tag(name)})));
}

Parameter bias(const std::string& name, std::size_t in, std::size_t out, std::uint64_t seed) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return Parameter(name, uniform_init(1, out, bound, derive_seed(seed, {stream_tag(name)})));
}

Parameter constant_row(const std::string& name, std::size_t n, double v) {
  return Parameter(name, Mat::Constant(1, static_cast<Eigen::Index>(n), v));
}

std::vector<std::size_t> input_rows(std::size_t batch, std::size_t T, std::size_t offset) {
  std::vector<std::size_t> idx;
  idx.reserve(batch * T);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < T; ++t) idx.push_back(b * (T + 1) + t + offset);
  return idx;
}

}  // namespace

GsaConfig GsaConfig::full_scale() {
  GsaConfig c;
  c.D = 128;
  c.L = 4;
  c.heads = 4;
  c.mem_len = 64;
  return c;
}

gsa::GsaShape GsaConfig::shape() const {
  gsa::GsaShape s;
  s.heads = heads;
  s.head_dim = heads ? D / heads : 0;
  s.slots = mem_len;
  s.chunk = chunk;
  s.gate_floor = gate_floor;
  return s;
}

void GsaConfig::validate() const {
  if (D == 0 || L == 0 || heads == 0 || mem_len == 0 || chunk == 0 || obs_dim == 0 || n_actions == 0)
    throw ConfigError("model config: all sizes must be positive");
  if (D % heads != 0) throw ConfigError("model config: D must be divisible by heads");
  if (!(fixed_sigma_hat > 0.0)) throw ConfigError("model config: fixed_sigma_hat must be positive");
  shape().validate();
}

void LossConfig::validate() const {
  if (!(lambda_kl >= 0.0) || !(transition_weight >= 0.0)) throw ConfigError("loss config: weights must be nonnegative");
}

Normalizer Normalizer::identity(std::size_t dim) { return {std::vector<double>(dim, 0.0), std::vector<double>(dim, 1.0)}; }

Mat Normalizer::apply(const Mat& raw) const {
  ICWM_REQUIRE(static_cast<std::size_t>(raw.cols()) == mean.size(), "normalizer: width mismatch");
  Mat out(raw.rows(), raw.cols());
  for (Eigen::Index j = 0; j < raw.cols(); ++j)
    out.col(j) = (raw.col(j).array() - mean[static_cast<std::size_t>(j)]) / std[static_cast<std::size_t>(j)];
  return out;
}

GsaState GsaState::zeros(const GsaConfig& cfg, std::size_t batch) {
  GsaState s;
  s.layers.assign(cfg.L, std::vector<gsa::SlotMemory>(batch, gsa::SlotMemory::zeros(cfg.shape())));
  return s;
}

std::size_t GsaState::size() const {
  std::size_t n = 0;
  for (const auto& l : layers)
    for (const auto& m : l) n += m.size();
  return n;
}

GsaModel::GsaModel(const GsaConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t D = cfg.D, O = cfg.obs_dim, G = cfg.heads * cfg.mem_len;
  enc_w_ = weight("enc.w", O, D, seed);
  enc_b_ = bias("enc.b", O, D, seed);
  enc_sw_ = weight("enc.sigma_w", O, D, seed);
  enc_sb_ = bias("enc.sigma_b", O, D, seed);
  act_emb_ = Parameter("act.emb", uniform_init(cfg.n_actions, D, 1.0, derive_seed(seed, {stream_tag("act.emb")})));
  act_w_ = weight("act.w", D, D, seed);
  act_b_ = bias("act.b", D, D, seed);
  for (std::size_t l = 0; l < cfg.L; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer ly;
    ly.ln1_g = constant_row(p + "ln1.g", D, 1.0);
    ly.ln1_b = constant_row(p + "ln1.b", D, 0.0);
    ly.wq = weight(p + "wq", D, D, seed);
    ly.wk = weight(p + "wk", D, D, seed);
    ly.wv = weight(p + "wv", D, D, seed);
    ly.wg = weight(p + "wg", D, G, seed, 0.1);
    // Slot forget biases spread from fast (alpha ~ 0.5) to slow (alpha ~ 0.9975).
    ly.bg = Parameter(p + "bg", Mat::Zero(1, static_cast<Eigen::Index>(G)));
    for (std::size_t h = 0; h < cfg.heads; ++h)
      for (std::size_t j = 0; j < cfg.mem_len; ++j)
        ly.bg.value(0, static_cast<Eigen::Index>(h * cfg.mem_len + j)) =
            cfg.mem_len > 1 ? 6.0 * static_cast<double>(j) / static_cast<double>(cfg.mem_len - 1) : 3.0;
    ly.wo = weight(p + "wo", D, D, seed);
    ly.bo = constant_row(p + "bo", D, 0.0);
    ly.ln2_g = constant_row(p + "ln2.g", D, 1.0);
    ly.ln2_b = constant_row(p + "ln2.b", D, 0.0);
    ly.w1 = weight(p + "ffn.w1", D, D, seed);
    ly.b1 = bias(p + "ffn.b1", D, D, seed);
    ly.w2 = weight(p + "ffn.w2", D, D, seed);
    ly.b2 = constant_row(p + "ffn.b2", D, 0.0);
    layers_.push_back(std::move(ly));
  }
  dec_ln_g_ = constant_row("dec.ln.g", D, 1.0);
  dec_ln_b_ = constant_row("dec.ln.b", D, 0.0);
  dec_w1_ = weight("dec.w1", D, D, seed);
  dec_b1_ = bias("dec.b1", D, D, seed);
  dec_w2_ = weight("dec.w2", D, D, seed);
  dec_b2_ = constant_row("dec.b2", D, 0.0);
  dec_sw_ = weight("dec.sigma_w", D, D, seed);
  dec_sb_ = constant_row("dec.sigma_b", D, 0.5);
  out_w_ = weight("out.w", D, O, seed);
  out_b_ = constant_row("out.b", O, 0.0);
}

std::vector<Parameter*> GsaModel::parameters() {
  std::vector<Parameter*> p{&enc_w_, &enc_b_, &enc_sw_, &enc_sb_, &act_emb_, &act_w_, &act_b_};
  for (auto& l : layers_)
    for (Parameter* q : {&l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wg, &l.bg, &l.wo, &l.bo, &l.ln2_g, &l.ln2_b,
                         &l.w1, &l.b1, &l.w2, &l.b2})
      p.push_back(q);
  for (Parameter* q : {&dec_ln_g_, &dec_ln_b_, &dec_w1_, &dec_b1_, &dec_w2_, &dec_b2_, &dec_sw_, &dec_sb_, &out_w_, &out_b_})
    p.push_back(q);
  return p;
}

std::vector<const Parameter*> GsaModel::parameters() const {
  auto mut = const_cast<GsaModel*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t GsaModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->size();
  return n;
}

void GsaModel::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

std::pair<Var, Var> GsaModel::encode_obs(Graph& g, Var obs) {
  ICWM_REQUIRE(static_cast<std::size_t>(g.value(obs).cols()) == cfg_.obs_dim, "encode_obs: width mismatch");
  auto s = g.linear(obs, g.param(enc_w_), g.param(enc_b_));
  auto sigma = g.softplus(g.linear(obs, g.param(enc_sw_), g.param(enc_sb_)));
  return {s, sigma};
}

Var GsaModel::encode_action(Graph& g, std::span<const std::size_t> actions) {
  for (auto a : actions) ICWM_REQUIRE(a < cfg_.n_actions, "encode_action: action out of range");
  auto e = g.gather_rows(g.param(act_emb_), actions);
  return g.silu(g.linear(e, g.param(act_w_), g.param(act_b_)));
}

std::pair<Var, Var> GsaModel::decode_latent_impl(Graph& g, Var h) {
  auto y = g.layer_norm(h, g.param(dec_ln_g_), g.param(dec_ln_b_), kLnEps);
  auto u = g.silu(g.linear(y, g.param(dec_w1_), g.param(dec_b1_)));
  auto s_hat = g.add(h, g.linear(u, g.param(dec_w2_), g.param(dec_b2_)));
  Var sigma;
  if (cfg_.train_sigma_hat) {
    sigma = g.softplus(g.linear(h, g.param(dec_sw_), g.param(dec_sb_)));
  } else {
    sigma = g.constant(Mat::Constant(g.value(h).rows(), g.value(h).cols(), cfg_.fixed_sigma_hat));
  }
  return {s_hat, sigma};
}

std::pair<Var, Var> GsaModel::decode_latent(Graph& g, Var h) { return decode_latent_impl(g, h); }

Var GsaModel::decode_obs(Graph& g, Var s_hat) {
  ICWM_REQUIRE(static_cast<std::size_t>(g.value(s_hat).cols()) == cfg_.D, "decode_obs: width mismatch");
  return g.linear(s_hat, g.param(out_w_), g.param(out_b_));
}

Var GsaModel::layer_forward(Graph& g, Layer& ly, Var x, std::size_t batch, GsaState* state, std::size_t index) {
  auto y = g.layer_norm(x, g.param(ly.ln1_g), g.param(ly.ln1_b), kLnEps);
  auto q = g.matmul(y, g.param(ly.wq));
  auto k = g.matmul(y, g.param(ly.wk));
  auto v = g.matmul(y, g.param(ly.wv));
  auto gate = g.linear(y, g.param(ly.wg), g.param(ly.bg));
  Var o;
  if (state) {
    ICWM_REQUIRE(!g.recording(), "temporal_step: recurrent path is inference-only");
    o = g.constant(gsa::recurrent_step(g.value(q), g.value(k), g.value(v), g.value(gate), state->layers[index],
                                       cfg_.shape()));
  } else {
    o = gsa::attention(g, q, k, v, gate, batch, cfg_.shape());
  }
  x = g.add(x, g.linear(o, g.param(ly.wo), g.param(ly.bo)));
  auto y2 = g.layer_norm(x, g.param(ly.ln2_g), g.param(ly.ln2_b), kLnEps);
  auto f = g.linear(g.silu(g.linear(y2, g.param(ly.w1), g.param(ly.b1))), g.param(ly.w2), g.param(ly.b2));
  return g.add(x, f);
}

Var GsaModel::temporal(Graph& g, Var tokens, std::size_t batch) {
  Var x = tokens;
  for (std::size_t l = 0; l < layers_.size(); ++l) x = layer_forward(g, layers_[l], x, batch, nullptr, l);
  return x;
}

Var GsaModel::temporal_step(Graph& g, Var tokens, GsaState& state) {
  ICWM_REQUIRE(state.layers.size() == layers_.size(), "temporal_step: state layer count mismatch");
  ICWM_REQUIRE(state.batch() == static_cast<std::size_t>(g.value(tokens).rows()), "temporal_step: batch mismatch");
  Var x = tokens;
  for (std::size_t l = 0; l < layers_.size(); ++l) x = layer_forward(g, layers_[l], x, 0, &state, l);
  return x;
}

Var GsaModel::loss(Graph& g, const SequenceBatch& sb, const LossConfig& lc, LossBreakdown* parts) {
  const std::size_t B = sb.batch, T = sb.T;
  ICWM_REQUIRE(B > 0 && T > 0, "loss: empty batch");
  ICWM_REQUIRE(static_cast<std::size_t>(sb.obs.rows()) == B * (T + 1), "loss: obs rows must be batch*(T+1)");
  ICWM_REQUIRE(sb.actions.size() == B * T, "loss: actions must be batch*T");
  ICWM_REQUIRE(sb.obs.allFinite(), "loss: non-finite observations");
  const auto in_idx = input_rows(B, T, 0);
  const auto tgt_idx = input_rows(B, T, 1);

  auto obs = g.constant(sb.obs);
  auto [s_all, sig_all] = encode_obs(g, obs);
  Var s_in = g.gather_rows(s_all, in_idx);

  std::vector<char> mask(B * T, 0);
  bool any = false;
  if (!sb.mask.empty()) {
    ICWM_REQUIRE(sb.mask.size() == B * T, "loss: mask must be batch*T");
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t t = 1; t < T; ++t) {
        mask[b * T + t] = sb.mask[b * T + t];
        any = any || mask[b * T + t];
      }
  }
  if (any) {
    Graph g1(false);
    auto [s1, sig1] = encode_obs(g1, g1.constant(sb.obs));
    (void)sig1;
    auto tok1 = g1.add(g1.gather_rows(s1, in_idx), encode_action(g1, sb.actions));
    auto [s_hat1, sh1] = decode_latent_impl(g1, temporal(g1, tok1, B));
    (void)sh1;
    const Mat& pred = g1.value(s_hat1);
    Mat rep = Mat::Zero(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(cfg_.D));
    for (std::size_t i = 0; i < B * T; ++i)
      if (mask[i]) rep.row(static_cast<Eigen::Index>(i)) = pred.row(static_cast<Eigen::Index>(i - 1));
    s_in = g.select_rows(s_in, g.constant(std::move(rep)), mask);
  }

  auto tokens = g.add(s_in, encode_action(g, sb.actions));
  auto h = temporal(g, tokens, B);
  auto [s_hat, sig_hat] = decode_latent_impl(g, h);
  auto o_hat = decode_obs(g, s_hat);

  Mat target(static_cast<Eigen::Index>(B * T), sb.obs.cols());
  for (std::size_t i = 0; i < tgt_idx.size(); ++i)
    target.row(static_cast<Eigen::Index>(i)) = sb.obs.row(static_cast<Eigen::Index>(tgt_idx[i]));
  auto rec = g.mse(o_hat, target);
  auto lat = g.standard_normal_kl(s_all, sig_all);
  auto tr = g.gaussian_kl(g.gather_rows(s_all, tgt_idx), g.gather_rows(sig_all, tgt_idx), s_hat, sig_hat);
  auto total = g.add(g.add(rec, g.scale(lat, lc.lambda_kl)), g.scale(tr, lc.transition_weight));
  if (parts) {
    parts->reconstruction = g.value(rec)(0, 0);
    parts->latent_kl = g.value(lat)(0, 0);
    parts->transition_kl = g.value(tr)(0, 0);
    parts->total = g.value(total)(0, 0);
  }
  if (!std::isfinite(g.value(total)(0, 0))) throw NumericalError("loss is not finite");
  return total;
}

Mat GsaModel::encode_mean(const Mat& obs) {
  Graph g(false);
  return g.value(encode_obs(g, g.constant(obs)).first);
}

Mat GsaModel::decode_observation(const Mat& s_hat) {
  Graph g(false);
  return g.value(decode_obs(g, g.constant(s_hat)));
}

StepOutput GsaModel::from_hidden(const Mat& hm) {
  Graph g(false);
  auto h = g.constant(hm);
  auto [s_hat, sig] = decode_latent_impl(g, h);
  auto o_hat = decode_obs(g, s_hat);
  return {hm, g.value(s_hat), g.value(sig), g.value(o_hat)};
}

StepOutput GsaModel::step(GsaState& state, const Mat& latent_in, std::span<const std::size_t> actions) {
  ICWM_REQUIRE(static_cast<std::size_t>(latent_in.rows()) == actions.size(), "step: batch mismatch");
  ICWM_REQUIRE(latent_in.allFinite(), "step: non-finite latent input");
  Graph g(false);
  auto tokens = g.add(g.constant(latent_in), encode_action(g, actions));
  auto h = temporal_step(g, tokens, state);
  return from_hidden(g.value(h));
}

StepOutput GsaModel::empty_prediction(std::size_t batch) {
  return from_hidden(Mat::Zero(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(cfg_.D)));
}

Mat GsaModel::forward_chunkwise(const Mat& latent_in, std::span<const std::size_t> actions, std::size_t batch) {
  Graph g(false);
  auto tokens = g.add(g.constant(latent_in), encode_action(g, actions));
  return g.value(temporal(g, tokens, batch));
}

nlohmann::json config_to_json(const GsaConfig& c) {
  return {{"D", c.D},
          {"L", c.L},
          {"heads", c.heads},
          {"mem_len", c.mem_len},
          {"chunk", c.chunk},
          {"obs_dim", c.obs_dim},
          {"n_actions", c.n_actions},
          {"gate_floor", c.gate_floor},
          {"train_sigma_hat", c.train_sigma_hat},
          {"fixed_sigma_hat", c.fixed_sigma_hat}};
}

GsaConfig config_from_json(const nlohmann::json& doc) {
  try {
    GsaConfig c;
    c.D = doc.value("D", c.D);
    c.L = doc.value("L", c.L);
    c.heads = doc.value("heads", c.heads);
    c.mem_len = doc.value("mem_len", c.mem_len);
    c.chunk = doc.value("chunk", c.chunk);
    c.obs_dim = doc.value("obs_dim", c.obs_dim);
    c.n_actions = doc.value("n_actions", c.n_actions);
    c.gate_floor = doc.value("gate_floor", c.gate_floor);
    c.train_sigma_hat = doc.value("train_sigma_hat", c.train_sigma_hat);
    c.fixed_sigma_hat = doc.value("fixed_sigma_hat", c.fixed_sigma_hat);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

nlohmann::json loss_to_json(const LossConfig& c) {
  return {{"lambda_kl", c.lambda_kl}, {"transition_weight", c.transition_weight}};
}

LossConfig loss_from_json(const nlohmann::json& doc) {
  LossConfig c;
  c.lambda_kl = doc.value("lambda_kl", c.lambda_kl);
  c.transition_weight = doc.value("transition_weight", c.transition_weight);
  c.validate();
  return c;
}

nlohmann::json normalizer_to_json(const Normalizer& n) { return {{"mean", n.mean}, {"std", n.std}}; }

Normalizer normalizer_from_json(const nlohmann::json& doc) {
  Normalizer n{doc.at("mean").get<std::vector<double>>(), doc.at("std").get<std::vector<double>>()};
  if (n.mean.size() != n.std.size()) throw ConfigError("normalizer: mean/std size mismatch");
  for (double s : n.std)
    if (!(s > 0.0)) throw ConfigError("normalizer: std must be positive");
  return n;
}

void round_to_float(GsaModel& model) {
  for (auto* p : model.parameters())
    for (Eigen::Index i = 0; i < p->value.size(); ++i)
      p->value.data()[i] = static_cast<double>(static_cast<float>(p->value.data()[i]));
}

void save_checkpoint(const std::string& path, const GsaModel& model, const CheckpointMeta& meta) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto* p : model.parameters())
    params.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  const nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                                 {"config", config_to_json(model.config())},
                                 {"loss", loss_to_json(meta.loss)},
                                 {"normalizer", normalizer_to_json(meta.normalizer)},
                                 {"step", meta.step},
                                 {"rng_state", meta.rng_state},
                                 {"extra", meta.extra},
                                 {"params", params}};
  const std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t n = h.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  std::vector<float> buf;
  for (const auto* p : model.parameters()) {
    buf.resize(p->size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(p->value.data()[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw ConfigError("checkpoint write failed: " + path);
}

GsaModel load_checkpoint(const std::string& path, CheckpointMeta* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw ConfigError("checkpoint: bad magic");
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::string h(n, '\0');
  in.read(h.data(), static_cast<std::streamsize>(n));
  if (!in) throw ConfigError("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(h);
  if (header.at("format_version").get<int>() != kCheckpointFormatVersion)
    throw ConfigError("checkpoint: unsupported format version");
  GsaModel model(config_from_json(header.at("config")), 0);
  const auto& specs = header.at("params");
  auto params = model.parameters();
  if (specs.size() != params.size()) throw ConfigError("checkpoint: parameter count mismatch");
  std::vector<float> buf;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    if (specs[k].at("name").get<std::string>() != p->name ||
        specs[k].at("rows").get<Eigen::Index>() != p->value.rows() ||
        specs[k].at("cols").get<Eigen::Index>() != p->value.cols())
      throw ConfigError("checkpoint: parameter layout mismatch at " + p->name);
    buf.resize(p->size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw ConfigError("checkpoint: truncated parameter " + p->name);
    for (std::size_t i = 0; i < buf.size(); ++i) p->value.data()[i] = buf[i];
  }
  if (meta) {
    meta->loss = loss_from_json(header.at("loss"));
    meta->normalizer = normalizer_from_json(header.at("normalizer"));
    meta->step = header.at("step").get<std::uint64_t>();
    meta->rng_state = header.at("rng_state").get<std::string>();
    meta->extra = header.at("extra");
  }
  return model;
}

}  // namespace icwm::seqmodel
