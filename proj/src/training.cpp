#include "icwm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "icwm/common.hpp"

namespace icwm::seqmodel {

AdamW::AdamW(std::vector<Parameter*> params, const AdamWConfig& cfg) : params_(std::move(params)), cfg_(cfg) {
  for (auto* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    p.value *= 1.0 - lr * cfg_.weight_decay;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * p.grad;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * p.grad.cwiseAbs2();
    p.value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

double cosine_lr(double lr0, double lr_final, std::size_t step, std::size_t total) {
  if (total == 0) return lr0;
  const double x = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return lr_final + 0.5 * (lr0 - lr_final) * (1.0 + std::cos(std::numbers::pi * x));
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const auto* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto* p : params) p->grad *= s;
  }
  return norm;
}

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !(lr_final >= 0.0)) throw ConfigError("train: learning rates must be nonnegative");
  if (batch == 0) throw ConfigError("train: batch must be positive");
  if (!(mask_prob >= 0.0 && mask_prob < 1.0)) throw ConfigError("train: mask_prob must lie in [0, 1)");
  if (!(grad_clip >= 0.0)) throw ConfigError("train: grad_clip must be nonnegative");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0))
    throw ConfigError("train: invalid optimizer settings");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"lr_final", c.lr_final},
          {"batch", c.batch},
          {"epochs", c.epochs},
          {"window", c.window},
          {"mask_prob", c.mask_prob},
          {"grad_clip", c.grad_clip},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"weight_decay", c.adam.weight_decay},
          {"seed", c.seed},
          {"snapshot_epoch", c.snapshot_epoch}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  try {
    TrainConfig c;
    c.lr = doc.value("lr", c.lr);
    c.lr_final = doc.value("lr_final", c.lr_final);
    c.batch = doc.value("batch", c.batch);
    c.epochs = doc.value("epochs", c.epochs);
    c.window = doc.value("window", c.window);
    c.mask_prob = doc.value("mask_prob", c.mask_prob);
    c.grad_clip = doc.value("grad_clip", c.grad_clip);
    c.adam.beta1 = doc.value("beta1", c.adam.beta1);
    c.adam.beta2 = doc.value("beta2", c.adam.beta2);
    c.adam.eps = doc.value("adam_eps", c.adam.eps);
    c.adam.weight_decay = doc.value("weight_decay", c.adam.weight_decay);
    c.seed = doc.value("seed", c.seed);
    c.snapshot_epoch = doc.value("snapshot_epoch", c.snapshot_epoch);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
}

Normalizer fit_normalizer(std::span<const cartpole::Dataset* const> datasets) {
  const std::size_t O = cartpole::kObsDim;
  std::vector<double> sum(O, 0.0), sq(O, 0.0);
  double n = 0.0;
  for (const auto* ds : datasets)
    for (const auto& tr : ds->trajectories)
      for (std::size_t t = 0; t <= tr.length(); ++t) {
        const float* o = tr.obs(t);
        for (std::size_t j = 0; j < O; ++j) {
          sum[j] += o[j];
          sq[j] += static_cast<double>(o[j]) * o[j];
        }
        n += 1.0;
      }
  if (n < 2.0) throw InsufficientDataError("normalizer needs at least two observations");
  Normalizer norm{std::vector<double>(O), std::vector<double>(O)};
  for (std::size_t j = 0; j < O; ++j) {
    norm.mean[j] = sum[j] / n;
    const double var = std::max(0.0, sq[j] / n - norm.mean[j] * norm.mean[j]);
    norm.std[j] = var > 1e-12 ? std::sqrt(var) : 1.0;
  }
  return norm;
}

SequenceBatch make_batch(const cartpole::Dataset& ds, std::span<const std::size_t> traj,
                         std::span<const std::size_t> starts, std::size_t T, const Normalizer& norm) {
  ICWM_REQUIRE(traj.size() == starts.size(), "make_batch: one start per trajectory");
  const std::size_t O = cartpole::kObsDim;
  SequenceBatch sb;
  sb.batch = traj.size();
  sb.T = T;
  Mat raw(static_cast<Eigen::Index>(sb.batch * (T + 1)), static_cast<Eigen::Index>(O));
  sb.actions.reserve(sb.batch * T);
  for (std::size_t b = 0; b < traj.size(); ++b) {
    const auto& tr = ds.trajectories.at(traj[b]);
    ICWM_REQUIRE(starts[b] + T <= tr.length(), "make_batch: window exceeds trajectory");
    for (std::size_t t = 0; t <= T; ++t) {
      const float* o = tr.obs(starts[b] + t);
      for (std::size_t j = 0; j < O; ++j)
        raw(static_cast<Eigen::Index>(b * (T + 1) + t), static_cast<Eigen::Index>(j)) = o[j];
    }
    for (std::size_t t = 0; t < T; ++t) sb.actions.push_back(tr.actions[starts[b] + t]);
  }
  sb.obs = norm.apply(raw);
  return sb;
}

std::vector<Mat> parameter_values(const GsaModel& model) {
  std::vector<Mat> out;
  for (const auto* p : model.parameters()) out.push_back(p->value);
  return out;
}

void set_parameter_values(GsaModel& model, const std::vector<Mat>& values) {
  auto params = model.parameters();
  ICWM_REQUIRE(values.size() == params.size(), "set_parameter_values: count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    ICWM_REQUIRE(values[i].rows() == params[i]->value.rows() && values[i].cols() == params[i]->value.cols(),
                 "set_parameter_values: shape mismatch");
    params[i]->value = values[i];
  }
}

TrainResult train(GsaModel& model, const cartpole::Dataset& ds, const Normalizer& norm, const LossConfig& lc,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  lc.validate();
  const std::size_t n = ds.trajectories.size();
  if (n == 0) throw ConfigError("train: empty dataset");
  std::size_t min_len = ds.trajectories[0].length();
  for (const auto& tr : ds.trajectories) min_len = std::min(min_len, tr.length());
  const std::size_t T = cfg.window == 0 ? min_len : cfg.window;
  if (T == 0 || T > min_len) throw ConfigError("train: window exceeds trajectory length");

  const std::size_t batches = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = batches * cfg.epochs;
  auto params = model.parameters();
  AdamW opt(params, cfg.adam);
  TrainResult result;
  std::vector<std::size_t> order(n);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, {stream_tag("shuffle"), e}));
    std::shuffle(order.begin(), order.end(), shuffle);
    EpochStats stats;
    stats.epoch = e + 1;
    stats.lr = cosine_lr(cfg.lr, cfg.lr_final, result.steps, total);
    for (std::size_t bi = 0; bi < batches; ++bi) {
      const std::size_t lo = bi * cfg.batch, hi = std::min(n, lo + cfg.batch);
      std::span<const std::size_t> ids(order.data() + lo, hi - lo);
      Rng rng(derive_seed(cfg.seed, {stream_tag("batch"), e, bi}));
      std::vector<std::size_t> starts(ids.size(), 0);
      for (std::size_t b = 0; b < ids.size(); ++b) {
        const std::size_t span_len = ds.trajectories[ids[b]].length() - T;
        if (span_len > 0) starts[b] = uniform_index(rng, span_len + 1);
      }
      auto sb = make_batch(ds, ids, starts, T, norm);
      if (cfg.mask_prob > 0.0) {
        sb.mask.assign(sb.batch * T, 0);
        for (std::size_t i = 0; i < sb.mask.size(); ++i)
          sb.mask[i] = (i % T != 0 && uniform01(rng) < cfg.mask_prob) ? 1 : 0;
      }
      model.zero_grad();
      LossBreakdown parts;
      Graph g;
      Var loss;
      try {
        loss = model.loss(g, sb, lc, &parts);
      } catch (const NumericalError& err) {
        throw NumericalError("training diverged at epoch " + std::to_string(e + 1) + " batch " +
                             std::to_string(bi) + ": " + err.what());
      }
      g.backward(loss);
      clip_grad_norm(params, cfg.grad_clip);
      opt.step(cosine_lr(cfg.lr, cfg.lr_final, result.steps, total));
      ++result.steps;
      const double w = static_cast<double>(ids.size()) / static_cast<double>(n);
      stats.mean.total += w * parts.total;
      stats.mean.reconstruction += w * parts.reconstruction;
      stats.mean.latent_kl += w * parts.latent_kl;
      stats.mean.transition_kl += w * parts.transition_kl;
    }
    if (!std::isfinite(stats.mean.total))
      throw NumericalError("training diverged at epoch " + std::to_string(e + 1));
    result.curve.push_back(stats);
    if (cfg.snapshot_epoch == e + 1) result.snapshot = parameter_values(model);
    if (on_epoch) on_epoch(stats);
  }
  return result;
}

Mat ModelForecaster::forecast(std::size_t batch, std::size_t T, std::size_t k, const Mat& context_obs,
                              std::span<const std::size_t> context_actions,
                              std::span<const std::size_t> future_actions) {
  ICWM_REQUIRE(k >= 1, "forecast: k must be positive");
  ICWM_REQUIRE(static_cast<std::size_t>(context_obs.rows()) == batch * T, "forecast: context rows");
  ICWM_REQUIRE(context_actions.size() == batch * T, "forecast: context actions");
  ICWM_REQUIRE(future_actions.size() == batch * (k - 1), "forecast: future actions");
  const auto B = static_cast<Eigen::Index>(batch);
  auto state = GsaState::zeros(model_.config(), batch);
  Mat enc = T > 0 ? model_.encode_mean(context_obs) : Mat();
  StepOutput out = model_.empty_prediction(batch);
  Mat x(B, static_cast<Eigen::Index>(model_.config().D));
  std::vector<std::size_t> a(batch);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t b = 0; b < batch; ++b) {
      x.row(static_cast<Eigen::Index>(b)) = enc.row(static_cast<Eigen::Index>(b * T + t));
      a[b] = context_actions[b * T + t];
    }
    out = model_.step(state, x, a);
  }
  Mat pred(static_cast<Eigen::Index>(batch * k), out.o_hat.cols());
  for (std::size_t j = 0; j < k; ++j) {
    if (j > 0) {
      for (std::size_t b = 0; b < batch; ++b) a[b] = future_actions[b * (k - 1) + j - 1];
      out = model_.step(state, out.s_hat, a);
    }
    for (std::size_t b = 0; b < batch; ++b)
      pred.row(static_cast<Eigen::Index>(b * k + j)) = out.o_hat.row(static_cast<Eigen::Index>(b));
  }
  return pred;
}

std::vector<std::size_t> icl_anchors(std::size_t length, const IclEvalConfig& cfg) {
  ICWM_REQUIRE(!cfg.T_grid.empty() && !cfg.k_list.empty() && cfg.n_anchors > 0, "icl: empty grid");
  const std::size_t max_T = *std::max_element(cfg.T_grid.begin(), cfg.T_grid.end());
  const std::size_t max_k = *std::max_element(cfg.k_list.begin(), cfg.k_list.end());
  ICWM_REQUIRE(max_k >= 1, "icl: k must be positive");
  // Target of step k from anchor E is frame E + k - 1.
  if (max_T + max_k - 1 > length) return {};
  const std::size_t lo = std::max<std::size_t>(max_T, 1), hi = length - max_k + 1;
  std::vector<std::size_t> anchors;
  if (cfg.n_anchors == 1 || hi == lo) {
    anchors.push_back(hi);
  } else {
    for (std::size_t i = 0; i < cfg.n_anchors; ++i)
      anchors.push_back(lo + (hi - lo) * i / (cfg.n_anchors - 1));
    anchors.erase(std::unique(anchors.begin(), anchors.end()), anchors.end());
  }
  return anchors;
}

std::vector<IclErrorRow> evaluate_icl(Forecaster& f, const cartpole::Dataset& ds, const Normalizer& norm,
                                      const IclEvalConfig& cfg, std::size_t* skipped) {
  const std::size_t O = cartpole::kObsDim;
  const std::size_t max_k = *std::max_element(cfg.k_list.begin(), cfg.k_list.end());
  // Trajectories are grouped by length so each group shares its anchors.
  std::vector<std::size_t> usable;
  std::size_t n_skipped = 0;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
    if (icl_anchors(ds.trajectories[i].length(), cfg).empty()) ++n_skipped;
    else usable.push_back(i);
  }
  if (skipped) *skipped = n_skipped;
  std::vector<IclErrorRow> rows;
  std::vector<std::size_t> T_grid = cfg.T_grid;
  std::sort(T_grid.begin(), T_grid.end());
  std::vector<std::size_t> k_list = cfg.k_list;
  std::sort(k_list.begin(), k_list.end());
  // err[traj][T][k] accumulated over anchors.
  std::vector<double> acc(usable.size() * T_grid.size() * k_list.size(), 0.0);
  std::vector<std::size_t> cnt(usable.size(), 0);
  std::size_t lo = 0;
  while (lo < usable.size()) {
    const std::size_t len = ds.trajectories[usable[lo]].length();
    std::size_t hi = lo;
    while (hi < usable.size() && ds.trajectories[usable[hi]].length() == len) ++hi;
    const auto anchors = icl_anchors(len, cfg);
    const std::size_t B = hi - lo;
    for (std::size_t E : anchors) {
      for (std::size_t ti = 0; ti < T_grid.size(); ++ti) {
        const std::size_t T = T_grid[ti];
        Mat raw(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(O));
        std::vector<std::size_t> ca(B * T), fa(B * (max_k - 1));
        for (std::size_t b = 0; b < B; ++b) {
          const auto& tr = ds.trajectories[usable[lo + b]];
          for (std::size_t t = 0; t < T; ++t) {
            const float* o = tr.obs(E - T + t);
            for (std::size_t j = 0; j < O; ++j)
              raw(static_cast<Eigen::Index>(b * T + t), static_cast<Eigen::Index>(j)) = o[j];
            ca[b * T + t] = tr.actions[E - T + t];
          }
          for (std::size_t j = 0; j + 1 < max_k; ++j) fa[b * (max_k - 1) + j] = tr.actions[E + j];
        }
        Mat ctx = T > 0 ? norm.apply(raw) : raw;
        Mat pred = f.forecast(B, T, max_k, ctx, ca, fa);
        for (std::size_t b = 0; b < B; ++b) {
          const auto& tr = ds.trajectories[usable[lo + b]];
          for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
            const std::size_t k = k_list[ki];
            Mat target(1, static_cast<Eigen::Index>(O));
            const float* o = tr.obs(E + k - 1);
            for (std::size_t j = 0; j < O; ++j) target(0, static_cast<Eigen::Index>(j)) = o[j];
            const double e =
                (pred.row(static_cast<Eigen::Index>(b * max_k + k - 1)) - norm.apply(target)).squaredNorm() /
                static_cast<double>(O);
            acc[((lo + b) * T_grid.size() + ti) * k_list.size() + ki] += e;
          }
        }
      }
      for (std::size_t b = lo; b < hi; ++b) ++cnt[b];
    }
    lo = hi;
  }
  for (std::size_t i = 0; i < usable.size(); ++i)
    for (std::size_t ti = 0; ti < T_grid.size(); ++ti)
      for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
        const double e = acc[(i * T_grid.size() + ti) * k_list.size() + ki] / static_cast<double>(cnt[i]);
        if (!std::isfinite(e)) throw NumericalError("evaluate_icl: non-finite error");
        rows.push_back({usable[i], ds.env_of(usable[i]), T_grid[ti], k_list[ki], e});
      }
  return rows;
}

std::vector<MemoryDump> export_memory_states(GsaModel& model, const cartpole::Dataset& ds, const Normalizer& norm,
                                             std::span<const std::size_t> traj, std::span<const std::size_t> layers,
                                             std::size_t max_steps) {
  const auto& cfg = model.config();
  const std::size_t dim = 2 * cfg.heads * cfg.mem_len * (cfg.D / cfg.heads);
  std::vector<MemoryDump> dumps;
  for (auto l : layers) {
    ICWM_REQUIRE(l < cfg.L, "export_memory_states: layer out of range");
    dumps.push_back({l, dim, {}, {}, {}, {}});
  }
  const std::size_t O = cartpole::kObsDim;
  for (auto ti : traj) {
    const auto& tr = ds.trajectories.at(ti);
    const std::size_t steps = max_steps == 0 ? tr.length() : std::min(max_steps, tr.length());
    Mat raw(static_cast<Eigen::Index>(steps), static_cast<Eigen::Index>(O));
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t j = 0; j < O; ++j)
        raw(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(j)) = tr.obs(t)[j];
    Mat enc = model.encode_mean(norm.apply(raw));
    auto state = GsaState::zeros(cfg, 1);
    for (std::size_t t = 0; t < steps; ++t) {
      std::size_t a = tr.actions[t];
      model.step(state, enc.row(static_cast<Eigen::Index>(t)), std::span(&a, 1));
      for (auto& d : dumps) {
        const auto& mem = state.layers[d.layer][0];
        d.env.push_back(ds.env_of(ti));
        d.traj.push_back(ti);
        d.step.push_back(t + 1);
        for (const auto& part : {std::cref(mem.K), std::cref(mem.V)})
          for (const auto& m : part.get())
            for (Eigen::Index i = 0; i < m.size(); ++i) d.values.push_back(static_cast<float>(m.data()[i]));
      }
    }
  }
  return dumps;
}

}  // namespace icwm::seqmodel
