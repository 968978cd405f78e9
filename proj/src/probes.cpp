#include "icwm/probes.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "icwm/common.hpp"

namespace icwm::probes {

using seqmodel::GsaState;
using seqmodel::StepOutput;

std::vector<double> silhouette_samples(const Mat& points, std::span<const std::size_t> labels) {
  const auto n = static_cast<std::size_t>(points.rows());
  ICWM_REQUIRE(labels.size() == n, "silhouette: one label per point");
  std::map<std::size_t, std::size_t> sizes;
  for (auto l : labels) ++sizes[l];
  ICWM_REQUIRE(sizes.size() >= 2, "silhouette: needs at least two classes");
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (sizes[labels[i]] == 1) continue;
    std::map<std::size_t, double> sum;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i)
        sum[labels[j]] += (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
    const double a = sum[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
    double b = INFINITY;
    for (const auto& [l, s] : sum)
      if (l != labels[i]) b = std::min(b, s / static_cast<double>(sizes[l]));
    const double den = std::max(a, b);
    out[i] = den > 0.0 ? (b - a) / den : 0.0;
  }
  return out;
}

double silhouette_score(const Mat& points, std::span<const std::size_t> labels) {
  const auto s = silhouette_samples(points, labels);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

namespace {

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

Mat rows_at(const Mat& m, std::size_t stride, std::size_t t, std::size_t batch) {
  Mat out(static_cast<Eigen::Index>(batch), m.cols());
  for (std::size_t b = 0; b < batch; ++b)
    out.row(static_cast<Eigen::Index>(b)) = m.row(static_cast<Eigen::Index>(b * stride + t));
  return out;
}

double row_mse(const Mat& a, const Mat& b, Eigen::Index r) {
  return (a.row(r) - b.row(r)).squaredNorm() / static_cast<double>(a.cols());
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  ICWM_REQUIRE(x.size() == y.size() && x.size() >= 2, "spearman: need two equal-length samples");
  return pearson(ranks(x), ranks(y));
}

Interval bootstrap_spearman(std::span<const double> x, std::span<const double> y, std::size_t n_boot,
                            double level, std::uint64_t seed) {
  ICWM_REQUIRE(x.size() == y.size() && x.size() >= 2, "bootstrap: need two equal-length samples");
  ICWM_REQUIRE(n_boot > 0 && level > 0.0 && level < 1.0, "bootstrap: bad settings");
  std::vector<double> stats(n_boot);
  std::vector<double> bx(x.size()), by(y.size());
  for (std::size_t r = 0; r < n_boot; ++r) {
    Rng rng(derive_seed(seed, {stream_tag("bootstrap"), r}));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const std::size_t j = uniform_index(rng, x.size());
      bx[i] = x[j];
      by[i] = y[j];
    }
    stats[r] = spearman(bx, by);
  }
  const double tail = 0.5 * (1.0 - level);
  return {quantile(stats, tail), quantile(stats, 1.0 - tail)};
}

PcReport predictive_coding_probe(seqmodel::GsaModel& model, const cartpole::Dataset& ds,
                                 const seqmodel::Normalizer& norm, const PcProbeConfig& cfg) {
  ICWM_REQUIRE(!cfg.positions.empty() && !cfg.ks.empty(), "pc probe: empty positions or k list");
  const std::size_t max_p = *std::max_element(cfg.positions.begin(), cfg.positions.end());
  const std::size_t max_k = *std::max_element(cfg.ks.begin(), cfg.ks.end());
  for (auto p : cfg.positions) ICWM_REQUIRE(p >= 1, "pc probe: positions start at 1");
  for (auto k : cfg.ks) ICWM_REQUIRE(k >= 1, "pc probe: k must be positive");
  const std::size_t horizon = max_p + max_k;
  std::vector<std::size_t> traj;
  for (std::size_t i = 0; i < ds.trajectories.size(); ++i)
    if (ds.trajectories[i].length() >= horizon) traj.push_back(i);
  if (traj.empty()) throw InsufficientDataError("pc probe: no trajectory covers the probe horizon");
  const std::size_t B = traj.size(), O = cartpole::kObsDim, D = model.config().D;

  // Standardized observations 0..horizon and latent means, stacked per trajectory.
  const std::size_t stride = horizon + 1;
  Mat raw(static_cast<Eigen::Index>(B * stride), static_cast<Eigen::Index>(O));
  std::vector<std::size_t> acts(B * horizon);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& tr = ds.trajectories[traj[b]];
    for (std::size_t t = 0; t <= horizon; ++t)
      for (std::size_t j = 0; j < O; ++j)
        raw(static_cast<Eigen::Index>(b * stride + t), static_cast<Eigen::Index>(j)) = tr.obs(t)[j];
    for (std::size_t t = 0; t < horizon; ++t) acts[b * horizon + t] = tr.actions[t];
  }
  const Mat obs = norm.apply(raw);
  const Mat lat = model.encode_mean(obs);
  auto actions_at = [&](std::size_t t) {
    std::vector<std::size_t> a(B);
    for (std::size_t b = 0; b < B; ++b) a[b] = acts[b * horizon + t];
    return a;
  };

  // Clean run, keeping the state before every probe position.
  std::map<std::size_t, GsaState> before;
  std::vector<StepOutput> clean(horizon);
  GsaState state = GsaState::zeros(model.config(), B);
  for (std::size_t t = 0; t < horizon; ++t) {
    if (std::find(cfg.positions.begin(), cfg.positions.end(), t) != cfg.positions.end()) before[t] = state;
    clean[t] = model.step(state, rows_at(lat, stride, t, B), actions_at(t));
  }

  PcReport rep;
  std::vector<std::size_t> positions = cfg.positions;
  std::sort(positions.begin(), positions.end());
  positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
  std::vector<std::size_t> ks = cfg.ks;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  for (auto p : positions) {
    Mat sub(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(D));
    std::vector<double> sub_err(B);
    const Mat truth = rows_at(obs, stride, p, B);
    if (cfg.noise_scale) {
      Rng rng(derive_seed(cfg.seed, {stream_tag("pc-noise"), p}));
      std::normal_distribution<double> n01(0.0, 1.0);
      Mat noise(static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(D));
      for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = *cfg.noise_scale * n01(rng);
      sub = rows_at(lat, stride, p, B) + noise;
      for (std::size_t b = 0; b < B; ++b)
        sub_err[b] = noise.row(static_cast<Eigen::Index>(b)).squaredNorm() / static_cast<double>(D);
    } else {
      sub = clean[p - 1].s_hat;
      for (std::size_t b = 0; b < B; ++b) sub_err[b] = row_mse(clean[p - 1].o_hat, truth, static_cast<Eigen::Index>(b));
    }
    GsaState st = before.at(p);
    StepOutput out;
    for (std::size_t t = p; t < p + max_k; ++t) {
      out = model.step(st, t == p ? sub : rows_at(lat, stride, t, B), actions_at(t));
      const std::size_t k = t - p + 1;
      if (!std::binary_search(ks.begin(), ks.end(), k)) continue;
      const Mat target = rows_at(obs, stride, t + 1, B);
      for (std::size_t b = 0; b < B; ++b) {
        const auto r = static_cast<Eigen::Index>(b);
        const double d = row_mse(out.o_hat, target, r) - row_mse(clean[t].o_hat, target, r);
        rep.samples.push_back({traj[b], ds.env_of(traj[b]), p, k, sub_err[b], d});
      }
    }
  }
  std::sort(rep.samples.begin(), rep.samples.end(), [](const PcSample& a, const PcSample& b) {
    return std::tie(a.k, a.position, a.traj) < std::tie(b.k, b.position, b.traj);
  });
  for (auto k : ks) {
    std::vector<double> x, y;
    for (const auto& s : rep.samples)
      if (s.k == k) {
        x.push_back(s.substituted_error);
        y.push_back(s.delta);
      }
    PcSummary sm;
    sm.k = k;
    sm.n = x.size();
    sm.mean_delta = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    if (x.size() >= 2) {
      sm.spearman = spearman(x, y);
      sm.ci = bootstrap_spearman(x, y, cfg.n_boot, 0.95, derive_seed(cfg.seed, {stream_tag("pc-ci"), k}));
    }
    rep.summary.push_back(sm);
  }
  return rep;
}

std::vector<SilhouetteRow> silhouette_probe(std::span<const seqmodel::MemoryDump> dumps, std::size_t step) {
  std::vector<SilhouetteRow> rows;
  for (const auto& d : dumps) {
    std::vector<std::size_t> pick;
    for (std::size_t i = 0; i < d.step.size(); ++i)
      if (d.step[i] == step) pick.push_back(i);
    Mat pts(static_cast<Eigen::Index>(pick.size()), static_cast<Eigen::Index>(d.dim));
    std::vector<std::size_t> labels;
    for (std::size_t r = 0; r < pick.size(); ++r) {
      for (std::size_t j = 0; j < d.dim; ++j)
        pts(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = d.values[pick[r] * d.dim + j];
      labels.push_back(d.env[pick[r]]);
    }
    rows.push_back({d.layer, step, pick.size(), silhouette_score(pts, labels)});
  }
  return rows;
}

}  // namespace icwm::probes
