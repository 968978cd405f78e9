#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "icwm/common.hpp"
#include "icwm/world_model.hpp"

using namespace icwm;
using namespace icwm::seqmodel;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::vector<std::size_t> random_actions(std::size_t n, std::size_t k, Rng& rng) {
  std::uniform_int_distribution<std::size_t> u(0, k - 1);
  std::vector<std::size_t> a(n);
  for (auto& x : a) x = u(rng);
  return a;
}

SequenceBatch random_batch(const GsaConfig& cfg, std::size_t B, std::size_t T, Rng& rng) {
  SequenceBatch sb;
  sb.batch = B;
  sb.T = T;
  sb.obs = random_mat(static_cast<Eigen::Index>(B * (T + 1)), static_cast<Eigen::Index>(cfg.obs_dim), rng);
  sb.actions = random_actions(B * T, cfg.n_actions, rng);
  return sb;
}

GsaConfig small_config() {
  GsaConfig c;
  c.D = 8;
  c.L = 2;
  c.heads = 2;
  c.mem_len = 3;
  c.chunk = 4;
  return c;
}

}  // namespace

TEST_CASE("chunkwise and recurrent temporal core agree") {
  Rng rng(11);
  std::uniform_int_distribution<std::size_t> pick(0, 3);
  for (int trial = 0; trial < 20; ++trial) {
    GsaConfig c;
    c.heads = 1 + pick(rng) % 2;
    c.D = c.heads * (2 + pick(rng));
    c.L = 1 + pick(rng) % 2;
    c.mem_len = 2 + pick(rng);
    c.chunk = std::vector<std::size_t>{1, 7, 16, 64}[pick(rng)];
    const std::size_t B = 1 + pick(rng) % 2;
    const std::size_t T = trial < 2 ? 512 : 5 + 37 * pick(rng);
    GsaModel m(c, 100 + static_cast<std::uint64_t>(trial));
    Mat lat = random_mat(static_cast<Eigen::Index>(B * T), static_cast<Eigen::Index>(c.D), rng);
    auto acts = random_actions(B * T, c.n_actions, rng);
    Mat chunk = m.forward_chunkwise(lat, acts, B);
    auto st = GsaState::zeros(c, B);
    double worst = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      Mat x(static_cast<Eigen::Index>(B), lat.cols());
      std::vector<std::size_t> a(B);
      for (std::size_t b = 0; b < B; ++b) {
        x.row(static_cast<Eigen::Index>(b)) = lat.row(static_cast<Eigen::Index>(b * T + t));
        a[b] = acts[b * T + t];
      }
      auto out = m.step(st, x, a);
      for (std::size_t b = 0; b < B; ++b)
        worst = std::max(worst, (out.h.row(static_cast<Eigen::Index>(b)) -
                                 chunk.row(static_cast<Eigen::Index>(b * T + t)))
                                    .cwiseAbs()
                                    .maxCoeff());
    }
    CHECK(worst <= 1e-10);
  }
}

TEST_CASE("loss gradients match finite differences for every parameter") {
  Rng rng(12);
  auto cfg = small_config();
  GsaModel m(cfg, 7);
  auto sb = random_batch(cfg, 2, 6, rng);
  LossConfig lc{0.05, 0.7};
  auto eval = [&] {
    Graph g(false);
    return g.value(m.loss(g, sb, lc))(0, 0);
  };
  const double eps = 1e-5;
  m.zero_grad();
  {
    Graph g;
    g.backward(m.loss(g, sb, lc));
  }
  for (auto* p : m.parameters()) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + eps;
      const double fp = eval();
      p->value.data()[i] = orig - eps;
      const double fm = eval();
      p->value.data()[i] = orig;
      const double fd = (fp - fm) / (2 * eps);
      const double an = p->grad.data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
    }
    INFO(p->name);
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("masked rows take the detached prediction") {
  Rng rng(13);
  auto cfg = small_config();
  GsaModel m(cfg, 3);
  auto sb = random_batch(cfg, 1, 5, rng);
  LossConfig lc;
  Graph g0(false);
  const double base = g0.value(m.loss(g0, sb, lc))(0, 0);
  sb.mask = {1, 0, 0, 0, 0};  // position 0 is never masked
  Graph g1(false);
  CHECK(g1.value(m.loss(g1, sb, lc))(0, 0) == base);
  sb.mask = {0, 0, 1, 0, 0};
  Graph g2(false);
  CHECK(g2.value(m.loss(g2, sb, lc))(0, 0) != base);
  // Masking perturbs only positions at or after the masked one: replacing the
  // input at t=2 by the prediction made at t=1 must match a manual rollout.
  Mat raw_in(5, static_cast<Eigen::Index>(cfg.D));
  Mat enc = m.encode_mean(sb.obs);
  for (int t = 0; t < 5; ++t) raw_in.row(t) = enc.row(t);
  Mat h0 = m.forward_chunkwise(raw_in, sb.actions, 1);
  auto pred = m.from_hidden(h0);
  raw_in.row(2) = pred.s_hat.row(1);
  Mat h1 = m.forward_chunkwise(raw_in, sb.actions, 1);
  CHECK((h1.topRows(2) - h0.topRows(2)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((h1.row(2) - h0.row(2)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("loss components are nonnegative and combine linearly") {
  Rng rng(14);
  auto cfg = small_config();
  GsaModel m(cfg, 5);
  auto sb = random_batch(cfg, 3, 9, rng);
  LossBreakdown a, b;
  Graph g1(false), g2(false);
  m.loss(g1, sb, {0.0, 0.0}, &a);
  m.loss(g2, sb, {0.25, 2.0}, &b);
  CHECK(a.reconstruction >= 0.0);
  CHECK(a.latent_kl >= 0.0);
  CHECK(a.transition_kl >= 0.0);
  CHECK(a.total == doctest::Approx(a.reconstruction).epsilon(1e-14));
  CHECK(b.reconstruction == a.reconstruction);
  CHECK(b.total == doctest::Approx(b.reconstruction + 0.25 * b.latent_kl + 2.0 * b.transition_kl).epsilon(1e-12));
  CHECK_THROWS_AS(LossConfig({-1.0, 1.0}).validate(), ConfigError);
}

TEST_CASE("reconstruction term is mean squared error of decoded predictions") {
  Rng rng(15);
  auto cfg = small_config();
  GsaModel m(cfg, 6);
  auto sb = random_batch(cfg, 2, 4, rng);
  LossBreakdown parts;
  Graph g(false);
  m.loss(g, sb, {0.0, 0.0}, &parts);
  double sse = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    Mat enc = m.encode_mean(sb.obs.middleRows(static_cast<Eigen::Index>(b * 5), 4));
    Mat h = m.forward_chunkwise(enc, std::span(sb.actions).subspan(b * 4, 4), 1);
    Mat o = m.from_hidden(h).o_hat;
    sse += (o - sb.obs.middleRows(static_cast<Eigen::Index>(b * 5 + 1), 4)).squaredNorm();
  }
  CHECK(parts.reconstruction == doctest::Approx(sse / (8.0 * 4.0)).epsilon(1e-12));
}

TEST_CASE("encoder is affine and decoder maps zero to its bias") {
  Rng rng(16);
  auto cfg = small_config();
  GsaModel m(cfg, 8);
  Mat x = random_mat(3, 4, rng), y = random_mat(3, 4, rng);
  Mat lhs = m.encode_mean(0.3 * x + 0.7 * y);
  Mat rhs = 0.3 * m.encode_mean(x) + 0.7 * m.encode_mean(y);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12);
  Mat dz = m.decode_observation(Mat::Zero(2, static_cast<Eigen::Index>(cfg.D)));
  const Parameter* out_b = nullptr;
  for (const auto* p : std::as_const(m).parameters())
    if (p->name == "out.b") out_b = p;
  REQUIRE(out_b);
  CHECK(dz.row(0) == out_b->value.row(0));
  CHECK(dz.row(1) == out_b->value.row(0));
}

TEST_CASE("action embeddings are distinct and gradients stay sparse") {
  auto cfg = small_config();
  cfg.n_actions = 3;
  GsaModel m(cfg, 9);
  Graph g;
  std::vector<std::size_t> a{0, 1, 0};
  auto e = m.encode_action(g, a);
  const Mat& v = g.value(e);
  CHECK(v.row(0) == v.row(2));
  CHECK_FALSE(v.row(0) == v.row(1));
  m.zero_grad();
  g.backward(g.mse(e, Mat::Zero(3, static_cast<Eigen::Index>(cfg.D))));
  Parameter* emb = nullptr;
  for (auto* p : m.parameters())
    if (p->name == "act.emb") emb = p;
  REQUIRE(emb);
  CHECK(emb->grad.row(2).isZero());
  CHECK_FALSE(emb->grad.row(0).isZero());
  std::vector<std::size_t> bad{3};
  Graph g2(false);
  CHECK_THROWS_AS(m.encode_action(g2, bad), ContractViolation);
}

TEST_CASE("zeroed residual branches give the identity") {
  auto cfg = small_config();
  GsaModel m(cfg, 10);
  for (auto* p : m.parameters())
    if (p->name.find(".wo") != std::string::npos || p->name.find(".bo") != std::string::npos ||
        p->name.find("ffn.w2") != std::string::npos || p->name.find("ffn.b2") != std::string::npos)
      p->value.setZero();
  Rng rng(17);
  Mat x = random_mat(6, static_cast<Eigen::Index>(cfg.D), rng);
  std::vector<std::size_t> a(6, 0);
  Graph g(false);
  auto tok = g.add(g.constant(x), m.encode_action(g, a));
  Mat h = m.forward_chunkwise(x, a, 1);
  CHECK((h - g.value(tok)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("checkpoint round trip") {
  auto cfg = small_config();
  cfg.train_sigma_hat = false;
  cfg.fixed_sigma_hat = 0.5;
  GsaModel m(cfg, 21);
  round_to_float(m);
  CheckpointMeta meta;
  meta.loss = {0.01, 0.5};
  meta.normalizer = {{1, 2, 3, 4}, {0.5, 1, 2, 4}};
  meta.step = 42;
  meta.rng_state = "abc";
  meta.extra = {{"note", "x"}};
  const auto path = (std::filesystem::temp_directory_path() / "icwm_ckpt_test.bin").string();
  save_checkpoint(path, m, meta);
  CheckpointMeta back;
  auto m2 = load_checkpoint(path, &back);
  CHECK(m2.config().fixed_sigma_hat == 0.5);
  CHECK_FALSE(m2.config().train_sigma_hat);
  CHECK(back.step == 42);
  CHECK(back.rng_state == "abc");
  CHECK(back.loss.transition_weight == 0.5);
  CHECK(back.normalizer.std[3] == 4.0);
  CHECK(back.extra["note"] == "x");
  auto p1 = m.parameters();
  auto p2 = m2.parameters();
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->value == p2[i]->value);
  {
    std::ofstream bad(path, std::ios::binary);
    bad << "NOTACKPT";
  }
  CHECK_THROWS_AS(load_checkpoint(path), ConfigError);
  std::filesystem::remove(path);
}

TEST_CASE("normalizer and config validation") {
  Normalizer n{{1.0, -1.0}, {2.0, 0.5}};
  Mat raw(1, 2);
  raw << 3.0, 0.0;
  Mat z = n.apply(raw);
  CHECK(z(0, 0) == 1.0);
  CHECK(z(0, 1) == 2.0);
  GsaConfig c;
  c.D = 10;
  c.heads = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(normalizer_from_json({{"mean", {0.0}}, {"std", {0.0}}}), ConfigError);
  auto j = config_to_json(GsaConfig::full_scale());
  CHECK(config_from_json(j).D == GsaConfig::full_scale().D);
}
