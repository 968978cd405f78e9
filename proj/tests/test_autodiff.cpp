#include <doctest.h>

#include <cmath>
#include <functional>

#include "icwm/autodiff.hpp"
#include "icwm/common.hpp"

using namespace icwm;
using namespace icwm::ad;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

// Central differences over every entry of every parameter.
double max_rel_error(std::vector<Parameter*> params, const std::function<Var(Graph&)>& build) {
  for (auto* p : params) p->zero_grad();
  Graph g;
  g.backward(build(g));
  double worst = 0.0;
  const double eps = 1e-5;
  for (auto* p : params) {
    for (Eigen::Index i = 0; i < p->value.size(); ++i) {
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + eps;
      Graph gp(false);
      const double fp = gp.value(build(gp))(0, 0);
      p->value.data()[i] = orig - eps;
      Graph gm(false);
      const double fm = gm.value(build(gm))(0, 0);
      p->value.data()[i] = orig;
      const double fd = (fp - fm) / (2 * eps);
      const double an = p->grad.data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("scalar helpers") {
  CHECK(softplus(0.0) == doctest::Approx(std::log(2.0)));
  CHECK(softplus(800.0) == 800.0);
  CHECK(softplus(-800.0) == 0.0);
  CHECK(sigmoid(-800.0) == 0.0);
  CHECK(log_sigmoid(-800.0) == doctest::Approx(-800.0));
}

TEST_CASE("elementwise and linear ops match finite differences") {
  Rng rng(1);
  Parameter x("x", random_mat(5, 4, rng)), W("W", random_mat(4, 3, rng)), b("b", random_mat(1, 3, rng));
  Parameter y("y", random_mat(5, 3, rng)), gam("gam", random_mat(1, 3, rng)), bet("bet", random_mat(1, 3, rng));
  Mat target = random_mat(5, 3, rng);
  Mat proj = random_mat(3, 3, rng);
  auto build = [&](Graph& g) {
    auto h = g.linear(g.param(x), g.param(W), g.param(b));
    auto a = g.silu(h);
    auto s = g.sigmoid(g.param(y));
    auto p = g.softplus(g.sub(a, s));
    auto m = g.mul(p, g.add(h, g.param(y)));
    auto n = g.layer_norm(m, g.param(gam), g.param(bet));
    auto r = g.add_row(g.scale(n, 0.7), g.param(b));
    auto mm = g.matmul(r, g.constant(proj));
    return g.mse(mm, target);
  };
  CHECK(max_rel_error({&x, &W, &b, &y, &gam, &bet}, build) < 1e-6);
}

TEST_CASE("gather, select and KL ops match finite differences") {
  Rng rng(2);
  Parameter table("table", random_mat(4, 3, rng)), mu("mu", random_mat(6, 3, rng));
  Parameter sraw("sraw", random_mat(6, 3, rng)), mq("mq", random_mat(6, 3, rng)), sq("sq", random_mat(6, 3, rng));
  std::vector<std::size_t> idx{0, 2, 2, 3, 1, 0};
  std::vector<char> mask{0, 1, 0, 1, 1, 0};
  auto build = [&](Graph& g) {
    auto e = g.gather_rows(g.param(table), idx);
    auto sel = g.select_rows(g.param(mu), e, mask);
    auto sp = g.softplus(g.param(sraw));
    auto sqv = g.softplus(g.param(sq));
    auto k1 = g.gaussian_kl(sel, sp, g.param(mq), sqv);
    auto k2 = g.standard_normal_kl(g.param(mu), sp);
    return g.add(k1, g.scale(k2, 0.3));
  };
  CHECK(max_rel_error({&table, &mu, &sraw, &mq, &sq}, build) < 1e-6);
}

TEST_CASE("gather gradient is sparse over unused rows") {
  Parameter table("t", Mat::Ones(3, 2));
  Graph g;
  std::vector<std::size_t> idx{1, 1};
  auto e = g.gather_rows(g.param(table), idx);
  g.backward(g.mse(e, Mat::Zero(2, 2)));
  CHECK(table.grad.row(0).isZero());
  CHECK(table.grad.row(2).isZero());
  CHECK_FALSE(table.grad.row(1).isZero());
}

TEST_CASE("gaussian KL closed forms") {
  Graph g(false);
  auto one = g.constant(Mat::Ones(1, 1));
  auto zero = g.constant(Mat::Zero(1, 1));
  CHECK(g.value(g.standard_normal_kl(zero, one))(0, 0) == 0.0);
  CHECK(g.value(g.standard_normal_kl(one, one))(0, 0) == doctest::Approx(0.5));
  CHECK(g.value(g.gaussian_kl(one, one, one, one))(0, 0) == 0.0);
  auto two = g.constant(Mat::Constant(1, 1, 2.0));
  // (mu^2 + s^2 - 1 - 2 ln s) / 2 at mu = 1, s = 2.
  CHECK(g.value(g.standard_normal_kl(one, two))(0, 0) == doctest::Approx((1 + 4 - 1 - 2 * std::log(2.0)) / 2));
  CHECK_THROWS_AS(g.standard_normal_kl(one, zero), ContractViolation);
}

TEST_CASE("unused parameter has zero gradient and loss scaling is linear") {
  Rng rng(3);
  Parameter a("a", random_mat(2, 2, rng)), unused("u", random_mat(2, 2, rng));
  Graph g;
  g.param(unused);
  auto l = g.mse(g.param(a), Mat::Zero(2, 2));
  g.backward(l);
  CHECK(unused.grad.isZero());
  Mat first = a.grad;
  a.zero_grad();
  Graph g2;
  g2.backward(g2.scale(g2.mse(g2.param(a), Mat::Zero(2, 2)), 2.0));
  CHECK(a.grad.isApprox(2.0 * first));
}

TEST_CASE("no-grad graph computes identical values") {
  Rng rng(4);
  Parameter W("W", random_mat(3, 3, rng));
  Mat x = random_mat(2, 3, rng);
  Graph on, off(false);
  auto y1 = on.silu(on.matmul(on.constant(x), on.param(W)));
  auto y2 = off.silu(off.matmul(off.constant(x), off.param(W)));
  CHECK(on.value(y1) == off.value(y2));
  CHECK_THROWS_AS(off.backward(off.mse(y2, Mat::Zero(2, 3))), ContractViolation);
}
