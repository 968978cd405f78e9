#include "icwm/autodiff.hpp"

#include <cmath>

#include "icwm/common.hpp"

namespace icwm::ad {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) { return -softplus(-x); }

namespace {

using Arr = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat sigmoid_of(const Mat& x) {
  const Arr e = (-x.array().abs()).exp();
  const Arr inv = (1.0 + e).inverse();
  return (x.array() >= 0.0).select(inv, e * inv).matrix();
}

Mat softplus_of(const Mat& x) {
  return (x.array().max(0.0) + (-x.array().abs()).exp().log1p()).matrix();
}

}  // namespace

Var Graph::push(Mat value, std::span<const Var> inputs, Backward back) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var v : inputs) n.needs_grad = n.needs_grad || nodes_[v.id].needs_grad;
    if (n.needs_grad) n.back = std::move(back);
  }
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Mat value) { return push(std::move(value), {}, nullptr); }

Var Graph::param(Parameter& p) {
  Node n;
  n.param = &p;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Mat& Graph::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.param ? n.param->value : n.value;
}

void Graph::accumulate(Var v, const Mat& g) { accumulate_expr(v, g); }

Var Graph::custom(Mat value, std::span<const Var> inputs, Backward back) {
  return push(std::move(value), inputs, std::move(back));
}

void Graph::backward(Var scalar, double seed) {
  ICWM_REQUIRE(record_, "backward: graph was not recording");
  ICWM_REQUIRE(value(scalar).size() == 1, "backward: root must be a scalar");
  if (!nodes_[scalar.id].needs_grad) return;
  nodes_[scalar.id].grad = Mat::Constant(1, 1, seed);
  for (std::size_t i = scalar.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.param) {
      n.param->grad += n.grad;
    } else if (n.back) {
      // The closure may accumulate into earlier nodes only.
      const Mat g = std::move(n.grad);
      n.grad.resize(0, 0);
      n.back(*this, g);
    }
  }
}

Var Graph::matmul(Var a, Var b) {
  const Var in[] = {a, b};
  return push(value(a) * value(b), in, [a, b](Graph& g, const Mat& d) {
    if (g.needs_grad(a)) g.accumulate_expr(a, d * g.value(b).transpose());
    if (g.needs_grad(b)) g.accumulate_expr(b, g.value(a).transpose() * d);
  });
}

Var Graph::linear(Var x, Var W, Var b) {
  ICWM_REQUIRE(value(x).cols() == value(W).rows(), "linear: shape mismatch");
  Mat y = value(x) * value(W);
  y.rowwise() += value(b).row(0);
  const Var in[] = {x, W, b};
  return push(std::move(y), in, [x, W, b](Graph& g, const Mat& d) {
    if (g.needs_grad(x)) g.accumulate_expr(x, d * g.value(W).transpose());
    if (g.needs_grad(W)) g.accumulate_expr(W, g.value(x).transpose() * d);
    if (g.needs_grad(b)) g.accumulate_expr(b, d.colwise().sum());
  });
}

Var Graph::add(Var a, Var b) {
  ICWM_REQUIRE(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add: shape mismatch");
  const Var in[] = {a, b};
  return push(value(a) + value(b), in, [a, b](Graph& g, const Mat& d) {
    g.accumulate(a, d);
    g.accumulate(b, d);
  });
}

Var Graph::sub(Var a, Var b) {
  ICWM_REQUIRE(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "sub: shape mismatch");
  const Var in[] = {a, b};
  return push(value(a) - value(b), in, [a, b](Graph& g, const Mat& d) {
    g.accumulate(a, d);
    g.accumulate_expr(b, -d);
  });
}

Var Graph::mul(Var a, Var b) {
  const Var in[] = {a, b};
  return push(value(a).cwiseProduct(value(b)), in, [a, b](Graph& g, const Mat& d) {
    if (g.needs_grad(a)) g.accumulate_expr(a, d.cwiseProduct(g.value(b)));
    if (g.needs_grad(b)) g.accumulate_expr(b, d.cwiseProduct(g.value(a)));
  });
}

Var Graph::scale(Var a, double c) {
  const Var in[] = {a};
  return push(value(a) * c, in, [a, c](Graph& g, const Mat& d) { g.accumulate_expr(a, d * c); });
}

Var Graph::add_row(Var a, Var row) {
  ICWM_REQUIRE(value(row).rows() == 1 && value(row).cols() == value(a).cols(), "add_row: shape mismatch");
  Mat y = value(a);
  y.rowwise() += value(row).row(0);
  const Var in[] = {a, row};
  return push(std::move(y), in, [a, row](Graph& g, const Mat& d) {
    g.accumulate(a, d);
    if (g.needs_grad(row)) g.accumulate_expr(row, d.colwise().sum());
  });
}

Var Graph::sigmoid(Var a) {
  Mat y = sigmoid_of(value(a));
  const Var in[] = {a};
  const Var out{nodes_.size()};
  return push(std::move(y), in, [a, out](Graph& g, const Mat& d) {
    const Mat& s = g.value(out);
    g.accumulate_expr(a, d.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix())));
  });
}

Var Graph::softplus(Var a) {
  Mat y = softplus_of(value(a));
  const Var in[] = {a};
  return push(std::move(y), in, [a](Graph& g, const Mat& d) {
    g.accumulate_expr(a, d.cwiseProduct(sigmoid_of(g.value(a))));
  });
}

Var Graph::silu(Var a) {
  Mat y = value(a).cwiseProduct(sigmoid_of(value(a)));
  const Var in[] = {a};
  return push(std::move(y), in, [a](Graph& g, const Mat& d) {
    const Arr s = sigmoid_of(g.value(a)).array();
    const Mat dy = (s * (1.0 + g.value(a).array() * (1.0 - s))).matrix();
    g.accumulate_expr(a, d.cwiseProduct(dy));
  });
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Mat& X = value(x);
  const auto cols = X.cols();
  Mat xhat(X.rows(), cols);
  Eigen::VectorXd inv_std(X.rows());
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double mu = X.row(i).mean();
    const double var = (X.row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mu) * inv_std(i);
  }
  Mat y = xhat.array().rowwise() * value(gamma).row(0).array();
  y.rowwise() += value(beta).row(0);
  const Var in[] = {x, gamma, beta};
  return push(std::move(y), in, [x, gamma, beta, xhat, inv_std](Graph& g, const Mat& d) {
    if (g.needs_grad(gamma)) g.accumulate_expr(gamma, d.cwiseProduct(xhat).colwise().sum());
    if (g.needs_grad(beta)) g.accumulate_expr(beta, d.colwise().sum());
    if (!g.needs_grad(x)) return;
    Mat dxhat = d.array().rowwise() * g.value(gamma).row(0).array();
    Mat dx(d.rows(), d.cols());
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
      const double m1 = dxhat.row(i).mean();
      const double m2 = dxhat.row(i).cwiseProduct(xhat.row(i)).mean();
      dx.row(i) = inv_std(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
    }
    g.accumulate(x, dx);
  });
}

Var Graph::gather_rows(Var a, std::span<const std::size_t> idx) {
  const Mat& A = value(a);
  Mat y(static_cast<Eigen::Index>(idx.size()), A.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    ICWM_REQUIRE(idx[i] < static_cast<std::size_t>(A.rows()), "gather_rows: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = A.row(static_cast<Eigen::Index>(idx[i]));
  }
  std::vector<std::size_t> ix(idx.begin(), idx.end());
  const auto rows = A.rows();
  const Var in[] = {a};
  return push(std::move(y), in, [a, ix = std::move(ix), rows](Graph& g, const Mat& d) {
    Mat da = Mat::Zero(rows, d.cols());
    for (std::size_t i = 0; i < ix.size(); ++i)
      da.row(static_cast<Eigen::Index>(ix[i])) += d.row(static_cast<Eigen::Index>(i));
    g.accumulate(a, da);
  });
}

Var Graph::select_rows(Var a, Var b, std::span<const char> mask) {
  const Mat& A = value(a);
  const Mat& B = value(b);
  ICWM_REQUIRE(A.rows() == B.rows() && A.cols() == B.cols(), "select_rows: shape mismatch");
  ICWM_REQUIRE(mask.size() == static_cast<std::size_t>(A.rows()), "select_rows: mask size");
  Mat y = A;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) y.row(static_cast<Eigen::Index>(i)) = B.row(static_cast<Eigen::Index>(i));
  std::vector<char> m(mask.begin(), mask.end());
  const Var in[] = {a, b};
  return push(std::move(y), in, [a, b, m = std::move(m)](Graph& g, const Mat& d) {
    Mat da = d, db = Mat::Zero(d.rows(), d.cols());
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i]) {
        db.row(static_cast<Eigen::Index>(i)) = d.row(static_cast<Eigen::Index>(i));
        da.row(static_cast<Eigen::Index>(i)).setZero();
      }
    g.accumulate(a, da);
    g.accumulate(b, db);
  });
}

Var Graph::mse(Var pred, const Mat& target) {
  const Mat& P = value(pred);
  ICWM_REQUIRE(P.rows() == target.rows() && P.cols() == target.cols(), "mse: shape mismatch");
  ICWM_REQUIRE(P.size() > 0, "mse: empty input");
  Mat diff = P - target;
  const double n = static_cast<double>(diff.size());
  const double v = diff.squaredNorm() / n;
  const Var in[] = {pred};
  return push(Mat::Constant(1, 1, v), in, [pred, diff = std::move(diff), n](Graph& g, const Mat& d) {
    g.accumulate_expr(pred, diff * (2.0 * d(0, 0) / n));
  });
}

Var Graph::gaussian_kl(Var mu_p, Var sig_p, Var mu_q, Var sig_q) {
  const auto& mp = value(mu_p).array();
  const auto& sp = value(sig_p).array();
  const auto& mq = value(mu_q).array();
  const auto& sq = value(sig_q).array();
  ICWM_REQUIRE((sp > 0.0).all() && (sq > 0.0).all(), "gaussian_kl: scales must be positive");
  const double n = static_cast<double>(mp.size());
  const double v =
      ((sq / sp).log() + (sp.square() + (mp - mq).square()) / (2.0 * sq.square()) - 0.5).sum() / n;
  const Var in[] = {mu_p, sig_p, mu_q, sig_q};
  return push(Mat::Constant(1, 1, v), in, [mu_p, sig_p, mu_q, sig_q, n](Graph& g, const Mat& d) {
    const double c = d(0, 0) / n;
    const auto mp = g.value(mu_p).array();
    const auto sp = g.value(sig_p).array();
    const auto mq = g.value(mu_q).array();
    const auto sq = g.value(sig_q).array();
    const Eigen::ArrayXXd diff = mp - mq;
    const Eigen::ArrayXXd inv_q2 = sq.square().inverse();
    if (g.needs_grad(mu_p)) g.accumulate_expr(mu_p, (c * diff * inv_q2).matrix());
    if (g.needs_grad(mu_q)) g.accumulate_expr(mu_q, (-c * diff * inv_q2).matrix());
    if (g.needs_grad(sig_p)) g.accumulate_expr(sig_p, (c * (sp * inv_q2 - sp.inverse())).matrix());
    if (g.needs_grad(sig_q))
      g.accumulate_expr(sig_q, (c * (sq.inverse() - (sp.square() + diff.square()) * inv_q2 / sq)).matrix());
  });
}

Var Graph::standard_normal_kl(Var mu, Var sig) {
  const auto& m = value(mu).array();
  const auto& s = value(sig).array();
  ICWM_REQUIRE((s > 0.0).all(), "standard_normal_kl: scales must be positive");
  const double n = static_cast<double>(m.size());
  const double v = (0.5 * (m.square() + s.square() - 1.0) - s.log()).sum() / n;
  const Var in[] = {mu, sig};
  return push(Mat::Constant(1, 1, v), in, [mu, sig, n](Graph& g, const Mat& d) {
    const double c = d(0, 0) / n;
    if (g.needs_grad(mu)) g.accumulate_expr(mu, c * g.value(mu));
    if (g.needs_grad(sig)) {
      const auto s = g.value(sig).array();
      g.accumulate_expr(sig, (c * (s - s.inverse())).matrix());
    }
  });
}

}  // namespace icwm::ad
