#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace icwm::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;

  Parameter() = default;
  Parameter(std::string n, Mat v) : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  std::size_t size() const { return static_cast<std::size_t>(value.size()); }
};

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Tape of coarse matrix operations. With recording off the same calls only
/// compute values, so one forward definition serves training and inference.
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Mat& out_grad)>;

  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Mat value);
  Var param(Parameter& p);
  const Mat& value(Var v) const;
  bool needs_grad(Var v) const { return record_ && nodes_[v.id].needs_grad; }

  /// Adds `g` into v's gradient if v participates in differentiation.
  void accumulate(Var v, const Mat& g);
  template <class Expr>
  void accumulate_expr(Var v, const Expr& g) {
    if (!needs_grad(v)) return;
    auto& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad = g;
    else n.grad += g;
  }

  /// Registers a result computed outside the tape. `back` receives d(out).
  Var custom(Mat value, std::span<const Var> inputs, Backward back);

  /// Reverse sweep from a 1x1 node; parameter gradients are added to
  /// Parameter::grad.
  void backward(Var scalar, double seed = 1.0);

  // Elementwise and linear algebra.
  Var matmul(Var a, Var b);
  Var linear(Var x, Var W, Var b);  // x W + b (b is a row)
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double c);
  Var add_row(Var a, Var row);
  Var sigmoid(Var a);
  Var softplus(Var a);
  Var silu(Var a);
  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

  /// out.row(i) = a.row(idx[i]); gradient scatters back.
  Var gather_rows(Var a, std::span<const std::size_t> idx);
  /// out.row(i) = mask[i] ? b.row(i) : a.row(i).
  Var select_rows(Var a, Var b, std::span<const char> mask);

  // Scalar reductions (1x1 results).
  Var mse(Var pred, const Mat& target);
  /// Mean over elements of KL(N(mu_p, sig_p^2) || N(mu_q, sig_q^2)).
  Var gaussian_kl(Var mu_p, Var sig_p, Var mu_q, Var sig_q);
  /// Mean over elements of KL(N(mu, sig^2) || N(0, 1)).
  Var standard_normal_kl(Var mu, Var sig);

 private:
  struct Node {
    Mat value;
    Mat grad;
    Parameter* param = nullptr;
    bool needs_grad = false;
    Backward back;
  };

  Var push(Mat value, std::span<const Var> inputs, Backward back);

  bool record_;
  std::vector<Node> nodes_;
};

double softplus(double x);
double sigmoid(double x);
double log_sigmoid(double x);

}  // namespace icwm::ad
