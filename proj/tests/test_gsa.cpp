#include <doctest.h>

#include <cmath>

#include "icwm/common.hpp"
#include "icwm/gsa.hpp"

using namespace icwm;
using namespace icwm::gsa;

namespace {

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0, double shift = 0.0) {
  std::normal_distribution<double> n(shift, scale);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

struct Inputs {
  Mat q, k, v, g;
};

Inputs random_inputs(std::size_t batch, std::size_t T, const GsaShape& s, Rng& rng) {
  const auto N = static_cast<Eigen::Index>(batch * T);
  const auto w = static_cast<Eigen::Index>(s.width());
  return {random_mat(N, w, rng), random_mat(N, w, rng), random_mat(N, w, rng),
          random_mat(N, static_cast<Eigen::Index>(s.gate_width()), rng, 3.0, 1.0)};
}

Mat run_recurrent(const Inputs& in, std::size_t batch, const GsaShape& s, std::vector<SlotMemory>* mem_out = nullptr) {
  const auto T = in.q.rows() / static_cast<Eigen::Index>(batch);
  std::vector<SlotMemory> mem(batch, SlotMemory::zeros(s));
  Mat O(in.q.rows(), in.q.cols());
  for (Eigen::Index t = 0; t < T; ++t) {
    Mat q(batch, in.q.cols()), k(batch, in.q.cols()), v(batch, in.q.cols()), g(batch, in.g.cols());
    for (std::size_t b = 0; b < batch; ++b) {
      const auto r = static_cast<Eigen::Index>(b) * T + t;
      q.row(b) = in.q.row(r);
      k.row(b) = in.k.row(r);
      v.row(b) = in.v.row(r);
      g.row(b) = in.g.row(r);
    }
    Mat o = recurrent_step(q, k, v, g, mem, s);
    for (std::size_t b = 0; b < batch; ++b) O.row(static_cast<Eigen::Index>(b) * T + t) = o.row(b);
  }
  if (mem_out) *mem_out = mem;
  return O;
}

}  // namespace

TEST_CASE("chunk size invariance and recurrent equivalence") {
  Rng rng(1);
  GsaShape s{2, 3, 5, 8, -10.0};
  auto in = random_inputs(2, 37, s, rng);
  auto a = chunk_forward(in.q, in.k, in.v, in.g, 2, s);
  s.chunk = 16;
  auto b = chunk_forward(in.q, in.k, in.v, in.g, 2, s);
  CHECK((a.O - b.O).cwiseAbs().maxCoeff() <= 1e-10);
  s.chunk = 1;
  auto c = chunk_forward(in.q, in.k, in.v, in.g, 2, s);
  std::vector<SlotMemory> mem;
  Mat rec = run_recurrent(in, 2, s, &mem);
  CHECK((c.O - rec).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((a.O - rec).cwiseAbs().maxCoeff() <= 1e-10);
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t h = 0; h < 2; ++h) {
      CHECK((a.final_memory[bi].K[h] - mem[bi].K[h]).cwiseAbs().maxCoeff() <= 1e-10);
      CHECK((a.final_memory[bi].V[h] - mem[bi].V[h]).cwiseAbs().maxCoeff() <= 1e-10);
    }
}

TEST_CASE("strong decay within long chunks stays finite and exact") {
  Rng rng(2);
  GsaShape s{1, 4, 6, 64, -10.0};
  auto in = random_inputs(1, 200, s, rng);
  in.g = random_mat(200, 6, rng, 2.0, -9.0);  // heavy forgetting, many clamped
  auto a = chunk_forward(in.q, in.k, in.v, in.g, 1, s);
  CHECK(a.O.allFinite());
  CHECK((a.O - run_recurrent(in, 1, s)).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("empty sequence and continuation from memory") {
  Rng rng(3);
  GsaShape s{2, 2, 3, 4, -10.0};
  auto in = random_inputs(1, 10, s, rng);
  auto full = chunk_forward(in.q, in.k, in.v, in.g, 1, s);
  auto first = chunk_forward(in.q.topRows(6), in.k.topRows(6), in.v.topRows(6), in.g.topRows(6), 1, s);
  auto rest = chunk_forward(in.q.bottomRows(4), in.k.bottomRows(4), in.v.bottomRows(4), in.g.bottomRows(4), 1, s,
                            &first.final_memory);
  CHECK((full.O.bottomRows(4) - rest.O).cwiseAbs().maxCoeff() <= 1e-12);
  Mat none(0, 4), noneg(0, 6);
  auto e = chunk_forward(none, none, none, noneg, 1, s);
  CHECK(e.O.rows() == 0);
  CHECK(e.final_memory[0] == SlotMemory::zeros(s));
}

TEST_CASE("causality") {
  Rng rng(4);
  GsaShape s{2, 3, 4, 5, -10.0};
  auto in = random_inputs(1, 20, s, rng);
  auto base = chunk_forward(in.q, in.k, in.v, in.g, 1, s);
  in.k.row(12).array() += 1.0;
  in.v.row(12).array() -= 2.0;
  in.g.row(12).array() += 0.5;
  auto pert = chunk_forward(in.q, in.k, in.v, in.g, 1, s);
  CHECK(base.O.topRows(12) == pert.O.topRows(12));
  CHECK_FALSE(base.O.row(12) == pert.O.row(12));
}

TEST_CASE("saturated forgetting nearly erases prior memory") {
  Rng rng(5);
  GsaShape s{1, 3, 4, 4, -10.0};
  std::vector<SlotMemory> m1(1, SlotMemory::zeros(s)), m2(1, SlotMemory::zeros(s));
  m2[0].K[0] = random_mat(4, 3, rng, 10.0);
  m2[0].V[0] = random_mat(4, 3, rng, 10.0);
  Mat q = random_mat(1, 3, rng), k = random_mat(1, 3, rng), v = random_mat(1, 3, rng);
  Mat g = Mat::Constant(1, 4, -1e9);
  recurrent_step(q, k, v, g, m1, s);
  recurrent_step(q, k, v, g, m2, s);
  // Residual carry-over is bounded by the floor gate sigmoid(-10).
  const double floor_alpha = ad::sigmoid(-10.0);
  CHECK((m1[0].K[0] - m2[0].K[0]).cwiseAbs().maxCoeff() <= floor_alpha * 40.0 * (1 + 1e-9));
  CHECK(m1[0].size() == m2[0].size());
}

TEST_CASE("chunk backward matches finite differences") {
  Rng rng(6);
  GsaShape s{2, 3, 4, 3, -2.0};
  auto in = random_inputs(2, 7, s, rng);
  in.g = random_mat(14, 8, rng, 1.5, 0.0);  // includes clamped entries below -2
  Mat dO = random_mat(14, 6, rng);
  auto gr = chunk_backward(in.q, in.k, in.v, in.g, 2, s, dO);
  auto f = [&](const Inputs& x) { return chunk_forward(x.q, x.k, x.v, x.g, 2, s).O.cwiseProduct(dO).sum(); };
  const double eps = 1e-5;
  double worst = 0.0;
  auto check = [&](Mat Inputs::*member, const Mat& analytic) {
    for (Eigen::Index i = 0; i < analytic.size(); ++i) {
      Inputs p = in, m = in;
      (p.*member).data()[i] += eps;
      (m.*member).data()[i] -= eps;
      const double fd = (f(p) - f(m)) / (2 * eps);
      const double an = analytic.data()[i];
      // Entries straddling the clamp have no derivative.
      if (member == &Inputs::g && std::abs(in.g.data()[i] - s.gate_floor) < 2 * eps) continue;
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-6, std::abs(fd) + std::abs(an)));
    }
  };
  check(&Inputs::q, gr.dq);
  check(&Inputs::k, gr.dk);
  check(&Inputs::v, gr.dv);
  check(&Inputs::g, gr.dgate);
  CHECK(worst < 1e-5);
  bool any_clamped = false;
  for (Eigen::Index i = 0; i < in.g.size(); ++i)
    if (in.g.data()[i] < s.gate_floor) {
      any_clamped = true;
      CHECK(gr.dgate.data()[i] == 0.0);
    }
  CHECK(any_clamped);
}

TEST_CASE("shape validation") {
  GsaShape s{1, 2, 2, 100, -10.0};
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.chunk = 64;
  CHECK_NOTHROW(s.validate());
  Mat q(3, 2), g(3, 3);
  q.setZero();
  g.setZero();
  CHECK_THROWS_AS(chunk_forward(q, q, q, g, 1, s), ContractViolation);
}
