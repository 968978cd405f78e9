#include "icwm/gsa.hpp"

#include <algorithm>
#include <cmath>

#include "icwm/common.hpp"

namespace icwm::gsa {

namespace {

using Eigen::Index;
using Arr = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat lower_mask(Index c) {
  Mat L = Mat::Zero(c, c);
  for (Index i = 0; i < c; ++i) L.row(i).head(i + 1).setOnes();
  return L;
}

void softmax_rows(Mat& S) {
  for (Index i = 0; i < S.rows(); ++i) {
    const double m = S.row(i).maxCoeff();
    S.row(i) = (S.row(i).array() - m).exp();
    S.row(i) /= S.row(i).sum();
  }
}

// Within-chunk quantities for one (sequence, head, chunk).
struct ChunkState {
  Mat Q, K, V;        // c x dh (Q already scaled)
  Mat alpha, W, LA;   // c x m
  Mat A, Ainv, What;  // c x m
  Mat GL;             // c x c
  Mat U, P, PA;       // c x m
  Mat R;              // c x c
  std::vector<char> clamped;
};

void build_chunk(ChunkState& cs, const Mat& q, const Mat& k, const Mat& v, const Mat& gate, Index row0,
                 Index c, std::size_t h, const GsaShape& shape, const Mat& K0, const Mat& L) {
  const Index dh = static_cast<Index>(shape.head_dim);
  const Index m = static_cast<Index>(shape.slots);
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.head_dim));
  cs.Q = q.block(row0, static_cast<Index>(h) * dh, c, dh) * scale;
  cs.K = k.block(row0, static_cast<Index>(h) * dh, c, dh);
  cs.V = v.block(row0, static_cast<Index>(h) * dh, c, dh);
  const Mat x = gate.block(row0, static_cast<Index>(h) * m, c, m);
  cs.clamped.resize(static_cast<std::size_t>(c * m));
  for (Index i = 0; i < x.size(); ++i) cs.clamped[static_cast<std::size_t>(i)] = x.data()[i] < shape.gate_floor;
  const auto xc = x.array().max(shape.gate_floor);
  const Arr e = (-xc.abs()).exp();
  const Arr inv = (1.0 + e).inverse();
  const Arr l1p = e.log1p();
  const auto pos = xc >= 0.0;
  cs.alpha = pos.select(inv, e * inv);
  cs.W = pos.select(e * inv, inv);
  cs.LA = pos.select(-l1p, xc - l1p);
  Mat B = cs.LA;
  for (Index i = 1; i < c; ++i) B.row(i) += B.row(i - 1);
  cs.A = B.array().exp();
  cs.Ainv = cs.A.cwiseInverse();
  cs.What = cs.Ainv.cwiseProduct(cs.W);
  const Mat Lc = L.topLeftCorner(c, c);
  cs.GL = (cs.Q * cs.K.transpose()).cwiseProduct(Lc);
  cs.U = cs.Q * K0.transpose() + cs.GL * cs.What;
  cs.P = cs.A.cwiseProduct(cs.U);
  softmax_rows(cs.P);
  cs.PA = cs.P.cwiseProduct(cs.A);
  cs.R = (cs.PA * cs.What.transpose()).cwiseProduct(Lc);
}

void advance_memory(const ChunkState& cs, Mat& K0, Mat& V0) {
  const auto a_last = cs.A.row(cs.A.rows() - 1).transpose();
  K0 = (a_last.asDiagonal() * (K0 + cs.What.transpose() * cs.K)).eval();
  V0 = (a_last.asDiagonal() * (V0 + cs.What.transpose() * cs.V)).eval();
}

void check_inputs(const Mat& q, const Mat& k, const Mat& v, const Mat& gate, std::size_t batch,
                  const GsaShape& shape) {
  shape.validate();
  ICWM_REQUIRE(batch > 0 && q.rows() % static_cast<Index>(batch) == 0, "gsa: rows not divisible by batch");
  const Index w = static_cast<Index>(shape.width());
  ICWM_REQUIRE(q.cols() == w && k.cols() == w && v.cols() == w, "gsa: q/k/v width mismatch");
  ICWM_REQUIRE(gate.cols() == static_cast<Index>(shape.gate_width()), "gsa: gate width mismatch");
  ICWM_REQUIRE(k.rows() == q.rows() && v.rows() == q.rows() && gate.rows() == q.rows(), "gsa: row mismatch");
  ICWM_REQUIRE(q.allFinite() && k.allFinite() && v.allFinite() && gate.allFinite(), "gsa: non-finite input");
}

}  // namespace

void GsaShape::validate() const {
  if (heads == 0 || head_dim == 0 || slots == 0 || chunk == 0) throw ConfigError("gsa: sizes must be positive");
  if (static_cast<double>(chunk) * -ad::log_sigmoid(gate_floor) >= 700.0)
    throw ConfigError("gsa: chunk * |log sigmoid(gate_floor)| must stay below 700");
}

SlotMemory SlotMemory::zeros(const GsaShape& shape) {
  SlotMemory s;
  const auto m = static_cast<Index>(shape.slots), dh = static_cast<Index>(shape.head_dim);
  s.K.assign(shape.heads, Mat::Zero(m, dh));
  s.V.assign(shape.heads, Mat::Zero(m, dh));
  return s;
}

std::size_t SlotMemory::size() const {
  std::size_t n = 0;
  for (const auto& x : K) n += static_cast<std::size_t>(x.size());
  for (const auto& x : V) n += static_cast<std::size_t>(x.size());
  return n;
}

ChunkOutput chunk_forward(const Mat& q, const Mat& k, const Mat& v, const Mat& gate, std::size_t batch,
                          const GsaShape& shape, const std::vector<SlotMemory>* initial) {
  check_inputs(q, k, v, gate, batch, shape);
  const Index T = q.rows() / static_cast<Index>(batch);
  const Index C = static_cast<Index>(shape.chunk);
  const Index dh = static_cast<Index>(shape.head_dim);
  const Mat L = lower_mask(C);
  ChunkOutput out;
  out.O = Mat::Zero(q.rows(), q.cols());
  out.final_memory.assign(batch, SlotMemory::zeros(shape));
  if (initial) {
    ICWM_REQUIRE(initial->size() == batch, "gsa: initial memory batch mismatch");
    out.final_memory = *initial;
  }
  ChunkState cs;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < shape.heads; ++h) {
      Mat& K0 = out.final_memory[b].K[h];
      Mat& V0 = out.final_memory[b].V[h];
      for (Index t0 = 0; t0 < T; t0 += C) {
        const Index c = std::min(C, T - t0);
        const Index row0 = static_cast<Index>(b) * T + t0;
        build_chunk(cs, q, k, v, gate, row0, c, h, shape, K0, L);
        out.O.block(row0, static_cast<Index>(h) * dh, c, dh) = cs.PA * V0 + cs.R * cs.V;
        advance_memory(cs, K0, V0);
      }
    }
  }
  return out;
}

ChunkGrads chunk_backward(const Mat& q, const Mat& k, const Mat& v, const Mat& gate, std::size_t batch,
                          const GsaShape& shape, const Mat& dO) {
  check_inputs(q, k, v, gate, batch, shape);
  ICWM_REQUIRE(dO.rows() == q.rows() && dO.cols() == q.cols(), "gsa backward: dO shape mismatch");
  const Index T = q.rows() / static_cast<Index>(batch);
  const Index C = static_cast<Index>(shape.chunk);
  const Index dh = static_cast<Index>(shape.head_dim);
  const Index m = static_cast<Index>(shape.slots);
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.head_dim));
  const Mat L = lower_mask(C);
  const Index n_chunks = (T + C - 1) / C;

  ChunkGrads gr;
  gr.dq = Mat::Zero(q.rows(), q.cols());
  gr.dk = Mat::Zero(k.rows(), k.cols());
  gr.dv = Mat::Zero(v.rows(), v.cols());
  gr.dgate = Mat::Zero(gate.rows(), gate.cols());

  ChunkState cs;
  std::vector<Mat> K_start(static_cast<std::size_t>(n_chunks)), V_start(static_cast<std::size_t>(n_chunks));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < shape.heads; ++h) {
      const Index col = static_cast<Index>(h) * dh;
      const Index gcol = static_cast<Index>(h) * m;
      Mat K0 = Mat::Zero(m, dh), V0 = Mat::Zero(m, dh);
      for (Index ci = 0; ci < n_chunks; ++ci) {
        const Index t0 = ci * C;
        const Index c = std::min(C, T - t0);
        K_start[static_cast<std::size_t>(ci)] = K0;
        V_start[static_cast<std::size_t>(ci)] = V0;
        if (ci + 1 < n_chunks) {
          build_chunk(cs, q, k, v, gate, static_cast<Index>(b) * T + t0, c, h, shape, K0, L);
          advance_memory(cs, K0, V0);
        }
      }

      Mat dKe = Mat::Zero(m, dh), dVe = Mat::Zero(m, dh);
      for (Index ci = n_chunks; ci-- > 0;) {
        const Index t0 = ci * C;
        const Index c = std::min(C, T - t0);
        const Index row0 = static_cast<Index>(b) * T + t0;
        const Mat& K0c = K_start[static_cast<std::size_t>(ci)];
        const Mat& V0c = V_start[static_cast<std::size_t>(ci)];
        build_chunk(cs, q, k, v, gate, row0, c, h, shape, K0c, L);
        const Mat Lc = L.topLeftCorner(c, c);
        const Mat dOc = dO.block(row0, col, c, dh);

        Mat dQ = Mat::Zero(c, dh), dK = Mat::Zero(c, dh), dV = Mat::Zero(c, dh);
        Mat dWhat = Mat::Zero(c, m), dA = Mat::Zero(c, m);
        Mat dK0 = Mat::Zero(m, dh), dV0 = Mat::Zero(m, dh);

        // End-of-chunk memory: diag(a_last) (X0 + What^T X).
        const Eigen::VectorXd a_last = cs.A.row(c - 1).transpose();
        const Mat Ktil = K0c + cs.What.transpose() * cs.K;
        const Mat Vtil = V0c + cs.What.transpose() * cs.V;
        const Eigen::VectorXd da_last =
            dKe.cwiseProduct(Ktil).rowwise().sum() + dVe.cwiseProduct(Vtil).rowwise().sum();
        const Mat dKtil = a_last.asDiagonal() * dKe;
        const Mat dVtil = a_last.asDiagonal() * dVe;
        dK0 += dKtil;
        dV0 += dVtil;
        dWhat += cs.K * dKtil.transpose() + cs.V * dVtil.transpose();
        dK += cs.What * dKtil;
        dV += cs.What * dVtil;

        // O = PA V0 + R V.
        Mat dPA = dOc * V0c.transpose();
        dV0 += cs.PA.transpose() * dOc;
        const Mat dR = (dOc * cs.V.transpose()).cwiseProduct(Lc);
        dV += cs.R.transpose() * dOc;
        // R = (PA What^T) .* L.
        dPA += dR * cs.What;
        dWhat += dR.transpose() * cs.PA;
        // PA = P .* A.
        const Mat dP = dPA.cwiseProduct(cs.A);
        dA += dPA.cwiseProduct(cs.P);
        // P = softmax(S).
        const Eigen::VectorXd rs = dP.cwiseProduct(cs.P).rowwise().sum();
        const Mat dS = cs.P.cwiseProduct((dP.colwise() - rs));
        // S = A .* U.
        dA += dS.cwiseProduct(cs.U);
        const Mat dU = dS.cwiseProduct(cs.A);
        // U = Q K0^T + GL What.
        dQ += dU * K0c;
        dK0 += dU.transpose() * cs.Q;
        const Mat dG = (dU * cs.What.transpose()).cwiseProduct(Lc);
        dWhat += cs.GL.transpose() * dU;
        dQ += dG * cs.K;
        dK += dG.transpose() * cs.Q;
        // What = Ainv .* W, A = exp(B), Ainv = exp(-B), B = cumsum(LA).
        const Mat dW = dWhat.cwiseProduct(cs.Ainv);
        const Mat dAinv = dWhat.cwiseProduct(cs.W);
        dA.row(c - 1) += da_last.transpose();
        Mat dB = dA.cwiseProduct(cs.A) - dAinv.cwiseProduct(cs.Ainv);
        for (Index i = c - 1; i-- > 0;) dB.row(i) += dB.row(i + 1);
        // LA = log sigmoid(g), W = sigmoid(-g).
        Mat dg = (dB - dW.cwiseProduct(cs.alpha)).cwiseProduct(cs.W);
        for (Index i = 0; i < c; ++i)
          for (Index j = 0; j < m; ++j)
            if (cs.clamped[static_cast<std::size_t>(i * m + j)]) dg(i, j) = 0.0;

        gr.dq.block(row0, col, c, dh) += dQ * scale;
        gr.dk.block(row0, col, c, dh) += dK;
        gr.dv.block(row0, col, c, dh) += dV;
        gr.dgate.block(row0, gcol, c, m) += dg;
        dKe = dK0;
        dVe = dV0;
      }
    }
  }
  return gr;
}

Mat recurrent_step(const Mat& q, const Mat& k, const Mat& v, const Mat& gate,
                   std::vector<SlotMemory>& memory, const GsaShape& shape) {
  check_inputs(q, k, v, gate, static_cast<std::size_t>(q.rows()), shape);
  ICWM_REQUIRE(memory.size() == static_cast<std::size_t>(q.rows()), "gsa step: memory batch mismatch");
  const Index dh = static_cast<Index>(shape.head_dim);
  const Index m = static_cast<Index>(shape.slots);
  const double scale = 1.0 / std::sqrt(static_cast<double>(shape.head_dim));
  Mat O(q.rows(), q.cols());
  Eigen::VectorXd alpha(m), w(m);
  for (Index b = 0; b < q.rows(); ++b) {
    for (std::size_t h = 0; h < shape.heads; ++h) {
      const Index col = static_cast<Index>(h) * dh;
      for (Index j = 0; j < m; ++j) {
        const double x = std::max(gate(b, static_cast<Index>(h) * m + j), shape.gate_floor);
        alpha(j) = ad::sigmoid(x);
        w(j) = ad::sigmoid(-x);
      }
      Mat& Ks = memory[static_cast<std::size_t>(b)].K[h];
      Mat& Vs = memory[static_cast<std::size_t>(b)].V[h];
      Ks = (alpha.asDiagonal() * Ks).eval() + w * k.row(b).segment(col, dh);
      Vs = (alpha.asDiagonal() * Vs).eval() + w * v.row(b).segment(col, dh);
      Eigen::VectorXd s = Ks * (q.row(b).segment(col, dh).transpose() * scale);
      s = (s.array() - s.maxCoeff()).exp();
      s /= s.sum();
      O.row(b).segment(col, dh) = (Vs.transpose() * s).transpose();
    }
  }
  return O;
}

ad::Var attention(ad::Graph& g, ad::Var q, ad::Var k, ad::Var v, ad::Var gate, std::size_t batch,
                  const GsaShape& shape) {
  auto out = chunk_forward(g.value(q), g.value(k), g.value(v), g.value(gate), batch, shape);
  const ad::Var in[] = {q, k, v, gate};
  return g.custom(std::move(out.O), in, [q, k, v, gate, batch, shape](ad::Graph& gr, const Mat& dO) {
    auto d = chunk_backward(gr.value(q), gr.value(k), gr.value(v), gr.value(gate), batch, shape, dO);
    gr.accumulate(q, d.dq);
    gr.accumulate(k, d.dk);
    gr.accumulate(v, d.dv);
    gr.accumulate(gate, d.dgate);
  });
}

}  // namespace icwm::gsa
