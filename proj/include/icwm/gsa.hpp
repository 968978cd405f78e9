#pragma once

#include <cstddef>
#include <vector>

#include "icwm/autodiff.hpp"

namespace icwm::gsa {

using ad::Mat;

struct GsaShape {
  std::size_t heads = 4;
  std::size_t head_dim = 16;
  std::size_t slots = 32;
  std::size_t chunk = 64;
  /// Gate logits are clamped from below so that within-chunk cumulative
  /// decays stay inside double range (chunk * |log sigmoid(floor)| < 700).
  double gate_floor = -10.0;

  std::size_t width() const { return heads * head_dim; }
  std::size_t gate_width() const { return heads * slots; }
  void validate() const;
};

/// Per-sequence slot memory: for each head a key-slot and a value-slot
/// matrix, both slots x head_dim.
struct SlotMemory {
  std::vector<Mat> K;
  std::vector<Mat> V;

  static SlotMemory zeros(const GsaShape& shape);
  std::size_t size() const;
  bool operator==(const SlotMemory& o) const { return K == o.K && V == o.V; }
};

/// Sequences are stacked row-wise: sequence b occupies rows [b*T, (b+1)*T).
/// q, k, v are N x (heads*head_dim); gate is N x (heads*slots) logits.
struct ChunkOutput {
  Mat O;
  std::vector<SlotMemory> final_memory;
};

ChunkOutput chunk_forward(const Mat& q, const Mat& k, const Mat& v, const Mat& gate, std::size_t batch,
                          const GsaShape& shape, const std::vector<SlotMemory>* initial = nullptr);

struct ChunkGrads {
  Mat dq, dk, dv, dgate;
};

/// Gradients of <dO, O> with zero initial memory. Chunk-start states are
/// recomputed and the within-chunk quantities rebuilt during the sweep.
ChunkGrads chunk_backward(const Mat& q, const Mat& k, const Mat& v, const Mat& gate, std::size_t batch,
                          const GsaShape& shape, const Mat& dO);

/// One recurrent step for a batch of sequences (one row each). Updates
/// `memory` in place and returns the readout rows.
Mat recurrent_step(const Mat& q, const Mat& k, const Mat& v, const Mat& gate,
                   std::vector<SlotMemory>& memory, const GsaShape& shape);

/// Chunkwise gated slot attention as a tape op (zero initial memory).
ad::Var attention(ad::Graph& g, ad::Var q, ad::Var k, ad::Var v, ad::Var gate, std::size_t batch,
                  const GsaShape& shape);

}  // namespace icwm::gsa
