#pragma once

// Internal forward/backward machinery shared by the public layer ops, the
// training loop and the database builder. Traces hold every intermediate a
// backward pass needs; there is no graph.

#include <vector>

#include "mqret/model.hpp"

namespace mqret {

struct EncoderTrace {
  Tensor statics;    // [1 x Cs] normalized static covariates (no grad)
  Tensor embed;      // [1 x E]
  Tensor input;      // [1 x T x Cin]
  Tensor proj;       // [1 x T x F]
  std::vector<Tensor> conv_pre;  // [1 x T x F] conv output + bias
  std::vector<Tensor> conv_act;  // tanh(conv_pre)
  std::vector<Tensor> conv_out;  // residual sums
  Tensor enc_pre;    // [1 x T x D]
  Tensor enc;        // tanh(enc_pre); row t is h_{i,t}
};

// Encodes entity `i` for all t in [0, view.target_bound()). When with_grad,
// every trace tensor gets a zeroed grad buffer.
void run_encoder(const Forecaster& model, const PanelView& view, std::size_t entity,
                 bool with_grad, EncoderTrace& trace);

// Consumes trace.enc.grad; accumulates into the encoder parameters.
void encoder_backward(Forecaster& model, EncoderTrace& trace);

struct DecodeTrace {
  Tensor query;     // [1 x D], gradient flows back into the encoder
  Tensor cross;     // [1 x D] or empty
  Tensor xf;        // [H x Cf] normalized future covariates (no grad)
  Tensor zero_hd;   // shared no-grad zero bias
  Tensor global_q;  // [1 x Hd]
  Tensor global_c;  // [1 x Hd] (retrieval variants)
  Tensor pre;       // [H x Hd]
  Tensor act;       // [H x Hd]
  Tensor out;       // [H x Q] in normalized units
};

// Reads trace.query/cross/xf, fills the rest. `use_cross` follows the variant.
void run_decode(const Forecaster& model, DecodeTrace& trace, bool with_grad);

// Consumes trace.out.grad; accumulates into decoder params and query/cross grads.
void decode_backward(Forecaster& model, DecodeTrace& trace);

// rows[j] . w for a stack of row vectors; out is [S x w_cols]
Tensor project_rows(const std::vector<const double*>& rows, std::size_t dim, const Tensor& w);

// w.grad[d][c] += sum_j rows[j][d] * proj.grad[j][c]; flushes a projection's
// gradient into its weight matrix.
void project_rows_backward(const std::vector<const double*>& rows, std::size_t dim,
                           const Tensor& proj, Tensor& w);

// Key/value projections may be shared across many queries (one per time step
// within an optimizer step), so the trace borrows them.
struct AttentionTrace {
  Tensor qp;      // [1 x Da] projected query (owned)
  std::vector<std::uint8_t> mask;
  Tensor scores;  // [S]
  Tensor alphas;  // [S]
  Tensor hcross;  // [D]
};

// Softmax attention over pre-projected rows; masked entries never contribute.
// kp: [S x Da], vp: [S x D].
void attention_core(AttentionTrace& trace, const Tensor& kp, const Tensor& vp, bool with_grad);

// Consumes trace.hcross.grad; accumulates into qp and, when allocated, the
// kp/vp grad buffers.
void attention_core_backward(AttentionTrace& trace, Tensor& kp, Tensor& vp);

}  // namespace mqret
