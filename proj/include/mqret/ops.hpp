#pragma once

#include <cstdint>
#include <vector>

#include "mqret/tensor.hpp"

namespace mqret {

// Forward/backward pairs for every layer the forecaster needs. There is no
// autodiff graph: callers invoke the backward functions in reverse
// composition order. Backward functions accumulate into the grad buffer of
// any operand that has one allocated and leave the others untouched, which
// is how frozen inputs (database rows) stay frozen.

// out = x . w + b, x: [B x Din], w: [Din x Dout], b: [Dout]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
void linear_backward(const Tensor& grad_out, Tensor& x, Tensor& w, Tensor& b);

// Causal dilated 1-d convolution. x: [B x T x Din], kernel: [K x Din x Dout].
// Tap j reads the input at time t - j*dilation; times before 0 are zero padding,
// so the output at time t depends only on inputs at times <= t.
Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, int dilation);
void causal_conv1d_backward(const Tensor& grad_out, Tensor& x, Tensor& kernel, int dilation);

// Row-wise softmax over the last axis with a keep-mask (1 = attend, 0 = drop).
// Masked entries of the output are exactly zero. A fully masked row is an error.
Tensor masked_softmax(const Tensor& scores, const std::vector<std::uint8_t>& mask);
void masked_softmax_backward(const Tensor& grad_out, const Tensor& out,
                             const std::vector<std::uint8_t>& mask, Tensor& scores);

// Bilinear attention score (q . wq) . (k . wk) / sqrt(Da).
// q: [D], k: [D], wq: [D x Da], wk: [D x Da].
double attention_score(const Tensor& q, const Tensor& k, const Tensor& wq, const Tensor& wk);
void attention_score_backward(double grad, Tensor& q, Tensor& k, Tensor& wq, Tensor& wk);

// Pinball loss q*(y-yhat)_+ + (1-q)*(yhat-y)_+, summed over all elements.
// The subgradient at y == yhat is the q-side value (-q).
double quantile_loss(const Tensor& y, const Tensor& yhat, double q);
void quantile_loss_backward(double grad, const Tensor& y, Tensor& yhat, double q);

// scalar pinball loss; same formula the tensor op sums over
inline double pinball(double y, double yhat, double q) {
  const double diff = y - yhat;
  return diff > 0.0 ? q * diff : (q - 1.0) * diff;
}

inline double pinball_grad_yhat(double y, double yhat, double q) {
  return yhat > y ? (1.0 - q) : -q;
}

// y = tanh(x) elementwise; backward takes the forward output.
Tensor tanh_forward(const Tensor& x);
void tanh_backward(const Tensor& grad_out, const Tensor& out, Tensor& x);

}  // namespace mqret
