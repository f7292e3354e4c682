#include "mqret/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace mqret {

namespace {

void check_mask_size(const Tensor& scores, const std::vector<std::uint8_t>& mask,
                     const char* op) {
  if (mask.size() != scores.size()) {
    throw Error(ErrorKind::Dimension, std::string(op) + ": mask has " +
                                          std::to_string(mask.size()) + " entries, scores have " +
                                          std::to_string(scores.size()));
  }
  if (scores.rank() == 0 || scores.shape.back() == 0) {
    throw Error(ErrorKind::Dimension, std::string(op) + ": scores must have a nonempty last axis");
  }
}

}  // namespace

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 2) require_rank(x, 2, "linear", "input");
  require_rank(w, 2, "linear", "w");
  require_rank(b, 1, "linear", "b");
  const std::size_t d_in = x.shape.back();
  const std::size_t batch = x.size() / d_in;  // all leading axes fold into the batch
  const std::size_t d_out = w.dim(1);
  if (w.dim(0) != d_in) {
    throw Error(ErrorKind::Dimension, "linear: input " + shape_string(x) + " vs w " +
                                          shape_string(w));
  }
  require_shape(b, {d_out}, "linear", "b");

  std::vector<std::size_t> out_shape = x.shape;
  out_shape.back() = d_out;
  Tensor out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    const double* xi = &x.data[i * d_in];
    double* oi = &out.data[i * d_out];
    for (std::size_t o = 0; o < d_out; ++o) oi[o] = b.data[o];
    for (std::size_t j = 0; j < d_in; ++j) {
      const double xv = xi[j];
      const double* wj = &w.data[j * d_out];
      for (std::size_t o = 0; o < d_out; ++o) oi[o] += xv * wj[o];
    }
  }
  return out;
}

void linear_backward(const Tensor& grad_out, Tensor& x, Tensor& w, Tensor& b) {
  const std::size_t d_in = x.shape.back(), d_out = w.dim(1);
  const std::size_t batch = x.size() / d_in;
  if (grad_out.size() != batch * d_out || grad_out.shape.back() != d_out) {
    throw Error(ErrorKind::Dimension, "linear_backward: grad_out " + shape_string(grad_out) +
                                          " does not match input " + shape_string(x) + " and w " +
                                          shape_string(w));
  }

  if (x.has_grad()) {
    for (std::size_t i = 0; i < batch; ++i) {
      const double* gi = &grad_out.data[i * d_out];
      double* xg = &x.grad[i * d_in];
      for (std::size_t j = 0; j < d_in; ++j) {
        const double* wj = &w.data[j * d_out];
        double acc = 0.0;
        for (std::size_t o = 0; o < d_out; ++o) acc += gi[o] * wj[o];
        xg[j] += acc;
      }
    }
  }
  if (w.has_grad()) {
    for (std::size_t i = 0; i < batch; ++i) {
      const double* xi = &x.data[i * d_in];
      const double* gi = &grad_out.data[i * d_out];
      for (std::size_t j = 0; j < d_in; ++j) {
        const double xv = xi[j];
        double* wg = &w.grad[j * d_out];
        for (std::size_t o = 0; o < d_out; ++o) wg[o] += xv * gi[o];
      }
    }
  }
  if (b.has_grad()) {
    for (std::size_t i = 0; i < batch; ++i) {
      const double* gi = &grad_out.data[i * d_out];
      for (std::size_t o = 0; o < d_out; ++o) b.grad[o] += gi[o];
    }
  }
}

Tensor causal_conv1d(const Tensor& x, const Tensor& kernel, int dilation) {
  require_rank(x, 3, "causal_conv1d", "input");
  require_rank(kernel, 3, "causal_conv1d", "kernel");
  if (dilation < 1) {
    throw Error(ErrorKind::Parameter,
                "causal_conv1d: dilation must be >= 1, got " + std::to_string(dilation));
  }
  const std::size_t batch = x.dim(0), steps = x.dim(1), d_in = x.dim(2);
  const std::size_t taps = kernel.dim(0), d_out = kernel.dim(2);
  if (kernel.dim(1) != d_in) {
    throw Error(ErrorKind::Dimension, "causal_conv1d: input " + shape_string(x) + " vs kernel " +
                                          shape_string(kernel));
  }

  Tensor out({batch, steps, d_out});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t t = 0; t < steps; ++t) {
      double* ot = &out.data[(bi * steps + t) * d_out];
      for (std::size_t tap = 0; tap < taps; ++tap) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) -
                                   static_cast<std::ptrdiff_t>(tap) * dilation;
        if (src < 0) continue;  // left padding
        const double* xs = &x.data[(bi * steps + static_cast<std::size_t>(src)) * d_in];
        const double* kt = &kernel.data[tap * d_in * d_out];
        for (std::size_t j = 0; j < d_in; ++j) {
          const double xv = xs[j];
          const double* kj = &kt[j * d_out];
          for (std::size_t o = 0; o < d_out; ++o) ot[o] += xv * kj[o];
        }
      }
    }
  }
  return out;
}

void causal_conv1d_backward(const Tensor& grad_out, Tensor& x, Tensor& kernel, int dilation) {
  const std::size_t batch = x.dim(0), steps = x.dim(1), d_in = x.dim(2);
  const std::size_t taps = kernel.dim(0), d_out = kernel.dim(2);
  require_shape(grad_out, {batch, steps, d_out}, "causal_conv1d_backward", "grad_out");

  for (std::size_t bi = 0; bi < batch; ++bi) {
    for (std::size_t t = 0; t < steps; ++t) {
      const double* gt = &grad_out.data[(bi * steps + t) * d_out];
      for (std::size_t tap = 0; tap < taps; ++tap) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) -
                                   static_cast<std::ptrdiff_t>(tap) * dilation;
        if (src < 0) continue;
        const std::size_t xoff = (bi * steps + static_cast<std::size_t>(src)) * d_in;
        if (kernel.has_grad()) {
          const double* xs = &x.data[xoff];
          double* kg = &kernel.grad[tap * d_in * d_out];
          for (std::size_t j = 0; j < d_in; ++j) {
            const double xv = xs[j];
            double* kgj = &kg[j * d_out];
            for (std::size_t o = 0; o < d_out; ++o) kgj[o] += xv * gt[o];
          }
        }
        if (x.has_grad()) {
          double* xg = &x.grad[xoff];
          const double* kt = &kernel.data[tap * d_in * d_out];
          for (std::size_t j = 0; j < d_in; ++j) {
            const double* kj = &kt[j * d_out];
            double acc = 0.0;
            for (std::size_t o = 0; o < d_out; ++o) acc += kj[o] * gt[o];
            xg[j] += acc;
          }
        }
      }
    }
  }
}

Tensor masked_softmax(const Tensor& scores, const std::vector<std::uint8_t>& mask) {
  check_mask_size(scores, mask, "masked_softmax");
  const std::size_t width = scores.shape.back();
  const std::size_t rows = scores.size() / width;

  Tensor out(scores.shape);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* s = &scores.data[r * width];
    const std::uint8_t* m = &mask[r * width];
    double* o = &out.data[r * width];

    double hi = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < width; ++j) {
      if (m[j] && s[j] > hi) hi = s[j];
    }
    if (hi == -std::numeric_limits<double>::infinity()) {
      throw Error(ErrorKind::Data,
                  "masked_softmax: row " + std::to_string(r) + " is fully masked");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      if (m[j]) {
        o[j] = std::exp(s[j] - hi);
        total += o[j];
      } else {
        o[j] = 0.0;
      }
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < width; ++j) {
      if (m[j]) o[j] *= inv;
    }
  }
  return out;
}

void masked_softmax_backward(const Tensor& grad_out, const Tensor& out,
                             const std::vector<std::uint8_t>& mask, Tensor& scores) {
  check_mask_size(scores, mask, "masked_softmax_backward");
  if (!scores.has_grad()) return;
  const std::size_t width = scores.shape.back();
  const std::size_t rows = scores.size() / width;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* g = &grad_out.data[r * width];
    const double* y = &out.data[r * width];
    const std::uint8_t* m = &mask[r * width];
    double* sg = &scores.grad[r * width];
    double dot = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      if (m[j]) dot += g[j] * y[j];
    }
    for (std::size_t j = 0; j < width; ++j) {
      if (m[j]) sg[j] += y[j] * (g[j] - dot);
    }
  }
}

double attention_score(const Tensor& q, const Tensor& k, const Tensor& wq, const Tensor& wk) {
  require_rank(q, 1, "attention_score", "q");
  require_rank(k, 1, "attention_score", "k");
  require_rank(wq, 2, "attention_score", "wq");
  require_rank(wk, 2, "attention_score", "wk");
  const std::size_t d = q.dim(0), da = wq.dim(1);
  require_shape(k, {d}, "attention_score", "k");
  require_shape(wq, {d, da}, "attention_score", "wq");
  require_shape(wk, {d, da}, "attention_score", "wk");

  double score = 0.0;
  for (std::size_t a = 0; a < da; ++a) {
    double qp = 0.0, kp = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      qp += q.data[j] * wq.data[j * da + a];
      kp += k.data[j] * wk.data[j * da + a];
    }
    score += qp * kp;
  }
  return score / std::sqrt(static_cast<double>(da));
}

void attention_score_backward(double grad, Tensor& q, Tensor& k, Tensor& wq, Tensor& wk) {
  const std::size_t d = q.dim(0), da = wq.dim(1);
  const double scale = grad / std::sqrt(static_cast<double>(da));
  for (std::size_t a = 0; a < da; ++a) {
    double qp = 0.0, kp = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      qp += q.data[j] * wq.data[j * da + a];
      kp += k.data[j] * wk.data[j * da + a];
    }
    const double dqp = scale * kp;
    const double dkp = scale * qp;
    for (std::size_t j = 0; j < d; ++j) {
      if (q.has_grad()) q.grad[j] += dqp * wq.data[j * da + a];
      if (wq.has_grad()) wq.grad[j * da + a] += dqp * q.data[j];
      if (k.has_grad()) k.grad[j] += dkp * wk.data[j * da + a];
      if (wk.has_grad()) wk.grad[j * da + a] += dkp * k.data[j];
    }
  }
}

double quantile_loss(const Tensor& y, const Tensor& yhat, double q) {
  if (!(q > 0.0 && q < 1.0)) {
    throw Error(ErrorKind::Parameter,
                "quantile_loss: q must lie in (0,1), got " + std::to_string(q));
  }
  if (y.shape != yhat.shape) {
    throw Error(ErrorKind::Dimension, "quantile_loss: y " + shape_string(y) + " vs yhat " +
                                          shape_string(yhat));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    total += pinball(y.data[i], yhat.data[i], q);
  }
  return total;
}

void quantile_loss_backward(double grad, const Tensor& y, Tensor& yhat, double q) {
  if (!yhat.has_grad()) return;
  for (std::size_t i = 0; i < y.size(); ++i) {
    yhat.grad[i] += grad * pinball_grad_yhat(y.data[i], yhat.data[i], q);
  }
}

Tensor tanh_forward(const Tensor& x) {
  Tensor out(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = std::tanh(x.data[i]);
  return out;
}

void tanh_backward(const Tensor& grad_out, const Tensor& out, Tensor& x) {
  if (!x.has_grad()) return;
  for (std::size_t i = 0; i < x.size(); ++i) {
    x.grad[i] += grad_out.data[i] * (1.0 - out.data[i] * out.data[i]);
  }
}

}  // namespace mqret
