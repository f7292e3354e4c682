#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mqret/adam.hpp"

namespace mqret {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central finite differences against analytic gradients.
//
// `loss` evaluates the scalar objective at the current parameter values
// without touching gradients; `backprop` zeroes gradients and runs one
// forward+backward pass, leaving analytic gradients in each parameter's
// grad buffer. Relative error uses |a - b| / max(|a|, |b|, 1).
GradCheckReport grad_check(const std::function<double()>& loss,
                           const std::function<void()>& backprop,
                           std::vector<NamedTensor*> params, double step = 1e-5);

}  // namespace mqret
