#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mqret/tensor.hpp"

namespace mqret {

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Per-parameter first/second moment buffers plus the shared step counter.
/// Moment buffers are created lazily on the first step and stay congruent
/// with their parameter from then on.
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

// One bias-corrected ADAM update over a fixed parameter list. Reads each
// parameter's grad buffer (which must be allocated) and updates data in
// place. Deterministic: identical inputs give bitwise identical outputs.
// A non-finite gradient aborts with a Training error naming the parameter.
void adam_step(std::vector<NamedTensor*>& params, AdamState& state);

}  // namespace mqret
