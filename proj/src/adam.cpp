#include "mqret/adam.hpp"

#include <cmath>

namespace mqret {

void adam_step(std::vector<NamedTensor*>& params, AdamState& state) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      state.m[p].assign(params[p]->value.size(), 0.0);
      state.v[p].assign(params[p]->value.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw Error(ErrorKind::Parameter, "adam_step: state tracks " +
                                          std::to_string(state.m.size()) + " parameters, got " +
                                          std::to_string(params.size()));
  }

  state.step += 1;
  const AdamConfig& c = state.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));

  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p]->value;
    if (!t.has_grad()) {
      throw Error(ErrorKind::Training,
                  "adam_step: parameter '" + params[p]->name + "' has no gradient buffer");
    }
    if (state.m[p].size() != t.size()) {
      throw Error(ErrorKind::Dimension, "adam_step: moment buffer for '" + params[p]->name +
                                            "' is not shape-congruent with the parameter");
    }
    std::vector<double>& m = state.m[p];
    std::vector<double>& v = state.v[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double g = t.grad[i];
      if (!std::isfinite(g)) {
        throw Error(ErrorKind::Training, "adam_step: non-finite gradient in parameter '" +
                                             params[p]->name + "' at element " +
                                             std::to_string(i));
      }
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      t.data[i] -= c.lr * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

}  // namespace mqret
