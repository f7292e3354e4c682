#include "mqret/grad_check.hpp"

#include <cmath>

namespace mqret {

GradCheckReport grad_check(const std::function<double()>& loss,
                           const std::function<void()>& backprop,
                           std::vector<NamedTensor*> params, double step) {
  backprop();
  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t p = 0; p < params.size(); ++p) {
    analytic[p] = params[p]->value.grad;
    if (analytic[p].size() != params[p]->value.size()) {
      throw Error(ErrorKind::Training, "grad_check: parameter '" + params[p]->name +
                                           "' has no gradient after backprop");
    }
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p]->value;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t.data[i];
      t.data[i] = saved + step;
      const double hi = loss();
      t.data[i] = saved - step;
      const double lo = loss();
      t.data[i] = saved;

      const double numeric = (hi - lo) / (2.0 * step);
      const double a = analytic[p][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1.0});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[p]->name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace mqret
