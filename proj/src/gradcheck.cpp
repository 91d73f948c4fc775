#include "rerank/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "rerank/rng.hpp"

namespace rerank {

GradCheckResult grad_check(const std::function<double(const ParameterSet&)>& loss_fn,
                           ParameterSet& params, const GradMap& analytic, double eps,
                           int max_per_param, uint64_t sample_seed, double min_signal,
                           double zero_abs_tol) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
  Rng rng(sample_seed);
  GradCheckResult res;
  for (int pi = 0; pi < params.count(); ++pi) {
    Tensor& w = params.tensor(pi);
    const int64_t n = w.numel();
    std::vector<int64_t> picks;
    if (n <= max_per_param) {
      for (int64_t j = 0; j < n; ++j) picks.push_back(j);
    } else {
      for (int k = 0; k < max_per_param; ++k) picks.push_back(rng.uniform_int(n));
    }
    for (int64_t j : picks) {
      const double saved = w.v[j];
      w.v[j] = saved + eps;
      const double up = loss_fn(params);
      w.v[j] = saved - eps;
      const double down = loss_fn(params);
      w.v[j] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw std::runtime_error("grad_check: non-finite loss when perturbing '" +
                                 params.names()[pi] + "'");
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.grads[pi].v[j];
      ++res.checked;
      if (std::fabs(a) < min_signal) {
        if (std::fabs(a - numeric) > zero_abs_tol)
          throw std::runtime_error("grad_check: '" + params.names()[pi] +
                                   "' has a near-zero analytic gradient but numeric " +
                                   std::to_string(numeric));
        continue;
      }
      const double rel = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = params.names()[pi];
        res.worst_index = static_cast<int>(j);
      }
    }
  }
  return res;
}

}  // namespace rerank
