#pragma once

#include <functional>
#include <string>

#include "rerank/params.hpp"

namespace rerank {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  int worst_index = -1;
  int checked = 0;
};

// Compares analytic gradients against central finite differences at 64-bit
// precision. `loss_fn` must rebuild the loss from the current parameter
// values on every call. Checks up to `max_per_param` entries per tensor
// (seeded subsample), all entries when the tensor is small enough.
// Relative error: |a - n| / max(1e-8, |a| + |n|).
//
// Entries whose analytic gradient sits below `min_signal` are structurally
// zero (e.g. attention key biases, which softmax shift-invariance kills);
// central differences only resolve them to roundoff, so they are held to the
// absolute tolerance `zero_abs_tol` instead of the relative one.
GradCheckResult grad_check(const std::function<double(const ParameterSet&)>& loss_fn,
                           ParameterSet& params, const GradMap& analytic, double eps,
                           int max_per_param = 24, uint64_t sample_seed = 17,
                           double min_signal = 1e-6, double zero_abs_tol = 1e-6);

}  // namespace rerank
