#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rerank/data.hpp"
#include "rerank/env.hpp"

#include <nlohmann/json_fwd.hpp>

namespace rerank {

// Random comparison set for one request: S uniform length-L permutations of
// the candidates, each valued by the ground-truth environment. Values are
// kept sorted; the permutations themselves can be rematerialized from the
// seed when a test needs to inspect them.
struct ComparisonSet {
  int64_t request_id = -1;
  uint64_t seed = 0;
  int list_len = 0;
  int sample_count = 0;
  std::vector<double> sorted_values;

  // Count of samples with value strictly higher than v.
  int rank_of(double v) const;
};

ComparisonSet sample_comparison_set(const RerankRequest& req, const EnvSpec& env, int s,
                                    int list_len, uint64_t seed);

// Rematerializes the sampled permutations (slot indices) for inspection.
std::vector<std::vector<int>> comparison_permutations(const RerankRequest& req, int s,
                                                      int list_len, uint64_t seed);

// Strict top-K% hit: Rank/S < K/100.
bool hr_hit(double value, const ComparisonSet& cmp, double k_percent);

// Pairwise order consistency: fraction of strictly ordered truth pairs whose
// prediction order agrees (prediction ties count against). Absent when no
// truth pair is strictly ordered.
std::optional<double> r_auc(const std::vector<double>& truth, const std::vector<double>& pred);

// Predicted-mean over true-mean; absent when the true mean is zero.
std::optional<double> pcoc(const std::vector<double>& truth, const std::vector<double>& pred);

double rmse(const std::vector<double>& truth, const std::vector<double>& pred);

struct HrReport {
  std::vector<double> k_percents{1.0, 3.0, 10.0};
  std::vector<double> hr;          // aligned with k_percents
  std::vector<double> half_width;  // 1.96 binomial standard errors
  int n_requests = 0;
  int sample_count = 0;

  nlohmann::json to_json() const;
};

// HR@K% of a generator (any request -> list function) over a request set.
// Comparison sets are sampled from the environment only, never from the
// model under test; per-request seeds derive from `seed` and the request id.
// Parallel across requests with a fixed aggregation order.
HrReport evaluate_hr(const std::vector<RerankRequest>& requests,
                     const std::function<std::vector<int>(const RerankRequest&)>& generate,
                     const EnvSpec& env, int s, int list_len, uint64_t seed, int threads);
// Serial reference for the HR kernel.
HrReport evaluate_hr_serial(const std::vector<RerankRequest>& requests,
                            const std::function<std::vector<int>(const RerankRequest&)>& generate,
                            const EnvSpec& env, int s, int list_len, uint64_t seed);

struct OracleResult {
  std::vector<int> best_list;  // item ids
  double best_value = 0.0;
  int64_t enumerated = 0;
};

// Exact argmax over all ordered length-L selections by full enumeration.
// Ties break toward the lexicographically smaller id sequence. Rejects
// instances whose permutation count exceeds the budget.
OracleResult brute_force_optimum(
    const std::function<double(const std::vector<int>&)>& value_of_list, const RerankRequest& req,
    int list_len, int64_t budget = 1000000);

int64_t permutation_count(int n, int k);

}  // namespace rerank
