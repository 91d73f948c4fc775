#include "rerank/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "rerank/parallel.hpp"
#include "rerank/rng.hpp"

namespace rerank {

using nlohmann::json;

int ComparisonSet::rank_of(double v) const {
  const auto it = std::upper_bound(sorted_values.begin(), sorted_values.end(), v);
  return static_cast<int>(sorted_values.end() - it);
}

ComparisonSet sample_comparison_set(const RerankRequest& req, const EnvSpec& env, int s,
                                    int list_len, uint64_t seed) {
  if (s < 1) throw std::invalid_argument("sample_comparison_set: sample count must be >= 1");
  if (list_len < 1 || list_len > req.n())
    throw std::invalid_argument("sample_comparison_set: bad list length");
  ComparisonSet cmp;
  cmp.request_id = req.request_id;
  cmp.seed = seed;
  cmp.list_len = list_len;
  cmp.sample_count = s;
  cmp.sorted_values.resize(s);
  const EnvSpec::RequestCache cache = env.make_cache(req, list_len);
  Rng rng(seed);
  std::vector<int> slots;
  for (int i = 0; i < s; ++i) {
    slots = rng.sample_without_replacement(req.n(), list_len);
    cmp.sorted_values[i] = env.list_value_cached(cache, slots.data(), list_len);
  }
  std::sort(cmp.sorted_values.begin(), cmp.sorted_values.end());
  return cmp;
}

std::vector<std::vector<int>> comparison_permutations(const RerankRequest& req, int s,
                                                      int list_len, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int>> perms(s);
  for (int i = 0; i < s; ++i) perms[i] = rng.sample_without_replacement(req.n(), list_len);
  return perms;
}

bool hr_hit(double value, const ComparisonSet& cmp, double k_percent) {
  if (cmp.sample_count == 0) throw std::invalid_argument("hr_hit: empty comparison set");
  const double frac = static_cast<double>(cmp.rank_of(value)) / cmp.sample_count;
  return frac < k_percent / 100.0;
}

std::optional<double> r_auc(const std::vector<double>& truth, const std::vector<double>& pred) {
  if (truth.size() != pred.size())
    throw std::invalid_argument("r_auc: size mismatch");
  int64_t ordered = 0, concordant = 0;
  const size_t n = truth.size();
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) {
      if (truth[i] > truth[j]) {
        ++ordered;
        if (pred[i] > pred[j]) ++concordant;
      }
    }
  if (ordered == 0) return std::nullopt;
  return static_cast<double>(concordant) / static_cast<double>(ordered);
}

std::optional<double> pcoc(const std::vector<double>& truth, const std::vector<double>& pred) {
  if (truth.empty() || truth.size() != pred.size())
    throw std::invalid_argument("pcoc: empty or mismatched inputs");
  double ty = 0.0, py = 0.0;
  for (double y : truth) ty += y;
  for (double y : pred) py += y;
  if (ty == 0.0) return std::nullopt;
  return py / ty;
}

double rmse(const std::vector<double>& truth, const std::vector<double>& pred) {
  if (truth.empty() || truth.size() != pred.size())
    throw std::invalid_argument("rmse: empty or mismatched inputs");
  double s = 0.0;
  for (size_t i = 0; i < truth.size(); ++i) {
    const double d = pred[i] - truth[i];
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(truth.size()));
}

namespace {

HrReport evaluate_hr_impl(const std::vector<RerankRequest>& requests,
                          const std::function<std::vector<int>(const RerankRequest&)>& generate,
                          const EnvSpec& env, int s, int list_len, uint64_t seed, int threads) {
  if (requests.empty()) throw std::invalid_argument("evaluate_hr: empty request set");
  HrReport rep;
  rep.n_requests = static_cast<int>(requests.size());
  rep.sample_count = s;
  const int nk = static_cast<int>(rep.k_percents.size());
  // hits[i*nk + k]; integer flags keep the cross-request aggregation exact
  // regardless of thread count.
  std::vector<int> hits(static_cast<size_t>(rep.n_requests) * nk, 0);
  parallel_for(rep.n_requests, threads, [&](int i) {
    const RerankRequest& req = requests[i];
    const uint64_t cmp_seed = derive_seed(seed, "cmpset", static_cast<uint64_t>(req.request_id));
    const ComparisonSet cmp = sample_comparison_set(req, env, s, list_len, cmp_seed);
    const std::vector<int> list = generate(req);
    const double v = env.list_value(req, list);
    for (int k = 0; k < nk; ++k)
      hits[static_cast<size_t>(i) * nk + k] = hr_hit(v, cmp, rep.k_percents[k]) ? 1 : 0;
  });
  rep.hr.resize(nk);
  rep.half_width.resize(nk);
  for (int k = 0; k < nk; ++k) {
    int64_t total = 0;
    for (int i = 0; i < rep.n_requests; ++i) total += hits[static_cast<size_t>(i) * nk + k];
    const double p = static_cast<double>(total) / rep.n_requests;
    rep.hr[k] = p;
    rep.half_width[k] = 1.96 * std::sqrt(std::max(p * (1.0 - p), 1e-12) / rep.n_requests);
  }
  return rep;
}

}  // namespace

HrReport evaluate_hr(const std::vector<RerankRequest>& requests,
                     const std::function<std::vector<int>(const RerankRequest&)>& generate,
                     const EnvSpec& env, int s, int list_len, uint64_t seed, int threads) {
  return evaluate_hr_impl(requests, generate, env, s, list_len, seed, threads);
}

HrReport evaluate_hr_serial(const std::vector<RerankRequest>& requests,
                            const std::function<std::vector<int>(const RerankRequest&)>& generate,
                            const EnvSpec& env, int s, int list_len, uint64_t seed) {
  return evaluate_hr_impl(requests, generate, env, s, list_len, seed, 1);
}

json HrReport::to_json() const {
  json j;
  for (size_t k = 0; k < k_percents.size(); ++k) {
    const std::string key = "hr@" + std::to_string(static_cast<int>(k_percents[k])) + "%";
    j[key] = hr[k];
    j[key + "_half_width"] = half_width[k];
  }
  j["n_requests"] = n_requests;
  j["sample_count"] = sample_count;
  return j;
}

int64_t permutation_count(int n, int k) {
  int64_t p = 1;
  for (int i = 0; i < k; ++i) p *= (n - i);
  return p;
}

namespace {

void enumerate_rec(const RerankRequest& req, int list_len,
                   const std::function<double(const std::vector<int>&)>& value_of_list,
                   std::vector<int>& current, std::vector<char>& used, OracleResult& best) {
  if (static_cast<int>(current.size()) == list_len) {
    ++best.enumerated;
    const double v = value_of_list(current);
    if (best.best_list.empty() || v > best.best_value ||
        (v == best.best_value && current < best.best_list)) {
      best.best_value = v;
      best.best_list = current;
    }
    return;
  }
  for (int s = 0; s < req.n(); ++s) {
    if (used[s]) continue;
    used[s] = 1;
    current.push_back(req.candidates[s].id);
    enumerate_rec(req, list_len, value_of_list, current, used, best);
    current.pop_back();
    used[s] = 0;
  }
}

}  // namespace

OracleResult brute_force_optimum(
    const std::function<double(const std::vector<int>&)>& value_of_list, const RerankRequest& req,
    int list_len, int64_t budget) {
  if (list_len < 1 || list_len > req.n())
    throw std::invalid_argument("brute_force_optimum: bad list length");
  const int64_t count = permutation_count(req.n(), list_len);
  if (count > budget)
    throw std::invalid_argument("brute_force_optimum: instance needs " + std::to_string(count) +
                                " enumerations, budget is " + std::to_string(budget));
  OracleResult best;
  std::vector<int> current;
  std::vector<char> used(req.n(), 0);
  enumerate_rec(req, list_len, value_of_list, current, used, best);
  return best;
}

}  // namespace rerank
