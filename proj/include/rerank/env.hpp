#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rerank/data.hpp"

#include <nlohmann/json_fwd.hpp>

namespace rerank {

struct EnvConfig {
  int n_items = 200;
  int n_categories = 8;
  int latent_dim = 4;
  double decay_base = 0.85;      // multiplicative position decay
  double base_bias = -1.0;
  double affinity_scale = 0.5;   // user-item latent dot product
  double context_scale = 0.4;
  double interact_scale = 0.8;   // adjacent-category substitution/complement
  double score_noise = 0.05;     // noise on the upstream ranking score
};

// Ground-truth click environment. All latent parameters are regenerated
// deterministically from the seed, so persisting (seed, config) reproduces
// the environment exactly.
//
// Click probability at 1-based position t of list l:
//   p_t = decay^(t-1) * sigmoid(quality(item_t) + interact(cat_{t-1}, cat_t))
// where quality covers base attractiveness, user-item affinity and the
// context term. Clicks are independent Bernoulli draws given the list, so
// the value of a list, expected total clicks, is the exact sum of p_t and
// depends on item order through the decay and adjacency terms.
class EnvSpec {
 public:
  EnvSpec(uint64_t seed, EnvConfig cfg);

  const EnvConfig& config() const { return cfg_; }
  uint64_t seed() const { return seed_; }

  // Position-independent quality logit of one candidate for this request.
  double quality_logit(const RerankRequest& req, const Item& item) const;

  // p(click at position pos | list prefix); pos is 0-based, list[pos] valid.
  double click_prob(const RerankRequest& req, const std::vector<int>& list, int pos) const;

  // Exact expected total clicks of the (possibly partial) list. Rejects
  // duplicate items and items outside the request's candidates.
  double list_value(const RerankRequest& req, const std::vector<int>& list) const;

  // Precomputed per-request quality logits for hot loops (metrics, oracle).
  struct RequestCache {
    std::vector<double> logit;    // per candidate slot
    std::vector<int> category;    // per candidate slot
    std::vector<double> decay;    // per position
  };
  RequestCache make_cache(const RerankRequest& req, int max_len) const;
  // `slots` are candidate slot indices (not item ids); no validation.
  double list_value_cached(const RequestCache& cache, const int* slots, int len) const;

  int category_of(int item_id) const { return category_[item_id]; }

  // Observable dense features of an item: its affinity latent vector.
  std::vector<double> item_features(int item_id) const;

  nlohmann::json to_json() const;
  static EnvSpec from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static EnvSpec load(const std::string& path);

 private:
  uint64_t seed_;
  EnvConfig cfg_;
  std::vector<double> base_;        // n_items
  std::vector<double> item_latent_; // n_items x latent_dim
  std::vector<double> item_ctx_;    // n_items x latent_dim
  std::vector<int> category_;      // n_items
  std::vector<double> interact_;    // n_categories x n_categories
};

struct SynthOptions {
  int n_users = 500;
  int sessions_per_user = 6;
  int n_candidates = 12;
  int list_len = 6;
  LoggingPolicy policy = LoggingPolicy::kMixed;
  double epsilon = 0.2;  // random-shuffle share under the mixed policy
};

// Samples exposure logs from the environment under the logging policy.
// Deterministic given (env, options, seed).
Dataset synth_generate(const EnvSpec& env, const SynthOptions& opt, uint64_t seed);

}  // namespace rerank
