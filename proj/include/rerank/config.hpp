#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace rerank {

// Flat experiment configuration. Parses a key=value text file with '#'
// comments; unknown keys are errors so sweep-script typos fail loudly.
struct Config {
  // seeds
  uint64_t env_seed = 1;
  uint64_t data_seed = 2;
  uint64_t model_seed = 3;
  // environment
  int n_items = 200;
  int n_categories = 8;
  double decay_base = 0.85;
  double env_bias = -1.0;
  double affinity_scale = 0.5;
  double context_scale = 0.4;
  double interact_scale = 0.8;
  double score_noise = 0.05;
  // data
  int n_users = 500;
  int sessions_per_user = 6;
  int n_candidates = 12;
  int list_len = 6;
  std::string policy = "mixed";
  double policy_epsilon = 0.2;
  // model
  int embed_dim = 16;
  int d_model = 32;
  int d_pos = 8;
  int n_heads = 2;
  int ffn_mult = 2;
  int eval_layers = 6;
  int gen_layers = 4;
  int score_buckets = 16;
  // training
  double learning_rate = 5e-4;
  int batch_size = 1024;
  int eval_epochs = 8;
  int gen_epochs = 10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int grad_window = 64;
  // mining
  int beam_size = 4;
  int mine_topk = 0;  // 0 = all remaining candidates
  double weight_temperature = 0.5;
  int mine_max_requests = 0;  // 0 = all train requests
  // generator objective
  double soft_label_weight = 0.01;
  // metrics
  int hr_sample_size = 10000;
  int hr_eval_requests = 1000;
  int eval_metric_max_records = 5000;
  int64_t enum_budget = 1000000;
  // run control
  std::string ablation = "full";
  std::string sweep_axis;    // "", "beam_size", "soft_label_weight", "weight_temperature"
  std::string sweep_values;  // comma-separated
  int n_seeds = 3;
  int threads = 0;  // 0 = all cores
  std::string out_dir = "out";
  std::string phases = "all";  // or comma subset / "none"

  static Config from_file(const std::string& path);
  static Config from_string(const std::string& text);
  void apply_override(const std::string& key_equals_value);
  void validate() const;

  // Canonical sorted key=value form of the semantic fields; basis of the
  // config hash. Placement fields (out_dir, phases, threads) are excluded:
  // runs differing only in them compute identical results.
  std::string canonical() const;
  uint64_t hash() const;
  nlohmann::json to_json() const;

  bool phase_enabled(const std::string& phase) const;
  std::vector<double> sweep_value_list() const;
};

// Documented schema: name, type and default of every key.
std::string config_schema_text();

}  // namespace rerank
