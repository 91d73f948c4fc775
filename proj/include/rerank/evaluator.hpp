#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rerank/data.hpp"
#include "rerank/env.hpp"
#include "rerank/nn.hpp"
#include "rerank/params.hpp"

#include <nlohmann/json_fwd.hpp>

namespace rerank {

// Dense unary-threshold label matrix: row t encodes the cumulative click
// count y_t as indicators y_{t,k} = 1(y_t >= k); entries with k > t are zero.
Tensor build_label_matrix(const std::vector<int>& clicks);

// Expected value of an ordinal distribution: sum over the first t threshold
// probabilities P(V >= k).
double expected_value(const std::vector<double>& threshold_probs, int t);

struct EvaluatorConfig {
  ModelDims dims;
  int n_layers = 6;
  int list_len = 6;
};

// Lookahead value model: causal sequence encoder over the feature stack plus
// learned positional encoding, with a cumulative-regression head emitting one
// threshold-logit row per step. Only lower-triangular entries (k <= t) are
// ever consumed.
class EvaluatorModel {
 public:
  EvaluatorModel(EvaluatorConfig cfg, uint64_t seed);
  EvaluatorModel(EvaluatorConfig cfg, ParameterSet params);

  const EvaluatorConfig& config() const { return cfg_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

  struct Forward {
    int hidden;  // (t, d_model)
    int logits;  // (t, list_len)
  };
  // Rejects empty sequences, duplicates and foreign items.
  Forward forward(Graph& g, const RerankRequest& req, const std::vector<int>& seq) const;

  // V-hat of the prefix: sum_k sigmoid(O[t-1, k]) for k < t. Inference only.
  double value_of_prefix(const RerankRequest& req, const std::vector<int>& seq) const;

  // Threshold probabilities P(V >= k | prefix) for the final step.
  std::vector<double> threshold_probs(const RerankRequest& req,
                                      const std::vector<int>& seq) const;

  // Scores many prefixes of one request in a single batched call. Each prefix
  // is an independent forward pass, so results are bit-identical to scoring
  // them one by one; `threads` only sets the OpenMP lane width.
  std::vector<double> score_batch(const RerankRequest& req,
                                  const std::vector<std::vector<int>>& prefixes,
                                  int threads) const;
  // Serial reference for the batched kernel.
  std::vector<double> score_batch_serial(const RerankRequest& req,
                                         const std::vector<std::vector<int>>& prefixes) const;

  // Ordered-BCE loss node for one exposure record (lower-triangular mask,
  // averaged over steps).
  int loss_node(Graph& g, const ExposureRecord& rec) const;

  void save(const std::string& path) const;
  static EvaluatorModel load(const std::string& path);

 private:
  void validate_seq(const RerankRequest& req, const std::vector<int>& seq) const;

  EvaluatorConfig cfg_;
  ParameterSet params_;
};

struct TrainOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 1024;
  int epochs = 8;
  int grad_window = 64;  // examples whose backward passes run in parallel
  int threads = 0;
  uint64_t shuffle_seed = 0;
};

struct EvaluatorMetrics {
  std::optional<double> r_auc;
  std::optional<double> pcoc;
  double rmse = 0.0;
  int n_records = 0;
};

struct EvaluatorTrainReport {
  std::vector<double> epoch_loss;
  bool diverged = false;
  int final_epoch = 0;
  // Held-out metrics against the exact environment value of the exposed list
  // and against the realized click labels.
  EvaluatorMetrics heldout_env;
  EvaluatorMetrics heldout_clicks;
  double nonmonotone_row_fraction = 0.0;  // diagnostic, see threshold head

  nlohmann::json to_json() const;
};

// Mini-batch Adam on the ordered-BCE objective. On a non-finite loss the
// last epoch-end parameters are restored and training stops. Deterministic
// for any thread count (fixed reduction order).
EvaluatorTrainReport train_evaluator(EvaluatorModel& model, const Dataset& train,
                                     const TrainOptions& opt, const Dataset* heldout = nullptr,
                                     const EnvSpec* env = nullptr, int metric_cap = 5000);

// Held-out metric block (shared with the pipeline's evaluate phase).
EvaluatorMetrics evaluate_evaluator(const EvaluatorModel& model, const Dataset& heldout,
                                    const EnvSpec* env, bool against_env, int cap, int threads);

// Fraction of prediction rows whose threshold probabilities are not
// non-increasing in k (the head does not enforce monotonicity).
double nonmonotone_fraction(const EvaluatorModel& model, const Dataset& records, int cap,
                            int threads);

}  // namespace rerank
