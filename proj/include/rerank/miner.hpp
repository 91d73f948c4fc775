#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rerank/data.hpp"
#include "rerank/env.hpp"
#include "rerank/evaluator.hpp"

#include <nlohmann/json_fwd.hpp>

namespace rerank {

struct SupervisionStep {
  int hard_id = -1;
  // Soft distribution over remaining candidates, ordered by item id. Zero
  // mass on already-chosen items by construction.
  std::vector<std::pair<int, double>> soft;
};

// One mined lookahead sequence with per-step dense labels.
struct SupervisionRecord {
  int64_t request_id = -1;
  std::vector<int> sequence;
  double value = 0.0;             // evaluator V-hat of the full sequence
  double weight = 0.0;            // softmax over sequence values
  double effective_weight = 0.0;  // weight rescaled by beam size
  std::vector<SupervisionStep> steps;
};

struct MineOptions {
  int beam_size = 4;
  int topk = 0;  // 0 = all remaining candidates
  int list_len = 6;
  double weight_temperature = 0.5;
  int threads = 0;
};

struct MinedRequest {
  std::vector<SupervisionRecord> records;  // sorted by value descending
  bool under_filled = false;               // fewer reachable sequences than beam_size
};

// Evaluator-guided beam search over the unexposed permutation space. At each
// step every kept prefix expands with up to topk remaining candidates (pre-
// truncated by upstream score); all expansions are scored in one batched
// evaluator call and the top beam_size survive. Ties break by higher value,
// then smaller appended item id, then lexicographic prefix. Soft labels
// reuse the scores computed during each prefix's own expansion.
MinedRequest beam_search_mine(const EvaluatorModel& evaluator, const RerankRequest& req,
                              const MineOptions& opt);

// Standalone soft-label distribution: softmax of V-hat([prefix; v]) over all
// remaining candidates. Rejects an exhausted candidate set.
std::vector<std::pair<int, double>> soft_labels(const EvaluatorModel& evaluator,
                                                const RerankRequest& req,
                                                const std::vector<int>& prefix, int threads = 1);

struct SequenceWeights {
  std::vector<double> weights;    // softmax(value / temperature)
  std::vector<double> effective;  // weights * beam_size
};

SequenceWeights sequence_weights(const std::vector<double>& values, double temperature,
                                 int beam_size);

struct MiningReport {
  int n_requests = 0;
  int n_records = 0;
  int under_filled_requests = 0;
  std::vector<int64_t> failed_requests;
  double mean_value_top = 0.0;  // mean V-hat of each request's best sequence
  double mean_value_all = 0.0;
  // Exploration-gain diagnostic, present when env / exposures are supplied.
  std::optional<double> mean_env_value_top;
  std::optional<double> mean_env_value_logged;

  nlohmann::json to_json() const;
};

struct SupervisionDataset {
  std::vector<SupervisionRecord> records;  // ordered by request id
  MiningReport report;
};

// Mines every request (fan-out across threads, each worker holding the
// read-only evaluator); output is ordered by request id so parallel and
// serial runs produce identical files. A failed request is skipped and
// logged in the report.
SupervisionDataset build_supervision_dataset(const EvaluatorModel& evaluator,
                                             const std::vector<RerankRequest>& requests,
                                             const MineOptions& opt, const EnvSpec* env = nullptr,
                                             const Dataset* logged = nullptr);
// Serial reference for the mining fan-out.
SupervisionDataset build_supervision_dataset_serial(const EvaluatorModel& evaluator,
                                                    const std::vector<RerankRequest>& requests,
                                                    const MineOptions& opt,
                                                    const EnvSpec* env = nullptr,
                                                    const Dataset* logged = nullptr);

void save_supervision(const std::vector<SupervisionRecord>& records, const std::string& path);
std::vector<SupervisionRecord> load_supervision(const std::string& path);

}  // namespace rerank
