#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "rerank/data.hpp"
#include "rerank/env.hpp"
#include "rerank/metrics.hpp"
#include "rerank/miner.hpp"
#include "rerank/nn.hpp"
#include "rerank/params.hpp"

#include <nlohmann/json_fwd.hpp>

namespace rerank {

struct GeneratorConfig {
  ModelDims dims;
  int n_layers = 4;
  int list_len = 6;
};

enum class Ablation { kFull, kNoSoft, kNoWeight, kNoHard, kExposureOnly };
Ablation parse_ablation(const std::string& s);
std::string ablation_name(Ablation a);

// Pointer-style list generator: bidirectional candidate encoder (no
// positional signal, so it is permutation-equivariant over candidates) plus
// a user-initialized causal decoder whose states dot against the encoder
// rows to select the next item among the remaining candidates.
class GeneratorModel {
 public:
  GeneratorModel(GeneratorConfig cfg, uint64_t seed);
  GeneratorModel(GeneratorConfig cfg, ParameterSet params);

  const GeneratorConfig& config() const { return cfg_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

  struct Encoded {
    int m;          // (N, d_model) candidate representation matrix
    int user_embed; // (1, embed_dim)
  };
  Encoded encode_candidates(Graph& g, const RerankRequest& req) const;

  // e_start = W_p * e_user + b_p, the personalized first decoder input.
  int start_embedding(Graph& g, const Encoded& enc) const;

  // Causal decode over `n_steps` steps. Step 1 consumes e_start; step t > 1
  // consumes the encoder row of input_slots[t-2], so input_slots must hold
  // n_steps - 1 already-selected candidate slots. Returns the (n_steps, N)
  // pointer logit matrix.
  int decoder_logits(Graph& g, const Encoded& enc, const std::vector<int>& input_slots,
                     int n_steps) const;

  // Availability mask for teacher forcing: row t masks slots selected before
  // step t.
  static Tensor availability_mask(int n_candidates, const std::vector<int>& sequence_slots);

  // Pointer distribution over available candidates given raw logits for one
  // step; exact zeros on unavailable slots. Rejects an all-masked step.
  static std::vector<double> pointer_probs(const std::vector<double>& logits,
                                           const std::vector<bool>& available);

  // Hybrid distillation loss for one supervision record:
  //   effective_weight * sum_t [ CE(hard_t) + alpha * KL(q_t || P_t) ].
  // `weight_override` replaces the record's effective weight when set (the
  // no-weight ablation passes 1).
  int loss_node(Graph& g, const RerankRequest& req, const SupervisionRecord& rec, double alpha,
                bool use_hard = true, std::optional<double> weight_override = std::nullopt) const;

  // Exposure-imitation loss: plain cross-entropy on the logged list.
  int exposure_loss_node(Graph& g, const ExposureRecord& rec) const;

  struct DecodeResult {
    std::vector<int> items;                       // item ids, length list_len
    std::vector<std::vector<double>> step_probs;  // per step over candidate slots
  };
  // Single greedy pass with availability masking; deterministic (ties toward
  // the smaller item id). Rejects list_len > N.
  DecodeResult greedy_decode(const RerankRequest& req) const;

  std::vector<DecodeResult> decode_batch(const std::vector<RerankRequest>& requests,
                                         int threads) const;
  std::vector<DecodeResult> decode_batch_serial(const std::vector<RerankRequest>& requests) const;

  void save(const std::string& path) const;
  static GeneratorModel load(const std::string& path);

 private:
  GeneratorConfig cfg_;
  ParameterSet params_;
};

struct GenTrainOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 1024;
  int epochs = 10;
  int grad_window = 64;
  int threads = 0;
  uint64_t shuffle_seed = 0;
  double alpha = 0.01;  // soft-label weight
  Ablation ablation = Ablation::kFull;
  double weight_temperature_override = 0.0;  // >0: recompute weights per request
};

struct GeneratorTrainReport {
  std::vector<double> epoch_loss;
  bool diverged = false;
  int final_epoch = 0;
  int supervision_records_used = 0;
  int exposure_records_used = 0;
  std::optional<HrReport> heldout_hr;

  nlohmann::json to_json() const;
};

// Adam on the hybrid distillation objective with teacher forcing. The
// supervision records join to their requests by request id. Ablations:
// no_soft (alpha = 0), no_weight (effective weight 1), no_hard (CE dropped),
// exposure_only (trains on the logged exposures, zero supervision records).
GeneratorTrainReport train_generator(
    GeneratorModel& model, const std::vector<SupervisionRecord>& supervision,
    const std::unordered_map<int64_t, const RerankRequest*>& requests_by_id,
    const Dataset& exposures, const GenTrainOptions& opt,
    const std::vector<RerankRequest>* heldout_requests = nullptr, const EnvSpec* env = nullptr,
    int hr_samples = 10000, uint64_t hr_seed = 0);

std::unordered_map<int64_t, const RerankRequest*> index_requests(const Dataset& ds);

}  // namespace rerank
