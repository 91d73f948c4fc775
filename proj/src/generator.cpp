#include "rerank/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "rerank/checkpoint.hpp"
#include "rerank/parallel.hpp"

namespace rerank {

using nlohmann::json;

Ablation parse_ablation(const std::string& s) {
  if (s == "full") return Ablation::kFull;
  if (s == "no_soft") return Ablation::kNoSoft;
  if (s == "no_weight") return Ablation::kNoWeight;
  if (s == "no_hard") return Ablation::kNoHard;
  if (s == "exposure_only") return Ablation::kExposureOnly;
  throw std::invalid_argument("unknown ablation '" + s +
                              "' (full|no_soft|no_weight|no_hard|exposure_only)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kNoSoft: return "no_soft";
    case Ablation::kNoWeight: return "no_weight";
    case Ablation::kNoHard: return "no_hard";
    case Ablation::kExposureOnly: return "exposure_only";
  }
  return "?";
}

GeneratorModel::GeneratorModel(GeneratorConfig cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng(derive_seed(seed, "generator"));
  const ModelDims& d = cfg_.dims;
  register_features(params_, "feat", d, rng);
  register_linear(params_, "in_enc", d.d_model, 2 * d.n_fields() * d.embed_dim, rng);
  register_transformer(params_, "enc", cfg_.n_layers, d, rng);
  register_linear(params_, "start", d.d_model, d.embed_dim, rng);
  params_.create("dec_pos", {cfg_.list_len, d.d_pos}, d.d_pos, rng);
  register_linear(params_, "in_dec", d.d_model, d.d_model + d.d_pos, rng);
  register_transformer(params_, "dec", cfg_.n_layers, d, rng);
}

GeneratorModel::GeneratorModel(GeneratorConfig cfg, ParameterSet params)
    : cfg_(cfg), params_(std::move(params)) {}

GeneratorModel::Encoded GeneratorModel::encode_candidates(Graph& g,
                                                          const RerankRequest& req) const {
  ParamBinder bind(g, params_);
  std::vector<int> ids;
  ids.reserve(req.n());
  for (const Item& it : req.candidates) ids.push_back(it.id);
  const FeatureOutputs fs = feature_stack(g, bind, "feat", cfg_.dims, req, ids);
  const int x = linear(g, bind, "in_enc", fs.combined);
  const int m = transformer_stack(g, bind, "enc", cfg_.n_layers, x, /*causal=*/false, cfg_.dims);
  return {m, fs.user_embed};
}

int GeneratorModel::start_embedding(Graph& g, const Encoded& enc) const {
  ParamBinder bind(g, params_);
  return linear(g, bind, "start", enc.user_embed);
}

int GeneratorModel::decoder_logits(Graph& g, const Encoded& enc,
                                   const std::vector<int>& input_slots, int n_steps) const {
  const int t = n_steps;
  if (t < 1 || t > cfg_.list_len)
    throw std::invalid_argument("decoder_logits: step count must be in [1, list_len]");
  if (static_cast<int>(input_slots.size()) != t - 1)
    throw std::invalid_argument("decoder_logits: expected " + std::to_string(t - 1) +
                                " input slots, got " + std::to_string(input_slots.size()));
  ParamBinder bind(g, params_);
  const int e_start = start_embedding(g, enc);
  // Step inputs: e_start, then the encoder row of each previously selected
  // item; positional encoding is fused in along the feature axis.
  std::vector<int> input_rows{e_start};
  if (t > 1) input_rows.push_back(g.gather_rows(enc.m, input_slots));
  const int inputs = input_rows.size() == 1 ? input_rows[0] : g.concat_rows(input_rows);
  std::vector<int> pos_rows(t);
  std::iota(pos_rows.begin(), pos_rows.end(), 0);
  const int pos = g.gather_rows(bind("dec_pos"), pos_rows);
  const int fused = linear(g, bind, "in_dec", g.concat_cols({inputs, pos}));
  const int h = transformer_stack(g, bind, "dec", cfg_.n_layers, fused, /*causal=*/true, cfg_.dims);
  return g.matmul(h, enc.m, /*transpose_b=*/true);
}

Tensor GeneratorModel::availability_mask(int n_candidates, const std::vector<int>& sequence_slots) {
  const int t = static_cast<int>(sequence_slots.size());
  Tensor mask = Tensor::ones_matrix(t, n_candidates);
  for (int row = 1; row < t; ++row)
    for (int prev = 0; prev < row; ++prev) mask.at(row, sequence_slots[prev]) = 0.0;
  return mask;
}

std::vector<double> GeneratorModel::pointer_probs(const std::vector<double>& logits,
                                                  const std::vector<bool>& available) {
  if (logits.size() != available.size())
    throw std::invalid_argument("pointer_probs: size mismatch");
  double mx = -HUGE_VAL;
  int live = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (available[i]) {
      ++live;
      mx = std::max(mx, logits[i]);
    }
  }
  if (live == 0) throw std::invalid_argument("pointer_probs: no available candidates");
  std::vector<double> p(logits.size(), 0.0);
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (available[i]) {
      p[i] = std::exp(logits[i] - mx);
      z += p[i];
    }
  }
  for (double& x : p) x /= z;
  return p;
}

namespace {

std::vector<int> slots_of_sequence(const RerankRequest& req, const std::vector<int>& items) {
  std::vector<int> slots;
  slots.reserve(items.size());
  std::unordered_set<int> seen;
  for (int id : items) {
    const int s = req.slot_of(id);
    if (s < 0)
      throw std::invalid_argument("generator: item " + std::to_string(id) +
                                  " not in request candidates");
    if (!seen.insert(id).second)
      throw std::invalid_argument("generator: duplicate item " + std::to_string(id) +
                                  " in sequence");
    slots.push_back(s);
  }
  return slots;
}

}  // namespace

int GeneratorModel::loss_node(Graph& g, const RerankRequest& req, const SupervisionRecord& rec,
                              double alpha, bool use_hard,
                              std::optional<double> weight_override) const {
  if (alpha < 0.0) throw std::invalid_argument("generator loss: alpha must be >= 0");
  if (static_cast<int>(rec.sequence.size()) != cfg_.list_len)
    throw std::invalid_argument("generator loss: sequence length != list_len");
  const std::vector<int> slots = slots_of_sequence(req, rec.sequence);
  const Encoded enc = encode_candidates(g, req);
  const std::vector<int> inputs(slots.begin(), slots.end() - 1);
  const int logits = decoder_logits(g, enc, inputs, cfg_.list_len);
  Tensor mask = availability_mask(req.n(), slots);

  const int t = cfg_.list_len;
  Tensor q = Tensor::zeros({t, req.n()});
  for (int step = 0; step < t; ++step) {
    for (const auto& [id, p] : rec.steps[step].soft) {
      const int s = req.slot_of(id);
      if (s < 0)
        throw std::invalid_argument("generator loss: soft label item " + std::to_string(id) +
                                    " not in candidates at step " + std::to_string(step + 1));
      q.at(step, s) = p;
    }
  }

  int loss = -1;
  if (use_hard) loss = g.cross_entropy_rows(logits, mask, slots);
  if (alpha > 0.0) {
    const int kl = g.scale(g.kl_rows(std::move(q), logits, std::move(mask)), alpha);
    loss = (loss < 0) ? kl : g.add(loss, kl);
  }
  if (loss < 0) loss = g.scale(g.sum(logits), 0.0);  // no_hard with alpha 0: empty objective
  const double w = weight_override.value_or(rec.effective_weight);
  return g.scale(loss, w);
}

int GeneratorModel::exposure_loss_node(Graph& g, const ExposureRecord& rec) const {
  if (static_cast<int>(rec.exposed.size()) != cfg_.list_len)
    throw std::invalid_argument("generator exposure loss: exposed length != list_len");
  const std::vector<int> slots = slots_of_sequence(rec.request, rec.exposed);
  const Encoded enc = encode_candidates(g, rec.request);
  const std::vector<int> inputs(slots.begin(), slots.end() - 1);
  const int logits = decoder_logits(g, enc, inputs, cfg_.list_len);
  return g.cross_entropy_rows(logits, availability_mask(rec.request.n(), slots), slots);
}

GeneratorModel::DecodeResult GeneratorModel::greedy_decode(const RerankRequest& req) const {
  if (cfg_.list_len > req.n())
    throw std::invalid_argument("greedy_decode: list_len exceeds candidate count");
  Graph g;
  const Encoded enc = encode_candidates(g, req);
  DecodeResult out;
  std::vector<int> slots;
  std::vector<bool> available(req.n(), true);
  for (int step = 0; step < cfg_.list_len; ++step) {
    // Recompute the decoder over the selected prefix each step.
    const int logits_node = decoder_logits(g, enc, slots, step + 1);
    const Tensor& lg = g.value(logits_node);
    std::vector<double> row(req.n());
    for (int j = 0; j < req.n(); ++j) row[j] = lg.at(step, j);
    const std::vector<double> probs = pointer_probs(row, available);
    int best = -1;
    for (int j = 0; j < req.n(); ++j) {
      if (!available[j]) continue;
      if (best < 0 || probs[j] > probs[best] ||
          (probs[j] == probs[best] && req.candidates[j].id < req.candidates[best].id))
        best = j;
    }
    out.step_probs.push_back(probs);
    out.items.push_back(req.candidates[best].id);
    slots.push_back(best);
    available[best] = false;
  }
  return out;
}

std::vector<GeneratorModel::DecodeResult> GeneratorModel::decode_batch(
    const std::vector<RerankRequest>& requests, int threads) const {
  std::vector<DecodeResult> out(requests.size());
  parallel_for(static_cast<int>(requests.size()), threads,
               [&](int i) { out[i] = greedy_decode(requests[i]); });
  return out;
}

std::vector<GeneratorModel::DecodeResult> GeneratorModel::decode_batch_serial(
    const std::vector<RerankRequest>& requests) const {
  std::vector<DecodeResult> out(requests.size());
  for (size_t i = 0; i < requests.size(); ++i) out[i] = greedy_decode(requests[i]);
  return out;
}

void GeneratorModel::save(const std::string& path) const {
  json hyper;
  hyper["kind"] = "generator";
  hyper["embed_dim"] = cfg_.dims.embed_dim;
  hyper["d_model"] = cfg_.dims.d_model;
  hyper["d_pos"] = cfg_.dims.d_pos;
  hyper["n_heads"] = cfg_.dims.n_heads;
  hyper["ffn_mult"] = cfg_.dims.ffn_mult;
  hyper["score_buckets"] = cfg_.dims.score_buckets;
  hyper["n_items"] = cfg_.dims.n_items;
  hyper["feat_dim"] = cfg_.dims.feat_dim;
  hyper["n_layers"] = cfg_.n_layers;
  hyper["list_len"] = cfg_.list_len;
  save_checkpoint(path, params_, hyper);
}

GeneratorModel GeneratorModel::load(const std::string& path) {
  LoadedCheckpoint lc = load_checkpoint(path);
  if (lc.hyper.at("kind").get<std::string>() != "generator")
    throw std::runtime_error("checkpoint '" + path + "' is not a generator");
  GeneratorConfig cfg;
  cfg.dims.embed_dim = lc.hyper.at("embed_dim").get<int>();
  cfg.dims.d_model = lc.hyper.at("d_model").get<int>();
  cfg.dims.d_pos = lc.hyper.at("d_pos").get<int>();
  cfg.dims.n_heads = lc.hyper.at("n_heads").get<int>();
  cfg.dims.ffn_mult = lc.hyper.at("ffn_mult").get<int>();
  cfg.dims.score_buckets = lc.hyper.at("score_buckets").get<int>();
  cfg.dims.n_items = lc.hyper.at("n_items").get<int>();
  cfg.dims.feat_dim = lc.hyper.at("feat_dim").get<int>();
  cfg.dims.max_len = lc.hyper.at("list_len").get<int>();
  cfg.n_layers = lc.hyper.at("n_layers").get<int>();
  cfg.list_len = lc.hyper.at("list_len").get<int>();
  return GeneratorModel(cfg, std::move(lc.params));
}

std::unordered_map<int64_t, const RerankRequest*> index_requests(const Dataset& ds) {
  std::unordered_map<int64_t, const RerankRequest*> idx;
  for (const ExposureRecord& rec : ds) idx[rec.request.request_id] = &rec.request;
  return idx;
}

namespace {

template <class LossFn>
std::pair<GradMap, double> accumulate_window(const ParameterSet& params, int begin, int end,
                                             int threads, const LossFn& loss_fn) {
  const int n = end - begin;
  std::vector<GradMap> grads(n);
  std::vector<double> losses(n);
  parallel_for(n, threads, [&](int i) {
    Graph g;
    const int loss = loss_fn(g, begin + i);
    g.backward(loss);
    grads[i] = collect_param_grads(g, params);
    losses[i] = g.value(loss).item();
  });
  GradMap total = std::move(grads[0]);
  double loss_sum = losses[0];
  for (int i = 1; i < n; ++i) {
    total.add(grads[i]);
    loss_sum += losses[i];
  }
  return {std::move(total), loss_sum};
}

}  // namespace

GeneratorTrainReport train_generator(
    GeneratorModel& model, const std::vector<SupervisionRecord>& supervision,
    const std::unordered_map<int64_t, const RerankRequest*>& requests_by_id,
    const Dataset& exposures, const GenTrainOptions& opt,
    const std::vector<RerankRequest>* heldout_requests, const EnvSpec* env, int hr_samples,
    uint64_t hr_seed) {
  GeneratorTrainReport report;
  const bool exposure_only = opt.ablation == Ablation::kExposureOnly;

  // Resolve per-record weights up front (no-weight ablation and optional
  // temperature override).
  std::vector<const SupervisionRecord*> recs;
  std::vector<double> weights;
  if (!exposure_only) {
    if (supervision.empty())
      throw std::invalid_argument("train_generator: empty supervision dataset");
    for (const SupervisionRecord& r : supervision) {
      if (requests_by_id.find(r.request_id) == requests_by_id.end())
        throw std::invalid_argument("train_generator: request " + std::to_string(r.request_id) +
                                    " referenced by supervision but missing from the dataset");
      recs.push_back(&r);
      weights.push_back(r.effective_weight);
    }
    if (opt.weight_temperature_override > 0.0) {
      // Regroup by request and recompute softmax weights from stored values.
      size_t i = 0;
      while (i < recs.size()) {
        size_t j = i;
        std::vector<double> values;
        while (j < recs.size() && recs[j]->request_id == recs[i]->request_id) {
          values.push_back(recs[j]->value);
          ++j;
        }
        const SequenceWeights w = sequence_weights(values, opt.weight_temperature_override,
                                                   static_cast<int>(values.size()));
        for (size_t k = i; k < j; ++k) weights[k] = w.effective[k - i];
        i = j;
      }
    }
    if (opt.ablation == Ablation::kNoWeight)
      for (double& w : weights) w = 1.0;
  } else {
    if (exposures.empty())
      throw std::invalid_argument("train_generator: exposure_only needs exposure records");
  }
  report.supervision_records_used = static_cast<int>(recs.size());
  report.exposure_records_used = exposure_only ? static_cast<int>(exposures.size()) : 0;

  const double alpha = opt.ablation == Ablation::kNoSoft ? 0.0 : opt.alpha;
  const bool use_hard = opt.ablation != Ablation::kNoHard;
  const int n_examples = exposure_only ? static_cast<int>(exposures.size())
                                       : static_cast<int>(recs.size());

  auto loss_of = [&](Graph& g, int idx) -> int {
    if (exposure_only) return model.exposure_loss_node(g, exposures[idx]);
    const SupervisionRecord& r = *recs[idx];
    return model.loss_node(g, *requests_by_id.at(r.request_id), r, alpha, use_hard, weights[idx]);
  };

  AdamConfig adam{opt.lr, opt.beta1, opt.beta2, opt.adam_eps};
  Rng shuffle_rng(derive_seed(opt.shuffle_seed, "gen-shuffle"));
  std::vector<int> order(n_examples);
  std::iota(order.begin(), order.end(), 0);
  ParameterSet last_good = model.params();
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    bool bad = false;
    for (size_t b = 0; b < order.size(); b += opt.batch_size) {
      const int nb =
          static_cast<int>(std::min(order.size() - b, static_cast<size_t>(opt.batch_size)));
      GradMap total = GradMap::zeros_like(model.params());
      double batch_loss = 0.0;
      for (int w = 0; w < nb; w += opt.grad_window) {
        const int we = std::min(nb, w + opt.grad_window);
        auto [grads, loss_sum] =
            accumulate_window(model.params(), static_cast<int>(b) + w, static_cast<int>(b) + we,
                              opt.threads, [&](Graph& g, int i) { return loss_of(g, order[i]); });
        total.add(grads);
        batch_loss += loss_sum;
      }
      if (!std::isfinite(batch_loss)) {
        bad = true;
        break;
      }
      total.scale(1.0 / nb);
      adam_step(model.params(), total, adam);
      epoch_loss += batch_loss;
    }
    if (bad) {
      model.params() = last_good;
      report.diverged = true;
      break;
    }
    last_good = model.params();
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(n_examples));
    report.final_epoch = epoch + 1;
  }

  if (heldout_requests != nullptr && !heldout_requests->empty() && env != nullptr) {
    report.heldout_hr = evaluate_hr(
        *heldout_requests, [&](const RerankRequest& r) { return model.greedy_decode(r).items; },
        *env, hr_samples, model.config().list_len, hr_seed, opt.threads);
  }
  return report;
}

json GeneratorTrainReport::to_json() const {
  json j;
  j["epoch_loss"] = epoch_loss;
  j["diverged"] = diverged;
  j["final_epoch"] = final_epoch;
  j["supervision_records_used"] = supervision_records_used;
  j["exposure_records_used"] = exposure_records_used;
  j["heldout_hr"] = heldout_hr.has_value() ? heldout_hr->to_json() : json(nullptr);
  return j;
}

}  // namespace rerank
