#include "rerank/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "rerank/checkpoint.hpp"
#include "rerank/metrics.hpp"
#include "rerank/parallel.hpp"

namespace rerank {

using nlohmann::json;

Tensor build_label_matrix(const std::vector<int>& clicks) {
  const int L = static_cast<int>(clicks.size());
  for (int c : clicks)
    if (c != 0 && c != 1)
      throw std::invalid_argument("build_label_matrix: click value outside {0,1}");
  Tensor y = Tensor::zeros({L, L});
  int cum = 0;
  for (int t = 0; t < L; ++t) {
    cum += clicks[t];
    for (int k = 1; k <= t + 1; ++k) y.at(t, k - 1) = (cum >= k) ? 1.0 : 0.0;
  }
  return y;
}

double expected_value(const std::vector<double>& threshold_probs, int t) {
  if (t < 1) throw std::invalid_argument("expected_value: t must be >= 1");
  if (t > static_cast<int>(threshold_probs.size()))
    throw std::invalid_argument("expected_value: t exceeds distribution length");
  double v = 0.0;
  for (int k = 0; k < t; ++k) v += threshold_probs[k];
  return v;
}

EvaluatorModel::EvaluatorModel(EvaluatorConfig cfg, uint64_t seed) : cfg_(cfg) {
  Rng rng(derive_seed(seed, "evaluator"));
  const ModelDims& d = cfg_.dims;
  register_features(params_, "feat", d, rng);
  params_.create("pos", {cfg_.list_len, d.d_pos}, d.d_pos, rng);
  register_linear(params_, "in", d.d_model, 2 * d.n_fields() * d.embed_dim + d.d_pos, rng);
  register_transformer(params_, "enc", cfg_.n_layers, d, rng);
  register_linear(params_, "head1", d.d_model, d.d_model, rng);
  register_linear(params_, "head2", cfg_.list_len, d.d_model, rng);
}

EvaluatorModel::EvaluatorModel(EvaluatorConfig cfg, ParameterSet params)
    : cfg_(cfg), params_(std::move(params)) {}

void EvaluatorModel::validate_seq(const RerankRequest& req, const std::vector<int>& seq) const {
  if (seq.empty()) throw std::invalid_argument("evaluator: empty sequence");
  if (static_cast<int>(seq.size()) > cfg_.list_len)
    throw std::invalid_argument("evaluator: sequence longer than list_len");
  std::unordered_set<int> seen;
  for (int id : seq) {
    if (!seen.insert(id).second)
      throw std::invalid_argument("evaluator: duplicate item " + std::to_string(id));
    if (req.slot_of(id) < 0)
      throw std::invalid_argument("evaluator: item " + std::to_string(id) +
                                  " not in request candidates");
  }
}

EvaluatorModel::Forward EvaluatorModel::forward(Graph& g, const RerankRequest& req,
                                                const std::vector<int>& seq) const {
  validate_seq(req, seq);
  const int t = static_cast<int>(seq.size());
  ParamBinder bind(g, params_);
  const FeatureOutputs fs = feature_stack(g, bind, "feat", cfg_.dims, req, seq);
  std::vector<int> pos_rows(t);
  std::iota(pos_rows.begin(), pos_rows.end(), 0);
  const int pos = g.gather_rows(bind("pos"), pos_rows);
  const int x = linear(g, bind, "in", g.concat_cols({fs.combined, pos}));
  const int h = transformer_stack(g, bind, "enc", cfg_.n_layers, x, /*causal=*/true, cfg_.dims);
  const int o = linear(g, bind, "head2", g.sigmoid(linear(g, bind, "head1", h)));
  return {h, o};
}

std::vector<double> EvaluatorModel::threshold_probs(const RerankRequest& req,
                                                    const std::vector<int>& seq) const {
  Graph g;
  const Forward f = forward(g, req, seq);
  const Tensor& o = g.value(f.logits);
  const int t = static_cast<int>(seq.size());
  std::vector<double> probs(t);
  for (int k = 0; k < t; ++k) probs[k] = 1.0 / (1.0 + std::exp(-o.at(t - 1, k)));
  return probs;
}

double EvaluatorModel::value_of_prefix(const RerankRequest& req,
                                       const std::vector<int>& seq) const {
  const std::vector<double> probs = threshold_probs(req, seq);
  return expected_value(probs, static_cast<int>(seq.size()));
}

std::vector<double> EvaluatorModel::score_batch(const RerankRequest& req,
                                                const std::vector<std::vector<int>>& prefixes,
                                                int threads) const {
  std::vector<double> values(prefixes.size());
  parallel_for(static_cast<int>(prefixes.size()), threads,
               [&](int i) { values[i] = value_of_prefix(req, prefixes[i]); });
  return values;
}

std::vector<double> EvaluatorModel::score_batch_serial(
    const RerankRequest& req, const std::vector<std::vector<int>>& prefixes) const {
  std::vector<double> values(prefixes.size());
  for (size_t i = 0; i < prefixes.size(); ++i) values[i] = value_of_prefix(req, prefixes[i]);
  return values;
}

int EvaluatorModel::loss_node(Graph& g, const ExposureRecord& rec) const {
  const int L = static_cast<int>(rec.exposed.size());
  if (L != cfg_.list_len)
    throw std::invalid_argument("evaluator loss: exposed length " + std::to_string(L) +
                                " != list_len " + std::to_string(cfg_.list_len));
  const Forward f = forward(g, rec.request, rec.exposed);
  const Tensor y = build_label_matrix(rec.clicks);
  Tensor w = Tensor::zeros({L, L});
  for (int t = 0; t < L; ++t)
    for (int k = 0; k <= t; ++k) w.at(t, k) = 1.0 / L;
  return g.bce_logits(f.logits, y, w);
}

void EvaluatorModel::save(const std::string& path) const {
  json hyper;
  hyper["kind"] = "evaluator";
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

EvaluatorModel EvaluatorModel::load(const std::string& path) {
  LoadedCheckpoint lc = load_checkpoint(path);
  if (lc.hyper.at("kind").get<std::string>() != "evaluator")
    throw std::runtime_error("checkpoint '" + path + "' is not an evaluator");
  EvaluatorConfig cfg;
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
  return EvaluatorModel(cfg, std::move(lc.params));
}

namespace {

// Per-example backward passes run in parallel inside a fixed-size window;
// the fold over examples stays in example order, so gradients are
// bit-identical to the plain serial loop for any thread count.
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

EvaluatorTrainReport train_evaluator(EvaluatorModel& model, const Dataset& train,
                                     const TrainOptions& opt, const Dataset* heldout,
                                     const EnvSpec* env, int metric_cap) {
  if (train.empty()) throw std::invalid_argument("train_evaluator: empty training set");
  EvaluatorTrainReport report;
  AdamConfig adam{opt.lr, opt.beta1, opt.beta2, opt.adam_eps};
  Rng shuffle_rng(derive_seed(opt.shuffle_seed, "eval-shuffle"));
  std::vector<int> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  // Snapshot for divergence recovery.
  ParameterSet last_good = model.params();
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    bool bad = false;
    for (size_t b = 0; b < order.size(); b += opt.batch_size) {
      const int nb = static_cast<int>(std::min(order.size() - b, static_cast<size_t>(opt.batch_size)));
      GradMap total = GradMap::zeros_like(model.params());
      double batch_loss = 0.0;
      for (int w = 0; w < nb; w += opt.grad_window) {
        const int we = std::min(nb, w + opt.grad_window);
        auto [grads, loss_sum] = accumulate_window(
            model.params(), static_cast<int>(b) + w, static_cast<int>(b) + we, opt.threads,
            [&](Graph& g, int i) { return model.loss_node(g, train[order[i]]); });
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
    report.epoch_loss.push_back(epoch_loss / static_cast<double>(train.size()));
    report.final_epoch = epoch + 1;
  }

  if (heldout != nullptr && !heldout->empty()) {
    report.heldout_env = evaluate_evaluator(model, *heldout, env, /*against_env=*/env != nullptr,
                                            metric_cap, opt.threads);
    report.heldout_clicks =
        evaluate_evaluator(model, *heldout, env, /*against_env=*/false, metric_cap, opt.threads);
    report.nonmonotone_row_fraction = nonmonotone_fraction(model, *heldout, metric_cap, opt.threads);
  }
  return report;
}

EvaluatorMetrics evaluate_evaluator(const EvaluatorModel& model, const Dataset& heldout,
                                    const EnvSpec* env, bool against_env, int cap, int threads) {
  if (against_env && env == nullptr)
    throw std::invalid_argument("evaluate_evaluator: env required for env-truth metrics");
  const int n = std::min<int>(cap, static_cast<int>(heldout.size()));
  std::vector<double> truth(n), pred(n);
  parallel_for(n, threads, [&](int i) {
    const ExposureRecord& rec = heldout[i];
    pred[i] = model.value_of_prefix(rec.request, rec.exposed);
    truth[i] = against_env ? env->list_value(rec.request, rec.exposed)
                           : static_cast<double>(rec.cumulative_value().back());
  });
  EvaluatorMetrics m;
  m.n_records = n;
  m.r_auc = r_auc(truth, pred);
  m.pcoc = pcoc(truth, pred);
  m.rmse = rmse(truth, pred);
  return m;
}

double nonmonotone_fraction(const EvaluatorModel& model, const Dataset& records, int cap,
                            int threads) {
  const int n = std::min<int>(cap, static_cast<int>(records.size()));
  if (n == 0) return 0.0;
  std::vector<int> bad(n, 0);
  parallel_for(n, threads, [&](int i) {
    const std::vector<double> p = model.threshold_probs(records[i].request, records[i].exposed);
    for (size_t k = 1; k < p.size(); ++k)
      if (p[k] > p[k - 1] + 1e-12) {
        bad[i] = 1;
        break;
      }
  });
  int total = 0;
  for (int b : bad) total += b;
  return static_cast<double>(total) / n;
}

json EvaluatorTrainReport::to_json() const {
  json j;
  j["epoch_loss"] = epoch_loss;
  j["diverged"] = diverged;
  j["final_epoch"] = final_epoch;
  auto metrics_json = [](const EvaluatorMetrics& m) {
    json mj;
    mj["r_auc"] = m.r_auc.has_value() ? json(*m.r_auc) : json(nullptr);
    mj["pcoc"] = m.pcoc.has_value() ? json(*m.pcoc) : json(nullptr);
    mj["rmse"] = m.rmse;
    mj["n_records"] = m.n_records;
    return mj;
  };
  j["heldout_env"] = metrics_json(heldout_env);
  j["heldout_clicks"] = metrics_json(heldout_clicks);
  j["nonmonotone_row_fraction"] = nonmonotone_row_fraction;
  return j;
}

}  // namespace rerank
