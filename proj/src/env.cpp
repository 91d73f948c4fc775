#include "rerank/env.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "rerank/rng.hpp"

namespace rerank {

using nlohmann::json;

namespace {
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
}  // namespace

EnvSpec::EnvSpec(uint64_t seed, EnvConfig cfg) : seed_(seed), cfg_(cfg) {
  if (cfg_.n_items <= 0 || cfg_.n_categories <= 0 || cfg_.latent_dim <= 0)
    throw std::invalid_argument("EnvSpec: sizes must be positive");
  if (cfg_.decay_base <= 0.0 || cfg_.decay_base > 1.0)
    throw std::invalid_argument("EnvSpec: decay_base must be in (0,1]");
  Rng rng(derive_seed(seed, "env"));
  base_.resize(cfg_.n_items);
  for (double& b : base_) b = rng.normal(0.0, 0.8);
  item_latent_.resize(static_cast<size_t>(cfg_.n_items) * cfg_.latent_dim);
  for (double& z : item_latent_) z = rng.normal();
  item_ctx_.resize(static_cast<size_t>(cfg_.n_items) * cfg_.latent_dim);
  for (double& z : item_ctx_) z = rng.normal(0.0, 1.0);
  category_.resize(cfg_.n_items);
  for (int& c : category_) c = static_cast<int>(rng.uniform_int(cfg_.n_categories));
  interact_.resize(static_cast<size_t>(cfg_.n_categories) * cfg_.n_categories);
  for (double& w : interact_) w = rng.normal(0.0, 0.6);
}

double EnvSpec::quality_logit(const RerankRequest& req, const Item& item) const {
  const int id = item.id;
  if (id < 0 || id >= cfg_.n_items)
    throw std::invalid_argument("EnvSpec: item id " + std::to_string(id) + " outside universe");
  if (static_cast<int>(req.user_feats.size()) < cfg_.latent_dim ||
      static_cast<int>(req.ctx_feats.size()) < cfg_.latent_dim)
    throw std::invalid_argument("EnvSpec: request feature vectors shorter than latent_dim");
  double aff = 0.0, ctx = 0.0;
  for (int k = 0; k < cfg_.latent_dim; ++k) {
    aff += req.user_feats[k] * item_latent_[static_cast<size_t>(id) * cfg_.latent_dim + k];
    ctx += req.ctx_feats[k] * item_ctx_[static_cast<size_t>(id) * cfg_.latent_dim + k];
  }
  return cfg_.base_bias + base_[id] + cfg_.affinity_scale * aff + cfg_.context_scale * ctx;
}

double EnvSpec::click_prob(const RerankRequest& req, const std::vector<int>& list, int pos) const {
  if (pos < 0 || pos >= static_cast<int>(list.size()))
    throw std::invalid_argument("EnvSpec::click_prob: position out of range");
  const int slot = req.slot_of(list[pos]);
  if (slot < 0)
    throw std::invalid_argument("EnvSpec::click_prob: item " + std::to_string(list[pos]) +
                                " not in request candidates");
  double logit = quality_logit(req, req.candidates[slot]);
  if (pos > 0) {
    const int cp = category_[list[pos - 1]];
    const int cc = category_[list[pos]];
    logit += cfg_.interact_scale * interact_[static_cast<size_t>(cp) * cfg_.n_categories + cc];
  }
  return std::pow(cfg_.decay_base, pos) * sigmoid(logit);
}

double EnvSpec::list_value(const RerankRequest& req, const std::vector<int>& list) const {
  std::unordered_set<int> seen;
  for (int id : list) {
    if (!seen.insert(id).second)
      throw std::invalid_argument("EnvSpec::list_value: duplicate item " + std::to_string(id));
    if (req.slot_of(id) < 0)
      throw std::invalid_argument("EnvSpec::list_value: item " + std::to_string(id) +
                                  " not in request candidates");
  }
  double v = 0.0;
  for (int pos = 0; pos < static_cast<int>(list.size()); ++pos) v += click_prob(req, list, pos);
  return v;
}

EnvSpec::RequestCache EnvSpec::make_cache(const RerankRequest& req, int max_len) const {
  RequestCache c;
  c.logit.reserve(req.n());
  c.category.reserve(req.n());
  for (const Item& it : req.candidates) {
    c.logit.push_back(quality_logit(req, it));
    c.category.push_back(category_[it.id]);
  }
  c.decay.resize(max_len);
  for (int t = 0; t < max_len; ++t) c.decay[t] = std::pow(cfg_.decay_base, t);
  return c;
}

std::vector<double> EnvSpec::item_features(int item_id) const {
  if (item_id < 0 || item_id >= cfg_.n_items)
    throw std::invalid_argument("EnvSpec: item id " + std::to_string(item_id) + " outside universe");
  std::vector<double> f(cfg_.latent_dim);
  for (int d = 0; d < cfg_.latent_dim; ++d)
    f[d] = item_latent_[static_cast<size_t>(item_id) * cfg_.latent_dim + d];
  return f;
}

double EnvSpec::list_value_cached(const RequestCache& cache, const int* slots, int len) const {
  double v = 0.0;
  for (int t = 0; t < len; ++t) {
    double logit = cache.logit[slots[t]];
    if (t > 0) {
      logit += cfg_.interact_scale *
               interact_[static_cast<size_t>(cache.category[slots[t - 1]]) * cfg_.n_categories +
                         cache.category[slots[t]]];
    }
    v += cache.decay[t] * sigmoid(logit);
  }
  return v;
}

json EnvSpec::to_json() const {
  json j;
  j["seed"] = seed_;
  j["n_items"] = cfg_.n_items;
  j["n_categories"] = cfg_.n_categories;
  j["latent_dim"] = cfg_.latent_dim;
  j["decay_base"] = cfg_.decay_base;
  j["base_bias"] = cfg_.base_bias;
  j["affinity_scale"] = cfg_.affinity_scale;
  j["context_scale"] = cfg_.context_scale;
  j["interact_scale"] = cfg_.interact_scale;
  j["score_noise"] = cfg_.score_noise;
  return j;
}

EnvSpec EnvSpec::from_json(const json& j) {
  EnvConfig cfg;
  cfg.n_items = j.at("n_items").get<int>();
  cfg.n_categories = j.at("n_categories").get<int>();
  cfg.latent_dim = j.at("latent_dim").get<int>();
  cfg.decay_base = j.at("decay_base").get<double>();
  cfg.base_bias = j.at("base_bias").get<double>();
  cfg.affinity_scale = j.at("affinity_scale").get<double>();
  cfg.context_scale = j.at("context_scale").get<double>();
  cfg.interact_scale = j.at("interact_scale").get<double>();
  cfg.score_noise = j.at("score_noise").get<double>();
  return EnvSpec(j.at("seed").get<uint64_t>(), cfg);
}

void EnvSpec::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  os << to_json().dump(2) << '\n';
}

EnvSpec EnvSpec::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  json j;
  is >> j;
  return from_json(j);
}

Dataset synth_generate(const EnvSpec& env, const SynthOptions& opt, uint64_t seed) {
  if (opt.n_candidates > env.config().n_items)
    throw std::invalid_argument("synth_generate: more candidates than universe items");
  if (opt.list_len < 1 || opt.list_len > opt.n_candidates)
    throw std::invalid_argument("synth_generate: list_len must be in [1, n_candidates]");
  const int k = env.config().latent_dim;
  Dataset ds;
  ds.reserve(static_cast<size_t>(opt.n_users) * opt.sessions_per_user);
  for (int u = 0; u < opt.n_users; ++u) {
    Rng user_rng(derive_seed(seed, "user", u));
    std::vector<double> user_feats(k);
    for (double& x : user_feats) x = user_rng.normal();
    for (int s = 0; s < opt.sessions_per_user; ++s) {
      Rng rng(derive_seed(seed, "session", (static_cast<uint64_t>(u) << 20) | s));
      ExposureRecord rec;
      rec.request.request_id = static_cast<int64_t>(u) * 100000 + s;
      rec.request.user_id = u;
      rec.request.user_feats = user_feats;
      rec.request.ctx_feats.resize(k);
      for (double& x : rec.request.ctx_feats) x = rng.normal();
      const std::vector<int> ids =
          rng.sample_without_replacement(env.config().n_items, opt.n_candidates);
      // Item features expose the affinity latents; the upstream score is a
      // noisy pointwise quality estimate, blind to position and adjacency.
      for (int id : ids) {
        Item it;
        it.id = id;
        it.feats = env.item_features(id);
        rec.request.candidates.push_back(std::move(it));
      }
      for (Item& it : rec.request.candidates) {
        const double q = env.quality_logit(rec.request, it);
        it.score = 1.0 / (1.0 + std::exp(-q)) + env.config().score_noise * rng.normal();
      }
      // Exposure order under the logging policy.
      std::vector<int> order(opt.n_candidates);
      for (int i = 0; i < opt.n_candidates; ++i) order[i] = i;
      bool shuffle = opt.policy == LoggingPolicy::kRandom;
      if (opt.policy == LoggingPolicy::kMixed) shuffle = rng.bernoulli(opt.epsilon);
      if (shuffle) {
        rng.shuffle(order);
      } else {
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
          const Item& ia = rec.request.candidates[a];
          const Item& ib = rec.request.candidates[b];
          if (ia.score != ib.score) return ia.score > ib.score;
          return ia.id < ib.id;
        });
      }
      rec.exposed.resize(opt.list_len);
      for (int t = 0; t < opt.list_len; ++t) rec.exposed[t] = rec.request.candidates[order[t]].id;
      rec.clicks.resize(opt.list_len);
      for (int t = 0; t < opt.list_len; ++t)
        rec.clicks[t] = rng.bernoulli(env.click_prob(rec.request, rec.exposed, t)) ? 1 : 0;
      ds.push_back(std::move(rec));
    }
  }
  return ds;
}

}  // namespace rerank
