#include "rerank/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace rerank {

void register_linear(ParameterSet& ps, const std::string& prefix, int out, int in, Rng& rng) {
  ps.create(prefix + ".w", {out, in}, in, rng);
  ps.create_const(prefix + ".b", {out}, 0.0);
}

int linear(Graph& g, ParamBinder& bind, const std::string& prefix, int x) {
  return g.add_bias(g.matmul(x, bind(prefix + ".w"), /*transpose_b=*/true), bind(prefix + ".b"));
}

void register_attention(ParameterSet& ps, const std::string& prefix, int n_heads, int width,
                        int in_width, Rng& rng) {
  if (width % n_heads != 0)
    throw std::invalid_argument("attention: width " + std::to_string(width) +
                                " not divisible by " + std::to_string(n_heads) + " heads");
  const int dh = width / n_heads;
  for (int h = 0; h < n_heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    register_linear(ps, hp + ".q", dh, in_width, rng);
    register_linear(ps, hp + ".k", dh, in_width, rng);
    register_linear(ps, hp + ".v", dh, in_width, rng);
  }
  register_linear(ps, prefix + ".o", width, width, rng);
}

int multihead_attention(Graph& g, ParamBinder& bind, const std::string& prefix, int q_in,
                        int kv_in, const Tensor& mask, int n_heads, int width) {
  const int dh = width / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<int> heads;
  heads.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    const int q = linear(g, bind, hp + ".q", q_in);
    const int k = linear(g, bind, hp + ".k", kv_in);
    const int v = linear(g, bind, hp + ".v", kv_in);
    const int scores = g.scale(g.matmul(q, k, /*transpose_b=*/true), inv_sqrt);
    const int attn = g.softmax_masked(scores, mask);
    heads.push_back(g.matmul(attn, v));
  }
  return linear(g, bind, prefix + ".o", g.concat_cols(heads));
}

void register_transformer(ParameterSet& ps, const std::string& prefix, int n_layers,
                          const ModelDims& dims, Rng& rng) {
  const int dm = dims.d_model;
  for (int l = 0; l < n_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    ps.create_const(lp + ".ln1.g", {dm}, 1.0);
    ps.create_const(lp + ".ln1.b", {dm}, 0.0);
    register_attention(ps, lp + ".attn", dims.n_heads, dm, dm, rng);
    ps.create_const(lp + ".ln2.g", {dm}, 1.0);
    ps.create_const(lp + ".ln2.b", {dm}, 0.0);
    register_linear(ps, lp + ".ffn1", dm * dims.ffn_mult, dm, rng);
    register_linear(ps, lp + ".ffn2", dm, dm * dims.ffn_mult, rng);
  }
  ps.create_const(prefix + ".lnf.g", {dm}, 1.0);
  ps.create_const(prefix + ".lnf.b", {dm}, 0.0);
}

int transformer_stack(Graph& g, ParamBinder& bind, const std::string& prefix, int n_layers, int x,
                      bool causal, const ModelDims& dims) {
  const int t = g.value(x).rows();
  const Tensor mask = causal ? causal_mask(t) : Tensor::ones_matrix(t, t);
  for (int l = 0; l < n_layers; ++l) {
    const std::string lp = prefix + ".l" + std::to_string(l);
    const int a = g.layer_norm_rows(x, bind(lp + ".ln1.g"), bind(lp + ".ln1.b"));
    x = g.add(x, multihead_attention(g, bind, lp + ".attn", a, a, mask, dims.n_heads, dims.d_model));
    const int f = g.layer_norm_rows(x, bind(lp + ".ln2.g"), bind(lp + ".ln2.b"));
    x = g.add(x, linear(g, bind, lp + ".ffn2", g.sigmoid(linear(g, bind, lp + ".ffn1", f))));
  }
  return g.layer_norm_rows(x, bind(prefix + ".lnf.g"), bind(prefix + ".lnf.b"));
}

std::vector<int> score_buckets_for_request(const RerankRequest& req, int buckets) {
  const int n = req.n();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (req.candidates[a].score != req.candidates[b].score)
      return req.candidates[a].score < req.candidates[b].score;
    return req.candidates[a].id < req.candidates[b].id;
  });
  std::vector<int> bucket(n);
  for (int rank = 0; rank < n; ++rank)
    bucket[order[rank]] = std::min(buckets - 1, rank * buckets / n);
  return bucket;
}

void register_features(ParameterSet& ps, const std::string& prefix, const ModelDims& dims,
                       Rng& rng) {
  const int d = dims.embed_dim;
  register_linear(ps, prefix + ".user", d, dims.feat_dim, rng);
  register_linear(ps, prefix + ".ctx", d, dims.feat_dim, rng);
  register_linear(ps, prefix + ".item_dense", d, dims.feat_dim, rng);
  ps.create(prefix + ".item_id", {dims.n_items, d}, d, rng);
  ps.create(prefix + ".score", {dims.score_buckets, d}, d, rng);
  for (const char* f : {"user", "item", "ctx", "score"}) {
    ps.create_const(prefix + ".gln." + std::string(f) + ".g", {d}, 1.0);
    ps.create_const(prefix + ".gln." + std::string(f) + ".b", {d}, 0.0);
  }
  register_attention(ps, prefix + ".domain", dims.n_heads, d, d, rng);
}

FeatureOutputs feature_stack(Graph& g, ParamBinder& bind, const std::string& prefix,
                             const ModelDims& dims, const RerankRequest& req,
                             const std::vector<int>& item_ids) {
  const int t = static_cast<int>(item_ids.size());
  if (t == 0) throw std::invalid_argument("feature_stack: empty item sequence");
  const int d = dims.embed_dim;

  std::vector<int> slots(t);
  std::vector<int> id_rows(t);
  for (int i = 0; i < t; ++i) {
    const int s = req.slot_of(item_ids[i]);
    if (s < 0)
      throw std::invalid_argument("feature_stack: item " + std::to_string(item_ids[i]) +
                                  " not in request candidates");
    slots[i] = s;
    id_rows[i] = req.candidates[s].id;
  }

  // Static fields are computed once and replicated along the sequence axis.
  const int user_vec = g.leaf(Tensor::matrix(1, dims.feat_dim, req.user_feats));
  const int ctx_vec = g.leaf(Tensor::matrix(1, dims.feat_dim, req.ctx_feats));
  int user_e = linear(g, bind, prefix + ".user", user_vec);
  int ctx_e = linear(g, bind, prefix + ".ctx", ctx_vec);
  user_e = g.layer_norm_rows(user_e, bind(prefix + ".gln.user.g"), bind(prefix + ".gln.user.b"));
  ctx_e = g.layer_norm_rows(ctx_e, bind(prefix + ".gln.ctx.g"), bind(prefix + ".gln.ctx.b"));
  const std::vector<int> rep(t, 0);
  const int user_rows = g.gather_rows(user_e, rep);
  const int ctx_rows = g.gather_rows(ctx_e, rep);

  Tensor dense = Tensor::zeros({t, dims.feat_dim});
  for (int i = 0; i < t; ++i)
    for (int k = 0; k < dims.feat_dim; ++k) dense.at(i, k) = req.candidates[slots[i]].feats[k];
  int item_rows = g.add(g.embed(bind(prefix + ".item_id"), id_rows),
                        linear(g, bind, prefix + ".item_dense", g.leaf(std::move(dense))));
  item_rows =
      g.layer_norm_rows(item_rows, bind(prefix + ".gln.item.g"), bind(prefix + ".gln.item.b"));

  const std::vector<int> all_buckets = score_buckets_for_request(req, dims.score_buckets);
  std::vector<int> buckets(t);
  for (int i = 0; i < t; ++i) buckets[i] = all_buckets[slots[i]];
  int score_rows = g.embed(bind(prefix + ".score"), buckets);
  score_rows =
      g.layer_norm_rows(score_rows, bind(prefix + ".gln.score.g"), bind(prefix + ".gln.score.b"));

  // Field-major stack (4t x d): rows [0,t) user, [t,2t) item, ... Tokens of
  // one position are rows {s, t+s, 2t+s, 3t+s}; the mask confines attention
  // to fields of the same position.
  const std::vector<int> fields{user_rows, item_rows, ctx_rows, score_rows};
  const int nf = dims.n_fields();
  const int stacked = g.concat_rows(fields);
  Tensor mask = Tensor::zeros({nf * t, nf * t});
  for (int i = 0; i < nf * t; ++i)
    for (int j = 0; j < nf * t; ++j)
      if (i % t == j % t) mask.at(i, j) = 1.0;
  const int enhanced =
      multihead_attention(g, bind, prefix + ".domain", stacked, stacked, mask, dims.n_heads, d);

  std::vector<int> enhanced_fields;
  for (int f = 0; f < nf; ++f) {
    std::vector<int> rows(t);
    for (int s = 0; s < t; ++s) rows[s] = f * t + s;
    enhanced_fields.push_back(g.gather_rows(enhanced, rows));
  }
  std::vector<int> cols = fields;
  cols.insert(cols.end(), enhanced_fields.begin(), enhanced_fields.end());
  FeatureOutputs out;
  out.combined = g.concat_cols(cols);  // (t, 2*nf*d)
  out.user_embed = user_e;
  return out;
}

}  // namespace rerank
