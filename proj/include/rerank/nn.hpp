#pragma once

#include <string>
#include <vector>

#include "rerank/data.hpp"
#include "rerank/graph.hpp"
#include "rerank/params.hpp"

namespace rerank {

struct ModelDims {
  int embed_dim = 16;   // per-field embedding width
  int d_model = 32;
  int d_pos = 8;
  int n_heads = 2;
  int ffn_mult = 2;
  int score_buckets = 16;
  int n_items = 200;    // item-id embedding rows
  int feat_dim = 4;     // dense feature width (user, context, item)
  int max_len = 6;      // positional table rows

  int n_fields() const { return 4; }  // user, item, context, score
  int head_dim(int width) const { return width / n_heads; }
};

// y = x * W^T + b with W:(out,in), b:(out). Param names: prefix+".w"/".b".
int linear(Graph& g, ParamBinder& bind, const std::string& prefix, int x);
void register_linear(ParameterSet& ps, const std::string& prefix, int out, int in, Rng& rng);

// Scaled dot-product multi-head attention. q_in:(r,dq), kv_in:(s,dq);
// mask:(r,s). Heads carry separate projections; outputs are concatenated and
// mixed by an output projection back to `width`.
int multihead_attention(Graph& g, ParamBinder& bind, const std::string& prefix, int q_in,
                        int kv_in, const Tensor& mask, int n_heads, int width);
void register_attention(ParameterSet& ps, const std::string& prefix, int n_heads, int width,
                        int in_width, Rng& rng);

// Pre-norm transformer stack with sigmoid feed-forward and a final layer
// norm. `causal` applies a lower-triangular attention mask.
int transformer_stack(Graph& g, ParamBinder& bind, const std::string& prefix, int n_layers, int x,
                      bool causal, const ModelDims& dims);
void register_transformer(ParameterSet& ps, const std::string& prefix, int n_layers,
                          const ModelDims& dims, Rng& rng);

// Quantile buckets of the upstream scores within one candidate set: ranks
// (score ascending, id ascending on ties) scaled to `buckets`.
std::vector<int> score_buckets_for_request(const RerankRequest& req, int buckets);

// Shared feature processing: per-field embeddings, per-group layer norm, and
// inter-domain attention across the fields of each position, realized as one
// masked self-attention over all positions' field tokens.
//
// Returns (t x 2*n_fields*embed_dim): per position, flattened normalized
// fields concatenated with their attention-enhanced counterparts.
struct FeatureOutputs {
  int combined;   // (t, 2*n_fields*d)
  int user_embed; // (1, d) normalized user field embedding
};
FeatureOutputs feature_stack(Graph& g, ParamBinder& bind, const std::string& prefix,
                             const ModelDims& dims, const RerankRequest& req,
                             const std::vector<int>& item_ids);
void register_features(ParameterSet& ps, const std::string& prefix, const ModelDims& dims,
                       Rng& rng);

}  // namespace rerank
