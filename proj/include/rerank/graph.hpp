#pragma once

#include <functional>
#include <string>
#include <vector>

#include "rerank/tensor.hpp"

namespace rerank {

enum class OpKind {
  kLeaf,
  kParam,
  kAdd,
  kAddBias,
  kScale,
  kMatMul,
  kMatMulNT,
  kConcatCols,
  kConcatRows,
  kReshape,
  kRepeatRow,
  kGatherRows,
  kSigmoid,
  kLayerNormRows,
  kSoftmaxMasked,
  kSum,
  kBceLogits,
  kCrossEntropyRows,
  kKlRows,
  kKlDiv,
  kCrossEntropyPick,
};

const char* op_name(OpKind kind);

// Reverse-mode computation graph. Ops evaluate eagerly on construction; nodes
// are appended in topological order, so the backward pass is a reverse sweep
// over node indices restricted to nodes reachable from the loss. Fully
// sequential and deterministic: same graph + same values => bit-identical
// gradients.
class Graph {
 public:
  // Constant input. Never receives a gradient.
  int leaf(Tensor value);

  // Tracked leaf backed by external storage (a ParameterSet tensor). The
  // pointed-to tensor must outlive the graph and stay unmodified until
  // gradients have been collected.
  int param(const std::string& name, const Tensor* value);

  int add(int a, int b);
  int add_bias(int x, int bias);  // (r,c) + (c,) broadcast over rows
  int scale(int x, double c);
  // a:(m,k) b:(k,n) -> (m,n); with transpose_b, b:(n,k) -> (m,n).
  int matmul(int a, int b, bool transpose_b = false);
  int concat_cols(const std::vector<int>& xs);
  int concat_rows(const std::vector<int>& xs);
  int reshape(int x, std::vector<int> shape);
  int repeat_row(int x, int times);  // (n,) -> (times, n)
  // Row gather; duplicate indices accumulate on the backward pass. Doubles as
  // the embedding lookup when x is a parameter table.
  int gather_rows(int x, std::vector<int> idx);
  int embed(int table, const std::vector<int>& idx) { return gather_rows(table, idx); }
  int sigmoid(int x);
  // Per-row layer norm with learned gain/bias; one instance per feature group.
  int layer_norm_rows(int x, int gain, int bias, double eps = 1e-6);
  // Row-wise softmax over entries with mask==1; masked entries get exactly 0.
  // A fully masked row is rejected.
  int softmax_masked(int logits, Tensor mask);
  int sum(int x);  // scalar

  // sum_ij weights_ij * BCE(targets_ij, sigmoid(logits_ij)), numerically
  // stable in logit space.
  int bce_logits(int logits, Tensor targets, Tensor weights);
  // sum_t -log softmax_masked(logits[t])[targets[t]].
  int cross_entropy_rows(int logits, Tensor mask, std::vector<int> targets);
  // sum_t KL(q[t] || softmax_masked(logits[t])), summed over q > 0 entries.
  // Rejects rows where q puts mass on a masked entry.
  int kl_rows(Tensor q, int logits, Tensor mask);
  // KL(q || p) on probability tensors; q is constant.
  int kl_div(Tensor q, int p);
  int cross_entropy_pick(int p, int index);  // -log p[index]

  // Requires a scalar loss. Gradients of all reachable nodes are populated;
  // every node reachable from the loss is visited exactly once.
  void backward(int loss);

  const Tensor& value(int id) const;
  // Zero-shaped gradient for nodes the loss does not reach.
  const Tensor& grad(int id) const;

  struct ParamRef {
    std::string name;
    int node;
  };
  const std::vector<ParamRef>& params() const { return params_; }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Tensor value;                     // owned output (unused for kParam)
    const Tensor* external = nullptr; // kParam storage
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Graph&, int)> backward;
  };

  int push(Node n);
  const Tensor& val(int id) const;
  Tensor& grad_ref(int id);  // allocates zeros on first touch
  bool any_requires_grad(const std::vector<int>& ids) const;
  void check_id(int id) const;

  std::vector<Node> nodes_;
  std::vector<ParamRef> params_;
  Tensor empty_grad_;

  friend struct GraphBackward;
};

}  // namespace rerank
