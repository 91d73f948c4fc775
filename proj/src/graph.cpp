#include "rerank/graph.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace rerank {

namespace {

[[noreturn]] void fail(OpKind kind, const std::string& what) {
  throw std::invalid_argument(std::string(op_name(kind)) + ": " + what);
}

// Error strings are built only on the failure path; ops sit on hot loops.
#define OP_REQUIRE(cond, kind, msg) \
  do {                              \
    if (!(cond)) fail(kind, msg);   \
  } while (0)

// Softmax over the unmasked entries of one row, written into p (masked -> 0).
// Returns the number of unmasked entries.
int masked_softmax_row(const double* x, const double* mask, double* p, int n) {
  double mx = -HUGE_VAL;
  int live = 0;
  for (int j = 0; j < n; ++j) {
    if (mask[j] != 0.0) {
      ++live;
      if (x[j] > mx) mx = x[j];
    }
  }
  if (live == 0) return 0;
  double z = 0.0;
  for (int j = 0; j < n; ++j) {
    if (mask[j] != 0.0) {
      p[j] = std::exp(x[j] - mx);
      z += p[j];
    } else {
      p[j] = 0.0;
    }
  }
  for (int j = 0; j < n; ++j) p[j] /= z;
  return live;
}

double stable_bce_logit(double x, double y) {
  // max(x,0) - x*y + log(1 + exp(-|x|))
  return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::fabs(x)));
}

}  // namespace

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kParam: return "param";
    case OpKind::kAdd: return "add";
    case OpKind::kAddBias: return "add_bias";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kMatMulNT: return "matmul_nt";
    case OpKind::kConcatCols: return "concat_cols";
    case OpKind::kConcatRows: return "concat_rows";
    case OpKind::kReshape: return "reshape";
    case OpKind::kRepeatRow: return "repeat_row";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLayerNormRows: return "layer_norm_rows";
    case OpKind::kSoftmaxMasked: return "softmax_masked";
    case OpKind::kSum: return "sum";
    case OpKind::kBceLogits: return "bce_logits";
    case OpKind::kCrossEntropyRows: return "cross_entropy_rows";
    case OpKind::kKlRows: return "kl_rows";
    case OpKind::kKlDiv: return "kl_div";
    case OpKind::kCrossEntropyPick: return "cross_entropy_pick";
  }
  return "?";
}

void Graph::check_id(int id) const {
  if (id < 0 || id >= size()) throw std::logic_error("Graph: node id out of range");
}

const Tensor& Graph::val(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

const Tensor& Graph::value(int id) const {
  check_id(id);
  return val(id);
}

const Tensor& Graph::grad(int id) const {
  check_id(id);
  return nodes_[id].grad;
}

Tensor& Graph::grad_ref(int id) {
  Node& n = nodes_[id];
  if (n.grad.v.empty() && val(id).numel() > 0) n.grad = Tensor::zeros(val(id).shape);
  return n.grad;
}

bool Graph::any_requires_grad(const std::vector<int>& ids) const {
  for (int id : ids)
    if (nodes_[id].requires_grad) return true;
  return false;
}

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return size() - 1;
}

int Graph::leaf(Tensor value) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(value);
  return push(std::move(n));
}

int Graph::param(const std::string& name, const Tensor* value) {
  if (value == nullptr) fail(OpKind::kParam, "null tensor for '" + name + "'");
  Node n;
  n.kind = OpKind::kParam;
  n.external = value;
  n.requires_grad = true;
  int id = push(std::move(n));
  params_.push_back({name, id});
  return id;
}

int Graph::add(int a, int b) {
  check_id(a);
  check_id(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  OP_REQUIRE(ta.same_shape(tb), OpKind::kAdd,
          "shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.value = ta;
  for (size_t i = 0; i < n.value.v.size(); ++i) n.value.v[i] += tb.v[i];
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    for (int in : self.inputs) {
      if (!g.nodes_[in].requires_grad) continue;
      Tensor& gi = g.grad_ref(in);
      for (size_t i = 0; i < gi.v.size(); ++i) gi.v[i] += self.grad.v[i];
    }
  };
  return push(std::move(n));
}

int Graph::add_bias(int x, int bias) {
  check_id(x);
  check_id(bias);
  const Tensor& tx = val(x);
  const Tensor& tb = val(bias);
  OP_REQUIRE(tx.rank() == 2 && tb.rank() == 1 && tb.shape[0] == tx.cols(), OpKind::kAddBias,
          "shape mismatch " + shape_str(tx.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.kind = OpKind::kAddBias;
  n.inputs = {x, bias};
  n.value = tx;
  const int r = tx.rows(), c = tx.cols();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n.value.at(i, j) += tb.v[j];
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    const int r = self.value.rows(), c = self.value.cols();
    if (g.nodes_[self.inputs[0]].requires_grad) {
      Tensor& gx = g.grad_ref(self.inputs[0]);
      for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += self.grad.v[i];
    }
    if (g.nodes_[self.inputs[1]].requires_grad) {
      Tensor& gb = g.grad_ref(self.inputs[1]);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) gb.v[j] += self.grad.at(i, j);
    }
  };
  return push(std::move(n));
}

int Graph::scale(int x, double c) {
  check_id(x);
  Node n;
  n.kind = OpKind::kScale;
  n.inputs = {x};
  n.value = val(x);
  for (double& v : n.value.v) v *= c;
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += c * self.grad.v[i];
  };
  return push(std::move(n));
}

int Graph::matmul(int a, int b, bool transpose_b) {
  check_id(a);
  check_id(b);
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  const OpKind kind = transpose_b ? OpKind::kMatMulNT : OpKind::kMatMul;
  OP_REQUIRE(ta.rank() == 2 && tb.rank() == 2, kind,
          "expects matrices, got " + shape_str(ta.shape) + " and " + shape_str(tb.shape));
  const int m = ta.rows(), k = ta.cols();
  const int bk = transpose_b ? tb.cols() : tb.rows();
  const int nn = transpose_b ? tb.rows() : tb.cols();
  OP_REQUIRE(k == bk, kind,
          "inner dimension mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.kind = kind;
  n.inputs = {a, b};
  n.value = Tensor::zeros({m, nn});
  {
    const double* pa = ta.v.data();
    const double* pb = tb.v.data();
    double* pc = n.value.v.data();
    if (transpose_b) {
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < nn; ++j) {
          const double* ra = pa + static_cast<size_t>(i) * k;
          const double* rb = pb + static_cast<size_t>(j) * k;
          double s = 0.0;
          for (int t = 0; t < k; ++t) s += ra[t] * rb[t];
          pc[static_cast<size_t>(i) * nn + j] = s;
        }
    } else {
      for (int i = 0; i < m; ++i)
        for (int t = 0; t < k; ++t) {
          const double av = pa[static_cast<size_t>(i) * k + t];
          const double* rb = pb + static_cast<size_t>(t) * nn;
          double* rc = pc + static_cast<size_t>(i) * nn;
          for (int j = 0; j < nn; ++j) rc[j] += av * rb[j];
        }
    }
  }
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [transpose_b, m, k, nn](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    const double* pa = g.val(self.inputs[0]).v.data();
    const double* pb = g.val(self.inputs[1]).v.data();
    const double* go = self.grad.v.data();
    if (g.nodes_[self.inputs[0]].requires_grad) {
      double* ga = g.grad_ref(self.inputs[0]).v.data();
      // dA = dC * B^T (plain) or dC * B (transposed b); both read B rows of
      // length matching dC columns.
      for (int i = 0; i < m; ++i) {
        const double* gr = go + static_cast<size_t>(i) * nn;
        double* gar = ga + static_cast<size_t>(i) * k;
        if (transpose_b) {
          for (int j = 0; j < nn; ++j) {
            const double gv = gr[j];
            const double* rb = pb + static_cast<size_t>(j) * k;
            for (int t = 0; t < k; ++t) gar[t] += gv * rb[t];
          }
        } else {
          for (int t = 0; t < k; ++t) {
            const double* rb = pb + static_cast<size_t>(t) * nn;
            double s = 0.0;
            for (int j = 0; j < nn; ++j) s += gr[j] * rb[j];
            gar[t] += s;
          }
        }
      }
    }
    if (g.nodes_[self.inputs[1]].requires_grad) {
      double* gb = g.grad_ref(self.inputs[1]).v.data();
      if (transpose_b) {
        // dB = dC^T * A, B is (n,k)
        for (int i = 0; i < m; ++i) {
          const double* gr = go + static_cast<size_t>(i) * nn;
          const double* ra = pa + static_cast<size_t>(i) * k;
          for (int j = 0; j < nn; ++j) {
            const double gv = gr[j];
            double* rb = gb + static_cast<size_t>(j) * k;
            for (int t = 0; t < k; ++t) rb[t] += gv * ra[t];
          }
        }
      } else {
        // dB = A^T * dC, B is (k,n)
        for (int i = 0; i < m; ++i) {
          const double* gr = go + static_cast<size_t>(i) * nn;
          const double* ra = pa + static_cast<size_t>(i) * k;
          for (int t = 0; t < k; ++t) {
            const double av = ra[t];
            double* rb = gb + static_cast<size_t>(t) * nn;
            for (int j = 0; j < nn; ++j) rb[j] += av * gr[j];
          }
        }
      }
    }
  };
  return push(std::move(n));
}

int Graph::concat_cols(const std::vector<int>& xs) {
  OP_REQUIRE(!xs.empty(), OpKind::kConcatCols, "needs at least one input");
  for (int x : xs) check_id(x);
  const int r = val(xs[0]).rows();
  int total = 0;
  for (int x : xs) {
    const Tensor& t = val(x);
    OP_REQUIRE(t.rank() == 2 && t.rows() == r, OpKind::kConcatCols,
            "row mismatch, got " + shape_str(t.shape) + " expected " + std::to_string(r) + " rows");
    total += t.cols();
  }
  Node n;
  n.kind = OpKind::kConcatCols;
  n.inputs = xs;
  n.value = Tensor::zeros({r, total});
  int off = 0;
  for (int x : xs) {
    const Tensor& t = val(x);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < t.cols(); ++j) n.value.at(i, off + j) = t.at(i, j);
    off += t.cols();
  }
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [r](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    int off = 0;
    for (int in : self.inputs) {
      const int c = g.val(in).cols();
      if (g.nodes_[in].requires_grad) {
        Tensor& gi = g.grad_ref(in);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gi.at(i, j) += self.grad.at(i, off + j);
      }
      off += c;
    }
  };
  return push(std::move(n));
}

int Graph::concat_rows(const std::vector<int>& xs) {
  OP_REQUIRE(!xs.empty(), OpKind::kConcatRows, "needs at least one input");
  for (int x : xs) check_id(x);
  const int c = val(xs[0]).cols();
  int total = 0;
  for (int x : xs) {
    const Tensor& t = val(x);
    OP_REQUIRE(t.rank() == 2 && t.cols() == c, OpKind::kConcatRows,
            "column mismatch, got " + shape_str(t.shape));
    total += t.rows();
  }
  Node n;
  n.kind = OpKind::kConcatRows;
  n.inputs = xs;
  n.value = Tensor::zeros({total, c});
  int off = 0;
  for (int x : xs) {
    const Tensor& t = val(x);
    for (int i = 0; i < t.rows(); ++i)
      for (int j = 0; j < c; ++j) n.value.at(off + i, j) = t.at(i, j);
    off += t.rows();
  }
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    int off = 0;
    for (int in : self.inputs) {
      const int r = g.val(in).rows();
      if (g.nodes_[in].requires_grad) {
        Tensor& gi = g.grad_ref(in);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gi.at(i, j) += self.grad.at(off + i, j);
      }
      off += r;
    }
  };
  return push(std::move(n));
}

int Graph::reshape(int x, std::vector<int> shape) {
  check_id(x);
  const Tensor& tx = val(x);
  int64_t n_new = 1;
  for (int d : shape) n_new *= d;
  OP_REQUIRE(n_new == tx.numel(), OpKind::kReshape,
          "element count mismatch " + shape_str(tx.shape) + " -> " + shape_str(shape));
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {x};
  n.value.shape = std::move(shape);
  n.value.v = tx.v;
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += self.grad.v[i];
  };
  return push(std::move(n));
}

int Graph::repeat_row(int x, int times) {
  check_id(x);
  const Tensor& tx = val(x);
  OP_REQUIRE(tx.rank() == 1, OpKind::kRepeatRow, "expects a vector, got " + shape_str(tx.shape));
  OP_REQUIRE(times >= 1, OpKind::kRepeatRow, "times must be >= 1");
  const int c = tx.shape[0];
  Node n;
  n.kind = OpKind::kRepeatRow;
  n.inputs = {x};
  n.value = Tensor::zeros({times, c});
  for (int i = 0; i < times; ++i)
    for (int j = 0; j < c; ++j) n.value.at(i, j) = tx.v[j];
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [times, c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    for (int i = 0; i < times; ++i)
      for (int j = 0; j < c; ++j) gx.v[j] += self.grad.at(i, j);
  };
  return push(std::move(n));
}

int Graph::gather_rows(int x, std::vector<int> idx) {
  check_id(x);
  const Tensor& tx = val(x);
  OP_REQUIRE(tx.rank() == 2, OpKind::kGatherRows, "expects a matrix, got " + shape_str(tx.shape));
  for (int i : idx)
    OP_REQUIRE(i >= 0 && i < tx.rows(), OpKind::kGatherRows,
            "index " + std::to_string(i) + " out of range for " + shape_str(tx.shape));
  const int k = static_cast<int>(idx.size());
  const int c = tx.cols();
  Node n;
  n.kind = OpKind::kGatherRows;
  n.inputs = {x};
  n.value = Tensor::zeros({k, c});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < c; ++j) n.value.at(i, j) = tx.at(idx[i], j);
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [idx = std::move(idx), c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < c; ++j) gx.at(idx[i], j) += self.grad.at(static_cast<int>(i), j);
  };
  return push(std::move(n));
}

int Graph::sigmoid(int x) {
  check_id(x);
  Node n;
  n.kind = OpKind::kSigmoid;
  n.inputs = {x};
  n.value = val(x);
  for (double& v : n.value.v) v = 1.0 / (1.0 + std::exp(-v));
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    for (size_t i = 0; i < gx.v.size(); ++i) {
      const double s = self.value.v[i];
      gx.v[i] += self.grad.v[i] * s * (1.0 - s);
    }
  };
  return push(std::move(n));
}

int Graph::layer_norm_rows(int x, int gain, int bias, double eps) {
  check_id(x);
  check_id(gain);
  check_id(bias);
  const Tensor& tx = val(x);
  const Tensor& tg = val(gain);
  const Tensor& tb = val(bias);
  OP_REQUIRE(tx.rank() == 2, OpKind::kLayerNormRows, "expects a matrix, got " + shape_str(tx.shape));
  OP_REQUIRE(tg.rank() == 1 && tg.shape[0] == tx.cols() && tb.same_shape(tg), OpKind::kLayerNormRows,
          "gain/bias shape mismatch for " + shape_str(tx.shape));
  const int r = tx.rows(), c = tx.cols();
  Node n;
  n.kind = OpKind::kLayerNormRows;
  n.inputs = {x, gain, bias};
  n.value = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += tx.at(i, j);
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = tx.at(i, j) - mu;
      var += d * d;
    }
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j)
      n.value.at(i, j) = (tx.at(i, j) - mu) * inv * tg.v[j] + tb.v[j];
  }
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [eps, r, c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    const Tensor& tx = g.val(self.inputs[0]);
    const Tensor& tg = g.val(self.inputs[1]);
    const bool need_x = g.nodes_[self.inputs[0]].requires_grad;
    const bool need_g = g.nodes_[self.inputs[1]].requires_grad;
    const bool need_b = g.nodes_[self.inputs[2]].requires_grad;
    std::vector<double> xhat(c);
    for (int i = 0; i < r; ++i) {
      double mu = 0.0;
      for (int j = 0; j < c; ++j) mu += tx.at(i, j);
      mu /= c;
      double var = 0.0;
      for (int j = 0; j < c; ++j) {
        const double d = tx.at(i, j) - mu;
        var += d * d;
      }
      var /= c;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < c; ++j) xhat[j] = (tx.at(i, j) - mu) * inv;
      if (need_g) {
        Tensor& gg = g.grad_ref(self.inputs[1]);
        for (int j = 0; j < c; ++j) gg.v[j] += self.grad.at(i, j) * xhat[j];
      }
      if (need_b) {
        Tensor& gb = g.grad_ref(self.inputs[2]);
        for (int j = 0; j < c; ++j) gb.v[j] += self.grad.at(i, j);
      }
      if (need_x) {
        Tensor& gx = g.grad_ref(self.inputs[0]);
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (int j = 0; j < c; ++j) {
          const double gy = self.grad.at(i, j) * tg.v[j];
          sum_gy += gy;
          sum_gy_xhat += gy * xhat[j];
        }
        for (int j = 0; j < c; ++j) {
          const double gy = self.grad.at(i, j) * tg.v[j];
          gx.at(i, j) += inv * (gy - sum_gy / c - xhat[j] * sum_gy_xhat / c);
        }
      }
    }
  };
  return push(std::move(n));
}

int Graph::softmax_masked(int logits, Tensor mask) {
  check_id(logits);
  const Tensor& tx = val(logits);
  OP_REQUIRE(tx.rank() == 2 && tx.same_shape(mask), OpKind::kSoftmaxMasked,
          "logits " + shape_str(tx.shape) + " vs mask " + shape_str(mask.shape));
  const int r = tx.rows(), c = tx.cols();
  Node n;
  n.kind = OpKind::kSoftmaxMasked;
  n.inputs = {logits};
  n.value = Tensor::zeros({r, c});
  for (int i = 0; i < r; ++i) {
    const int live =
        masked_softmax_row(&tx.v[static_cast<size_t>(i) * c], &mask.v[static_cast<size_t>(i) * c],
                           &n.value.v[static_cast<size_t>(i) * c], c);
    OP_REQUIRE(live > 0, OpKind::kSoftmaxMasked, "row " + std::to_string(i) + " is fully masked");
  }
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [mask = std::move(mask), r, c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    for (int i = 0; i < r; ++i) {
      double dot = 0.0;
      for (int j = 0; j < c; ++j) dot += self.value.at(i, j) * self.grad.at(i, j);
      for (int j = 0; j < c; ++j) {
        if (mask.at(i, j) == 0.0) continue;
        gx.at(i, j) += self.value.at(i, j) * (self.grad.at(i, j) - dot);
      }
    }
  };
  return push(std::move(n));
}

int Graph::sum(int x) {
  check_id(x);
  Node n;
  n.kind = OpKind::kSum;
  n.inputs = {x};
  double s = 0.0;
  for (double v : val(x).v) s += v;
  n.value = Tensor::scalar(s);
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    const double go = self.grad.v[0];
    for (double& v : gx.v) v += go;
  };
  return push(std::move(n));
}

int Graph::bce_logits(int logits, Tensor targets, Tensor weights) {
  check_id(logits);
  const Tensor& tx = val(logits);
  OP_REQUIRE(tx.same_shape(targets) && tx.same_shape(weights), OpKind::kBceLogits,
          "logits " + shape_str(tx.shape) + " vs targets " + shape_str(targets.shape) +
              " vs weights " + shape_str(weights.shape));
  Node n;
  n.kind = OpKind::kBceLogits;
  n.inputs = {logits};
  double loss = 0.0;
  for (size_t i = 0; i < tx.v.size(); ++i)
    if (weights.v[i] != 0.0) loss += weights.v[i] * stable_bce_logit(tx.v[i], targets.v[i]);
  n.value = Tensor::scalar(loss);
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [targets = std::move(targets), weights = std::move(weights)](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    const Tensor& tx = g.val(self.inputs[0]);
    Tensor& gx = g.grad_ref(self.inputs[0]);
    const double go = self.grad.v[0];
    for (size_t i = 0; i < gx.v.size(); ++i) {
      if (weights.v[i] == 0.0) continue;
      const double p = 1.0 / (1.0 + std::exp(-tx.v[i]));
      gx.v[i] += go * weights.v[i] * (p - targets.v[i]);
    }
  };
  return push(std::move(n));
}

int Graph::cross_entropy_rows(int logits, Tensor mask, std::vector<int> targets) {
  check_id(logits);
  const Tensor& tx = val(logits);
  OP_REQUIRE(tx.rank() == 2 && tx.same_shape(mask), OpKind::kCrossEntropyRows,
          "logits " + shape_str(tx.shape) + " vs mask " + shape_str(mask.shape));
  const int r = tx.rows(), c = tx.cols();
  OP_REQUIRE(static_cast<int>(targets.size()) == r, OpKind::kCrossEntropyRows,
          "target count " + std::to_string(targets.size()) + " vs " + std::to_string(r) + " rows");
  Tensor probs = Tensor::zeros({r, c});
  double loss = 0.0;
  for (int i = 0; i < r; ++i) {
    const int live =
        masked_softmax_row(&tx.v[static_cast<size_t>(i) * c], &mask.v[static_cast<size_t>(i) * c],
                           &probs.v[static_cast<size_t>(i) * c], c);
    OP_REQUIRE(live > 0, OpKind::kCrossEntropyRows, "row " + std::to_string(i) + " is fully masked");
    const int t = targets[i];
    OP_REQUIRE(t >= 0 && t < c && mask.at(i, t) != 0.0, OpKind::kCrossEntropyRows,
            "target " + std::to_string(t) + " masked or out of range in row " + std::to_string(i));
    loss -= std::log(probs.at(i, t));
  }
  Node n;
  n.kind = OpKind::kCrossEntropyRows;
  n.inputs = {logits};
  n.value = Tensor::scalar(loss);
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [probs = std::move(probs), mask = std::move(mask), targets = std::move(targets), r,
                c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    const double go = self.grad.v[0];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        if (mask.at(i, j) == 0.0) continue;
        const double onehot = (j == targets[i]) ? 1.0 : 0.0;
        gx.at(i, j) += go * (probs.at(i, j) - onehot);
      }
  };
  return push(std::move(n));
}

int Graph::kl_rows(Tensor q, int logits, Tensor mask) {
  check_id(logits);
  const Tensor& tx = val(logits);
  OP_REQUIRE(tx.rank() == 2 && tx.same_shape(mask) && tx.same_shape(q), OpKind::kKlRows,
          "logits " + shape_str(tx.shape) + " vs q " + shape_str(q.shape) + " vs mask " +
              shape_str(mask.shape));
  const int r = tx.rows(), c = tx.cols();
  Tensor probs = Tensor::zeros({r, c});
  std::vector<double> qsum(r, 0.0);
  double loss = 0.0;
  for (int i = 0; i < r; ++i) {
    const int live =
        masked_softmax_row(&tx.v[static_cast<size_t>(i) * c], &mask.v[static_cast<size_t>(i) * c],
                           &probs.v[static_cast<size_t>(i) * c], c);
    OP_REQUIRE(live > 0, OpKind::kKlRows, "row " + std::to_string(i) + " is fully masked");
    for (int j = 0; j < c; ++j) {
      const double qv = q.at(i, j);
      if (qv == 0.0) continue;
      OP_REQUIRE(mask.at(i, j) != 0.0, OpKind::kKlRows,
              "q support outside mask at step " + std::to_string(i + 1));
      qsum[i] += qv;
      loss += qv * (std::log(qv) - std::log(probs.at(i, j)));
    }
  }
  Node n;
  n.kind = OpKind::kKlRows;
  n.inputs = {logits};
  n.value = Tensor::scalar(loss);
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [q = std::move(q), probs = std::move(probs), mask = std::move(mask),
                qsum = std::move(qsum), r, c](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    Tensor& gx = g.grad_ref(self.inputs[0]);
    const double go = self.grad.v[0];
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) {
        if (mask.at(i, j) == 0.0) continue;
        gx.at(i, j) += go * (qsum[i] * probs.at(i, j) - q.at(i, j));
      }
  };
  return push(std::move(n));
}

int Graph::kl_div(Tensor q, int p) {
  check_id(p);
  const Tensor& tp = val(p);
  OP_REQUIRE(tp.same_shape(q), OpKind::kKlDiv,
          "q " + shape_str(q.shape) + " vs p " + shape_str(tp.shape));
  double loss = 0.0;
  for (size_t i = 0; i < q.v.size(); ++i) {
    if (q.v[i] == 0.0) continue;
    OP_REQUIRE(tp.v[i] > 0.0, OpKind::kKlDiv, "p is zero where q has mass");
    loss += q.v[i] * (std::log(q.v[i]) - std::log(tp.v[i]));
  }
  Node n;
  n.kind = OpKind::kKlDiv;
  n.inputs = {p};
  n.value = Tensor::scalar(loss);
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [q = std::move(q)](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    const Tensor& tp = g.val(self.inputs[0]);
    Tensor& gp = g.grad_ref(self.inputs[0]);
    const double go = self.grad.v[0];
    for (size_t i = 0; i < gp.v.size(); ++i) {
      if (q.v[i] == 0.0) continue;
      gp.v[i] += -go * q.v[i] / tp.v[i];
    }
  };
  return push(std::move(n));
}

int Graph::cross_entropy_pick(int p, int index) {
  check_id(p);
  const Tensor& tp = val(p);
  OP_REQUIRE(index >= 0 && index < tp.numel(), OpKind::kCrossEntropyPick,
          "index " + std::to_string(index) + " out of range for " + shape_str(tp.shape));
  OP_REQUIRE(tp.v[index] > 0.0, OpKind::kCrossEntropyPick, "probability at target is zero");
  Node n;
  n.kind = OpKind::kCrossEntropyPick;
  n.inputs = {p};
  n.value = Tensor::scalar(-std::log(tp.v[index]));
  n.requires_grad = any_requires_grad(n.inputs);
  n.backward = [index](Graph& g, int id) {
    const Node& self = g.nodes_[id];
    if (!g.nodes_[self.inputs[0]].requires_grad) return;
    const Tensor& tp = g.val(self.inputs[0]);
    Tensor& gp = g.grad_ref(self.inputs[0]);
    gp.v[index] += -self.grad.v[0] / tp.v[index];
  };
  return push(std::move(n));
}

void Graph::backward(int loss) {
  check_id(loss);
  if (val(loss).numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(val(loss).shape));
  // Mark nodes reachable from the loss (iterative DFS over inputs).
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack{loss};
  reachable[loss] = 1;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    for (int in : nodes_[id].inputs) {
      if (!reachable[in]) {
        reachable[in] = 1;
        stack.push_back(in);
      }
    }
  }
  grad_ref(loss).v[0] = 1.0;
  for (int id = loss; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!reachable[id] || !n.requires_grad || !n.backward) continue;
    if (n.grad.v.empty()) continue;  // never received a gradient
    n.backward(*this, id);
  }
  // Parameters untouched by the loss still report zero gradients.
  for (const ParamRef& p : params_) (void)grad_ref(p.node);
}

}  // namespace rerank
