#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "rerank/graph.hpp"
#include "rerank/rng.hpp"
#include "rerank/tensor.hpp"

namespace rerank {

// Named parameter tensors plus Adam moment state. Registration order is fixed
// and determines checkpoint layout and gradient flattening.
class ParameterSet {
 public:
  // Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
  Tensor& create(const std::string& name, std::vector<int> shape, int fan_in, Rng& rng);
  Tensor& create_const(const std::string& name, std::vector<int> shape, double value);

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  int index_of(const std::string& name) const;

  int count() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  const Tensor& tensor(int i) const { return tensors_[i]; }
  Tensor& tensor(int i) { return tensors_[i]; }

  int64_t step() const { return step_; }
  int64_t total_values() const;

  friend struct AdamStepAccess;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> tensors_;
  std::vector<Tensor> moment1_;
  std::vector<Tensor> moment2_;
  std::unordered_map<std::string, int> index_;
  int64_t step_ = 0;

  friend void adam_step(ParameterSet&, const struct GradMap&, const struct AdamConfig&);
};

// Gradients aligned index-for-index with a ParameterSet.
struct GradMap {
  std::vector<Tensor> grads;

  static GradMap zeros_like(const ParameterSet& ps);
  void add(const GradMap& other);       // fixed elementwise order
  void scale(double c);
  double max_abs() const;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard Adam with bias correction. Rejects non-finite gradients, naming
// the offending parameter. Increments the step counter by exactly 1.
void adam_step(ParameterSet& params, const GradMap& grads, const AdamConfig& cfg);

// Collects per-parameter gradients out of a graph after backward(). Params
// absent from the graph get zeros.
GradMap collect_param_grads(const Graph& g, const ParameterSet& ps);

// Binds ParameterSet entries to graph nodes, memoized per graph.
class ParamBinder {
 public:
  ParamBinder(Graph& g, const ParameterSet& ps) : g_(g), ps_(ps) {}
  int operator()(const std::string& name);

 private:
  Graph& g_;
  const ParameterSet& ps_;
  std::unordered_map<std::string, int> bound_;
};

}  // namespace rerank
