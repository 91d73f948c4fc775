#include "rerank/params.hpp"

#include <cmath>
#include <stdexcept>

namespace rerank {

Tensor& ParameterSet::create(const std::string& name, std::vector<int> shape, int fan_in,
                             Rng& rng) {
  if (has(name)) throw std::logic_error("ParameterSet: duplicate parameter '" + name + "'");
  if (fan_in <= 0) throw std::invalid_argument("ParameterSet: fan_in must be positive");
  Tensor t = Tensor::zeros(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.v) v = rng.uniform(-bound, bound);
  index_[name] = count();
  names_.push_back(name);
  tensors_.push_back(std::move(t));
  moment1_.push_back(Tensor::zeros(tensors_.back().shape));
  moment2_.push_back(Tensor::zeros(tensors_.back().shape));
  return tensors_.back();
}

Tensor& ParameterSet::create_const(const std::string& name, std::vector<int> shape, double value) {
  if (has(name)) throw std::logic_error("ParameterSet: duplicate parameter '" + name + "'");
  index_[name] = count();
  names_.push_back(name);
  tensors_.push_back(Tensor::full(std::move(shape), value));
  moment1_.push_back(Tensor::zeros(tensors_.back().shape));
  moment2_.push_back(Tensor::zeros(tensors_.back().shape));
  return tensors_.back();
}

const Tensor& ParameterSet::get(const std::string& name) const {
  return tensors_[index_of(name)];
}

Tensor& ParameterSet::get(const std::string& name) { return tensors_[index_of(name)]; }

int ParameterSet::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::logic_error("ParameterSet: unknown parameter '" + name + "'");
  return it->second;
}

int64_t ParameterSet::total_values() const {
  int64_t n = 0;
  for (const Tensor& t : tensors_) n += t.numel();
  return n;
}

GradMap GradMap::zeros_like(const ParameterSet& ps) {
  GradMap gm;
  gm.grads.reserve(ps.count());
  for (int i = 0; i < ps.count(); ++i) gm.grads.push_back(Tensor::zeros(ps.tensor(i).shape));
  return gm;
}

void GradMap::add(const GradMap& other) {
  if (grads.size() != other.grads.size())
    throw std::logic_error("GradMap::add: parameter count mismatch");
  for (size_t i = 0; i < grads.size(); ++i)
    for (size_t j = 0; j < grads[i].v.size(); ++j) grads[i].v[j] += other.grads[i].v[j];
}

void GradMap::scale(double c) {
  for (Tensor& t : grads)
    for (double& v : t.v) v *= c;
}

double GradMap::max_abs() const {
  double m = 0.0;
  for (const Tensor& t : grads)
    for (double v : t.v) m = std::max(m, std::fabs(v));
  return m;
}

void adam_step(ParameterSet& params, const GradMap& grads, const AdamConfig& cfg) {
  if (static_cast<int>(grads.grads.size()) != params.count())
    throw std::invalid_argument("adam_step: gradient count does not match parameter count");
  for (int i = 0; i < params.count(); ++i) {
    if (!grads.grads[i].same_shape(params.tensor(i)))
      throw std::invalid_argument("adam_step: gradient shape mismatch for '" + params.names()[i] +
                                  "'");
    if (!grads.grads[i].finite())
      throw std::runtime_error("adam_step: non-finite gradient for '" + params.names()[i] + "'");
  }
  const int64_t t = params.step_ + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (int i = 0; i < params.count(); ++i) {
    Tensor& w = params.tensors_[i];
    Tensor& m = params.moment1_[i];
    Tensor& v = params.moment2_[i];
    const Tensor& g = grads.grads[i];
    for (size_t j = 0; j < w.v.size(); ++j) {
      m.v[j] = cfg.beta1 * m.v[j] + (1.0 - cfg.beta1) * g.v[j];
      v.v[j] = cfg.beta2 * v.v[j] + (1.0 - cfg.beta2) * g.v[j] * g.v[j];
      const double mhat = m.v[j] / bc1;
      const double vhat = v.v[j] / bc2;
      w.v[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  params.step_ = t;
}

GradMap collect_param_grads(const Graph& g, const ParameterSet& ps) {
  GradMap gm = GradMap::zeros_like(ps);
  for (const Graph::ParamRef& p : g.params()) {
    const int i = ps.index_of(p.name);
    const Tensor& pg = g.grad(p.node);
    if (pg.v.empty()) continue;  // loss did not reach this parameter
    for (size_t j = 0; j < pg.v.size(); ++j) gm.grads[i].v[j] += pg.v[j];
  }
  return gm;
}

int ParamBinder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const int node = g_.param(name, &ps_.get(name));
  bound_[name] = node;
  return node;
}

}  // namespace rerank
