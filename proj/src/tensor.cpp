#include "rerank/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace rerank {

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  t.shape = std::move(shape);
  t.v.assign(static_cast<size_t>(t.numel()), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (double& x : t.v) x = value;
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t;
  t.v.assign(1, value);
  return t;
}

Tensor Tensor::vec(std::vector<double> values) {
  Tensor t;
  t.shape = {static_cast<int>(values.size())};
  t.v = std::move(values);
  return t;
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> values) {
  if (static_cast<int64_t>(values.size()) != static_cast<int64_t>(rows) * cols)
    throw std::invalid_argument("Tensor::matrix: value count does not match shape");
  Tensor t;
  t.shape = {rows, cols};
  t.v = std::move(values);
  return t;
}

Tensor Tensor::ones_matrix(int rows, int cols) { return full({rows, cols}, 1.0); }

double Tensor::item() const {
  if (numel() != 1) throw std::logic_error("Tensor::item: tensor has " + std::to_string(numel()) + " elements");
  return v[0];
}

bool Tensor::finite() const {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor causal_mask(int n) {
  Tensor m = Tensor::zeros({n, n});
  for (int t = 0; t < n; ++t)
    for (int s = 0; s <= t; ++s) m.at(t, s) = 1.0;
  return m;
}

}  // namespace rerank
