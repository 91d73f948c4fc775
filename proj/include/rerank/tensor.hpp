#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace rerank {

// Dense row-major tensor of doubles. Rank 0 (scalar), 1, or 2 in practice.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);
  static Tensor vec(std::vector<double> values);
  static Tensor matrix(int rows, int cols, std::vector<double> values);
  static Tensor ones_matrix(int rows, int cols);

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int rank() const { return static_cast<int>(shape.size()); }
  // Hot accessors; shape agreement is validated at the op boundary.
  int rows() const { return shape[0]; }
  int cols() const { return shape[1]; }

  double& at(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }

  double item() const;  // single-element tensors only

  bool finite() const;
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool operator==(const Tensor& o) const { return shape == o.shape && v == o.v; }
};

std::string shape_str(const std::vector<int>& shape);

// Lower-triangular causal mask: mask[t][s] = 1 for s <= t.
Tensor causal_mask(int n);

}  // namespace rerank
