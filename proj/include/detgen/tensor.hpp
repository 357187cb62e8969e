#pragma once

#include <cstddef>
#include <vector>

namespace detgen {

// Dense row-major f64 tensor. Rank 1 and 2 cover everything this project
// needs; invariant: product(shape) == data.size() and all entries finite at
// public-operation boundaries.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> shape_, std::vector<double> data_);

  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t i) { return data[i]; }
  double at(std::size_t i) const { return data[i]; }
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  // View of row r of a rank-2 tensor as a rank-1 copy.
  Tensor row(std::size_t r) const;

  bool all_finite() const;
  void fill(double v);
  bool same_shape(const Tensor& other) const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);
};

double dot(const Tensor& a, const Tensor& b);
double squared_distance(const Tensor& a, const Tensor& b);
double norm(const Tensor& t);

}  // namespace detgen
