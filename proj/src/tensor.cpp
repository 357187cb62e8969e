#include "detgen/tensor.hpp"

#include <cmath>
#include <numeric>

#include "detgen/common.hpp"

namespace detgen {

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> data_)
    : shape(std::move(shape_)), data(std::move(data_)) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  require(n == data.size(), "tensor shape/data size mismatch");
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (std::size_t s : shape) n *= s;
  Tensor t;
  t.shape = std::move(shape);
  t.data.assign(n, 0.0);
  return t;
}

Tensor Tensor::vector(std::vector<double> values) {
  Tensor t;
  t.shape = {values.size()};
  t.data = std::move(values);
  return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols) {
  return zeros({rows, cols});
}

std::size_t Tensor::rows() const {
  require(rank() == 2, "rows() needs a rank-2 tensor");
  return shape[0];
}

std::size_t Tensor::cols() const {
  require(rank() == 2, "cols() needs a rank-2 tensor");
  return shape[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

Tensor Tensor::row(std::size_t r) const {
  require(rank() == 2 && r < shape[0], "row() out of range");
  Tensor out;
  out.shape = {shape[1]};
  out.data.assign(data.begin() + static_cast<std::ptrdiff_t>(r * shape[1]),
                  data.begin() + static_cast<std::ptrdiff_t>((r + 1) * shape[1]));
  return out;
}

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data) x = v;
}

bool Tensor::same_shape(const Tensor& other) const { return shape == other.shape; }

Tensor& Tensor::operator+=(const Tensor& other) {
  require(same_shape(other), "tensor += shape mismatch");
  for (std::size_t i = 0; i < data.size(); ++i) data[i] += other.data[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& x : data) x *= s;
  return *this;
}

double dot(const Tensor& a, const Tensor& b) {
  require(a.size() == b.size(), "dot size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

double squared_distance(const Tensor& a, const Tensor& b) {
  require(a.size() == b.size(), "squared_distance size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc;
}

double norm(const Tensor& t) { return std::sqrt(dot(t, t)); }

}  // namespace detgen
