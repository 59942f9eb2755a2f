#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "rlda/rng.hpp"

namespace rlda {

// Dense row-major f64 tensor. The flat buffer length always equals the shape
// product; every constructor and reshape enforces that.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int64_t> shape, double fill = 0.0);

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int64_t> shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor({1}, v); }

  // 1-D tensor from explicit values.
  static Tensor row(std::initializer_list<double> v);
  static Tensor from_vector(const std::vector<double>& v);
  // 2-D tensor from explicit values, shape [rows, cols].
  static Tensor matrix(int64_t rows, int64_t cols, std::initializer_list<double> v);

  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double mean = 0.0,
                      double stddev = 1.0);

  const std::vector<int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
  // Rank-2 accessor, row-major.
  double& at2(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
  double at2(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  void fill(double v);
  void reshape(std::vector<int64_t> shape);  // numel must be preserved

  std::string shape_str() const;

 private:
  std::vector<int64_t> shape_;
  std::vector<double> data_;
};

// Throws DimensionError naming `what` unless a.shape == b.shape.
void check_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace rlda
