#include "rlda/tensor.hpp"

#include <cmath>
#include <sstream>

#include "rlda/errors.hpp"

namespace rlda {

namespace {

int64_t shape_product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw DimensionError("tensor shape has negative extent");
    n *= d;
  }
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<int64_t> shape, double fill)
    : shape_(std::move(shape)),
      data_(static_cast<size_t>(shape_product(shape_)), fill) {}

Tensor Tensor::row(std::initializer_list<double> v) {
  Tensor t({static_cast<int64_t>(v.size())});
  int64_t i = 0;
  for (double x : v) t.at(i++) = x;
  return t;
}

Tensor Tensor::from_vector(const std::vector<double>& v) {
  Tensor t({static_cast<int64_t>(v.size())});
  t.data_ = v;
  return t;
}

Tensor Tensor::matrix(int64_t rows, int64_t cols, std::initializer_list<double> v) {
  if (static_cast<int64_t>(v.size()) != rows * cols)
    throw DimensionError("Tensor::matrix: value count does not match rows*cols");
  Tensor t({rows, cols});
  int64_t i = 0;
  for (double x : v) t.at(i++) = x;
  return t;
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double mean, double stddev) {
  Tensor t(std::move(shape));
  rng.fill_normal(t.data(), t.numel(), mean, stddev);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

void Tensor::reshape(std::vector<int64_t> shape) {
  if (shape_product(shape) != numel())
    throw DimensionError("reshape: element count mismatch (have " +
                         std::to_string(numel()) + ", new shape " +
                         Tensor(shape).shape_str() + " wants " +
                         std::to_string(shape_product(shape)) + ")");
  shape_ = std::move(shape);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ',';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_str() +
                         " vs " + b.shape_str());
}

}  // namespace rlda
