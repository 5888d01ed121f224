#include "pgseg/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace pgseg {

static i64 shape_numel(const std::vector<i64>& shape) {
  i64 n = 1;
  for (i64 d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<i64> shape) : shape_(std::move(shape)) {
  numel_ = shape_numel(shape_);
  store_ = std::make_shared<std::vector<double>>(static_cast<size_t>(numel_), 0.0);
}

Tensor Tensor::zeros(std::vector<i64> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<i64> shape, double v) {
  Tensor t(std::move(shape));
  t.fill_(v);
  return t;
}

Tensor Tensor::from(std::vector<i64> shape, std::vector<double> values) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = shape_numel(t.shape_);
  if (t.numel_ != static_cast<i64>(values.size()))
    throw ShapeError("from(): " + std::to_string(values.size()) + " values for shape " +
                     shape_str(t.shape_));
  t.store_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

i64 Tensor::size(int i) const {
  int n = static_cast<int>(shape_.size());
  if (i < 0) i += n;
  if (i < 0 || i >= n) throw ShapeError("size(): axis out of range");
  return shape_[static_cast<size_t>(i)];
}

double Tensor::item() const {
  if (numel_ != 1) throw ShapeError("item(): tensor has " + std::to_string(numel_) + " elements");
  return (*store_)[0];
}

Tensor Tensor::reshape(std::vector<i64> shape) const {
  if (shape_numel(shape) != numel_)
    throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.numel_ = numel_;
  t.store_ = store_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.numel_ = numel_;
  t.store_ = std::make_shared<std::vector<double>>(*store_);
  return t;
}

void Tensor::fill_(double v) {
  for (double& x : *store_) x = v;
}

void Tensor::copy_from(const Tensor& src) {
  if (!same_shape(src)) throw ShapeError("copy_from(): shape mismatch");
  std::memcpy(data(), src.data(), static_cast<size_t>(numel_) * sizeof(double));
}

bool Tensor::all_finite() const {
  const double* p = data();
  for (i64 i = 0; i < numel_; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

std::string shape_str(const std::vector<i64>& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

void check_shape(const Tensor& t, const std::vector<i64>& expect, const char* what) {
  if (t.shape() != expect)
    throw ShapeError(std::string(what) + ": expected " + shape_str(expect) + ", got " +
                     shape_str(t.shape()));
}

void fill_randn(Tensor& t, Rng& rng, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  double* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i) p[i] = d(rng);
}

void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  double* p = t.data();
  for (i64 i = 0; i < t.numel(); ++i) p[i] = d(rng);
}

}  // namespace pgseg
