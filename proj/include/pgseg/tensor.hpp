#pragma once

#include <memory>
#include <vector>

#include "pgseg/common.hpp"

namespace pgseg {

// Dense row-major double tensor with shared storage. Copies are shallow;
// clone() is deep. Always contiguous, offset 0.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<i64> shape);

  static Tensor zeros(std::vector<i64> shape);
  static Tensor full(std::vector<i64> shape, double v);
  static Tensor from(std::vector<i64> shape, std::vector<double> values);
  static Tensor scalar(double v) { return full({1}, v); }

  bool defined() const { return store_ != nullptr; }
  i64 ndim() const { return static_cast<i64>(shape_.size()); }
  i64 numel() const { return numel_; }
  i64 size(int i) const;
  const std::vector<i64>& shape() const { return shape_; }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return store_->data(); }
  const double* data() const { return store_->data(); }
  double item() const;

  Tensor reshape(std::vector<i64> shape) const;  // shares storage
  Tensor clone() const;
  void fill_(double v);
  void copy_from(const Tensor& src);  // shape-checked element copy

  bool shares_storage(const Tensor& o) const { return store_ == o.store_; }
  bool all_finite() const;

 private:
  std::vector<i64> shape_;
  i64 numel_ = 0;
  std::shared_ptr<std::vector<double>> store_;
};

std::string shape_str(const std::vector<i64>& s);
void check_shape(const Tensor& t, const std::vector<i64>& expect, const char* what);

// Seeded initializers.
void fill_randn(Tensor& t, Rng& rng, double stddev);
void fill_uniform(Tensor& t, Rng& rng, double lo, double hi);

}  // namespace pgseg
