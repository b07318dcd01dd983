#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace edgs::ad {

/// Error thrown when operand shapes do not conform to an op's shape rule.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense row-major array of 64-bit reals with an explicit shape.
/// Rank 0 is not used; scalars are shape {1}.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {}
  Tensor(std::vector<std::size_t> shape, double fill)
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_))
      throw ShapeError("tensor: data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double v) { return Tensor(std::move(shape), v); }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor row(std::vector<double> v) {
    std::size_t n = v.size();
    return Tensor({n}, std::move(v));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  const std::vector<double>& raw() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-2 tensors.
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  static std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    s += ")";
    return s;
  }
  std::string shape_str() const { return shape_str(shape_); }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace edgs::ad
