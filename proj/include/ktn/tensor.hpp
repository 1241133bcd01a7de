#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ktn/error.hpp"

namespace ktn {

/// Dense row-major tensor of doubles. Feature maps are rank 3 (H x W x C),
/// batches of them rank 4 (N x H x W x C), kernels rank 4 (kh x kw x Cin x Cout).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : dims_(std::move(dims)) {
    for (auto d : dims_) {
      if (d == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_string());
    }
    data_.assign(product(dims_), fill);
  }

  Tensor(std::vector<std::size_t> dims, std::vector<double> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    for (auto d : dims_) {
      if (d == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_string());
    }
    if (product(dims_) != data_.size()) {
      throw ShapeError("data length " + std::to_string(data_.size()) +
                       " does not match dims " + shape_string());
    }
  }

  static std::size_t product(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           std::multiplies<>());
  }

  const std::vector<std::size_t>& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> span() noexcept { return data_; }
  std::span<const double> span() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * dims_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * dims_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double& at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }
  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same data, new extents; the element count must not change.
  Tensor reshaped(std::vector<std::size_t> dims) const {
    return Tensor(std::move(dims), data_);
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
    os << ')';
    return os.str();
  }

  bool same_shape(const Tensor& o) const noexcept { return dims_ == o.dims_; }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(double s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
  friend Tensor operator*(Tensor a, double s) { return a *= s; }
  friend Tensor operator*(double s, Tensor a) { return a *= s; }

  bool operator==(const Tensor& o) const = default;

 private:
  void require_same_shape(const Tensor& o, const char* op) const {
    if (dims_ != o.dims_) {
      throw ShapeError(std::string("operator") + op + ": " + shape_string() + " vs " +
                       o.shape_string());
    }
  }

  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

/// Largest absolute elementwise difference; shapes must match.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: " + a.shape_string() + " vs " + b.shape_string());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline Tensor feature_map(std::size_t h, std::size_t w, std::size_t c, double fill = 0.0) {
  return Tensor({h, w, c}, fill);
}

}  // namespace ktn
