#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "istdkd/errors.hpp"

namespace istdkd {

// Dense row-major tensor of doubles, rank 0..4. Rank 0 is a scalar holder
// (size 1). Shapes are small ints; no views, every op copies or writes in
// place.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape, double fill = 0.0) : shape_(std::move(shape)) {
    std::int64_t n = 1;
    for (int d : shape_) {
      if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
      n *= d;
    }
    data_.assign(static_cast<std::size_t>(n), fill);
  }

  static Tensor scalar(double v) {
    Tensor t(std::vector<int>{});
    t.data_.assign(1, v);
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t(std::move(shape));
    if (values.size() != t.size()) throw ShapeError("value count does not match shape");
    t.data_ = std::move(values);
    return t;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(int i) { return data_[idx1(i)]; }
  double at(int i) const { return data_[idx1(i)]; }
  double& at(int i, int j) { return data_[idx2(i, j)]; }
  double at(int i, int j) const { return data_[idx2(i, j)]; }
  double& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
  double at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
  double& at(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
  double at(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(data_.size()));
    return data_[0];
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }
  double mean() const { return data_.empty() ? 0.0 : sum() / static_cast<double>(data_.size()); }
  double max() const { return *std::max_element(data_.begin(), data_.end()); }
  double min() const { return *std::min_element(data_.begin(), data_.end()); }

  std::string shape_str() const { return shape_str(shape_); }

  static std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
  }

 private:
  std::size_t idx1(int i) const {
    check_rank(1);
    return static_cast<std::size_t>(i);
  }
  std::size_t idx2(int i, int j) const {
    check_rank(2);
    return static_cast<std::size_t>(i) * shape_[1] + j;
  }
  std::size_t idx3(int i, int j, int k) const {
    check_rank(3);
    return (static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k;
  }
  std::size_t idx4(int i, int j, int k, int l) const {
    check_rank(4);
    return ((static_cast<std::size_t>(i) * shape_[1] + j) * shape_[2] + k) * shape_[3] + l;
  }
  void check_rank(int r) const {
    if (rank() != r)
      throw ShapeError("rank-" + std::to_string(r) + " access on tensor of shape " + shape_str(shape_));
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

inline void require_shape(const Tensor& t, const std::vector<int>& shape, const char* what) {
  if (t.shape() != shape)
    throw ShapeError(std::string(what) + ": expected shape " + Tensor::shape_str(shape) + ", got " + t.shape_str());
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace istdkd
