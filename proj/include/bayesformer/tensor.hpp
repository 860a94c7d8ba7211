#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "bayesformer/errors.hpp"

namespace bayesformer {

/// Dense row-major array of doubles. Rank 0..2 is what the models use; the
/// arithmetic in autodiff.hpp treats every tensor as a (rows, cols) matrix.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1, 1}, {v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row(std::vector<double> values);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }

  // Matrix view: rank-1 tensors are a single row, rank-0 a 1x1.
  std::size_t rows() const {
    if (shape_.size() <= 1) return 1;
    if (shape_.size() != 2) rank_error();
    return shape_[0];
  }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    if (shape_.size() == 1) return shape_[0];
    if (shape_.size() != 2) rank_error();
    return shape_[1];
  }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double item() const;
  bool same_shape(const Tensor& other) const { return rows() == other.rows() && cols() == other.cols(); }
  bool all_finite() const;
  void fill(double v);
  Tensor reshaped(std::vector<std::size_t> shape) const;

  std::string shape_string() const;

 private:
  [[noreturn]] void rank_error() const;
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);

}  // namespace bayesformer
