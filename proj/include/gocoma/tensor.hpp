#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gocoma/errors.hpp"

namespace gocoma {

using Vec = std::vector<double>;

// Dense row-major matrix. Small and dumb on purpose: every layer in this
// project is a handful of mat-vecs per sample.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double squared_norm(std::span<const double> a);
bool all_finite(std::span<const double> a);

// y = W x
Vec matvec(const Matrix& w, std::span<const double> x);
// y = W^T g
Vec matvec_transposed(const Matrix& w, std::span<const double> g);
// G += g x^T
void add_outer(Matrix& grad, std::span<const double> g, std::span<const double> x);

void axpy(double alpha, std::span<const double> x, std::span<double> y);
Vec scaled(std::span<const double> x, double alpha);

}  // namespace gocoma
