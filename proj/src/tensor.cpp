#include "gocoma/tensor.hpp"

#include <cmath>
#include <string>

namespace gocoma {

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("dot: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double squared_norm(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += v * v;
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

bool all_finite(std::span<const double> a) {
  for (double v : a)
    if (!std::isfinite(v)) return false;
  return true;
}

Vec matvec(const Matrix& w, std::span<const double> x) {
  if (w.cols() != x.size())
    throw InvalidInput("matvec: matrix has " + std::to_string(w.cols()) + " columns, vector has " +
                       std::to_string(x.size()) + " entries");
  Vec y(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    double s = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) s += row[c] * x[c];
    y[r] = s;
  }
  return y;
}

Vec matvec_transposed(const Matrix& w, std::span<const double> g) {
  if (w.rows() != g.size()) throw InvalidInput("matvec_transposed: shape mismatch");
  Vec y(w.cols(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    const double gr = g[r];
    if (gr == 0.0) continue;
    for (std::size_t c = 0; c < row.size(); ++c) y[c] += row[c] * gr;
  }
  return y;
}

void add_outer(Matrix& grad, std::span<const double> g, std::span<const double> x) {
  if (grad.rows() != g.size() || grad.cols() != x.size()) throw InvalidInput("add_outer: shape mismatch");
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    if (g[r] == 0.0) continue;
    auto row = grad.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += g[r] * x[c];
  }
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  if (x.size() != y.size()) throw InvalidInput("axpy: size mismatch");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

Vec scaled(std::span<const double> x, double alpha) {
  Vec y(x.begin(), x.end());
  for (double& v : y) v *= alpha;
  return y;
}

}  // namespace gocoma
