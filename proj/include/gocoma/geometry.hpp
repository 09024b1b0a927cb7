#pragma once

// Poincare-ball operations with curvature -c.
//
// Every operation that returns a BallPoint passes its result through
// project_to_ball, so outputs always satisfy sqrt(c)*|x| <= 1 - kBallEpsilon.
// The `grad` namespace holds the matching vector-Jacobian products; each one
// recomputes the forward internals from the same inputs and includes the
// projection step, so chaining them gives the exact reverse-mode gradient of
// the forward composition.

#include <span>
#include <utility>

#include "gocoma/tensor.hpp"

namespace gocoma::geo {

inline constexpr double kBallEpsilon = 1e-5;
inline constexpr double kOriginThreshold = 1e-12;
inline constexpr double kAtanhClamp = 1.0 - 1e-12;

class Curvature {
 public:
  explicit Curvature(double c = 1.0);
  double value() const { return c_; }
  double sqrt_c() const { return sqrt_c_; }
  // Largest norm a projected point may have.
  double max_norm() const { return (1.0 - kBallEpsilon) / sqrt_c_; }
  bool operator==(const Curvature& o) const { return c_ == o.c_; }

 private:
  double c_;
  double sqrt_c_;
};

class BallPoint {
 public:
  BallPoint() = default;
  // Validates finiteness and c*|x|^2 < 1; throws DomainError otherwise.
  BallPoint(Vec data, Curvature c);
  static BallPoint origin(std::size_t dim, Curvature c);

  const Vec& data() const { return data_; }
  std::span<const double> span() const { return data_; }
  Curvature curvature() const { return c_; }
  std::size_t dim() const { return data_.size(); }
  double norm() const;

 private:
  struct Unchecked {};
  BallPoint(Vec data, Curvature c, Unchecked) : data_(std::move(data)), c_(c) {}
  friend BallPoint project_to_ball(std::span<const double>, Curvature);

  Vec data_;
  Curvature c_;
};

BallPoint project_to_ball(std::span<const double> x, Curvature c);

BallPoint exp0(std::span<const double> v, Curvature c);
Vec log0(const BallPoint& x);
// log0 on a raw vector; DomainError if |x| >= 1/sqrt(c).
Vec log0(std::span<const double> x, Curvature c);

BallPoint mobius_add(const BallPoint& x, const BallPoint& y);
BallPoint mobius_neg(const BallPoint& x);
BallPoint mobius_scalar_mul(double r, const BallPoint& x);
BallPoint mobius_matvec(const Matrix& w, const BallPoint& x);

struct MobiusLinearParams {
  Matrix weight;
  BallPoint bias;
};
BallPoint mobius_linear(const MobiusLinearParams& p, const BallPoint& x);

double geodesic_dist(const BallPoint& x, const BallPoint& y);
double gcs(const BallPoint& x, const BallPoint& y);

// Raw Mobius sum without the final projection.
Vec mobius_add_raw(std::span<const double> x, std::span<const double> y, double c);

namespace grad {

Vec project_to_ball(std::span<const double> x, Curvature c, std::span<const double> g_out);
Vec exp0(std::span<const double> v, Curvature c, std::span<const double> g_out);
Vec log0(const BallPoint& x, std::span<const double> g_out);

struct Pair {
  Vec dx;
  Vec dy;
};
Pair mobius_add(const BallPoint& x, const BallPoint& y, std::span<const double> g_out);

struct ScalarMul {
  double dr;
  Vec dx;
};
ScalarMul mobius_scalar_mul(double r, const BallPoint& x, std::span<const double> g_out);

struct MatVec {
  Matrix dw;
  Vec dx;
};
MatVec mobius_matvec(const Matrix& w, const BallPoint& x, std::span<const double> g_out);

// Gradient of gcs(x, y) scaled by the upstream scalar.
Pair gcs(const BallPoint& x, const BallPoint& y, double g_out);

}  // namespace grad

}  // namespace gocoma::geo
