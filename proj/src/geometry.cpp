#include "gocoma/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace gocoma::geo {

namespace {

void require_same_curvature(const BallPoint& x, const BallPoint& y, const char* op) {
  if (!(x.curvature() == y.curvature()))
    throw InvalidInput(std::string(op) + ": curvature mismatch");
  if (x.dim() != y.dim()) throw InvalidInput(std::string(op) + ": dimension mismatch");
}

void require_finite(std::span<const double> v, const char* op) {
  if (!all_finite(v)) throw InvalidInput(std::string(op) + ": non-finite input");
}

double clamped_atanh(double x) { return std::atanh(std::clamp(x, 0.0, kAtanhClamp)); }

// exp0 scale factor f = tanh(x)/x with x = sqrt(c)|v|, and f'(|v|)/|v|.
struct ExpFactor {
  double f;
  double df_over_n;
};
ExpFactor exp_factor(double n, double s) {
  if (n < kOriginThreshold) return {1.0, -2.0 * s * s / 3.0};
  const double x = s * n;
  const double t = std::tanh(x);
  const double sech2 = 1.0 - t * t;
  return {t / x, s * s * (x * sech2 - t) / (x * x * x)};
}

// log0 scale factor h = atanh(x)/x and h'(|x|)/|x|.
struct LogFactor {
  double h;
  double dh_over_n;
};
LogFactor log_factor(double n, double s) {
  if (n < kOriginThreshold) return {1.0, 2.0 * s * s / 3.0};
  const double x = std::min(s * n, kAtanhClamp);
  const double a = std::atanh(x);
  return {a / x, s * s * (x / (1.0 - x * x) - a) / (x * x * x)};
}

Vec exp0_raw(std::span<const double> v, double s) {
  const auto [f, unused] = exp_factor(norm(v), s);
  (void)unused;
  return scaled(v, f);
}

// Gradients of the raw (unprojected) Mobius sum.
grad::Pair add_raw_vjp(std::span<const double> x, std::span<const double> y, double c,
                       std::span<const double> g) {
  const double xy = dot(x, y);
  const double x2 = squared_norm(x);
  const double y2 = squared_norm(y);
  const double a = 1.0 + 2.0 * c * xy + c * y2;
  const double b = 1.0 - c * x2;
  const double d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
  const std::size_t n = x.size();

  Vec num(n);
  for (std::size_t i = 0; i < n; ++i) num[i] = a * x[i] + b * y[i];
  Vec g_num = scaled(g, 1.0 / d);
  const double g_d = -dot(g, num) / (d * d);
  const double g_a = dot(g_num, x);
  const double g_b = dot(g_num, y);

  double g_xy = 2.0 * c * g_a + 2.0 * c * g_d;
  double g_y2 = c * g_a + c * c * x2 * g_d;
  double g_x2 = -c * g_b + c * c * y2 * g_d;

  grad::Pair out{scaled(g_num, a), scaled(g_num, b)};
  for (std::size_t i = 0; i < n; ++i) {
    out.dx[i] += g_xy * y[i] + 2.0 * g_x2 * x[i];
    out.dy[i] += g_xy * x[i] + 2.0 * g_y2 * y[i];
  }
  return out;
}

// |(-x) (+)_c y|^2 through the equivalent closed form
// |x - y|^2 / (1 - 2c<x,y> + c^2 |x|^2 |y|^2), which is exactly symmetric in
// floating point and has no cancellation when x and y are close.
double sq_gyro_distance(std::span<const double> x, std::span<const double> y, double c) {
  double diff2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) diff2 += (x[i] - y[i]) * (x[i] - y[i]);
  const double denom = 1.0 - 2.0 * c * dot(x, y) + c * c * squared_norm(x) * squared_norm(y);
  return diff2 / denom;
}

}  // namespace

Curvature::Curvature(double c) : c_(c), sqrt_c_(std::sqrt(c)) {
  if (!(c > 0.0) || !std::isfinite(c)) throw InvalidInput("curvature must be positive and finite");
}

BallPoint::BallPoint(Vec data, Curvature c) : data_(std::move(data)), c_(c) {
  require_finite(data_, "BallPoint");
  if (c_.value() * squared_norm(data_) >= 1.0)
    throw DomainError("BallPoint: point lies on or outside the ball boundary");
}

BallPoint BallPoint::origin(std::size_t dim, Curvature c) { return BallPoint(Vec(dim, 0.0), c); }

double BallPoint::norm() const { return gocoma::norm(data_); }

BallPoint project_to_ball(std::span<const double> x, Curvature c) {
  require_finite(x, "project_to_ball");
  const double n = norm(x);
  Vec out(x.begin(), x.end());
  if (c.sqrt_c() * n >= 1.0 - kBallEpsilon) {
    const double k = c.max_norm() / n;
    for (double& v : out) v *= k;
  }
  return BallPoint(std::move(out), c, BallPoint::Unchecked{});
}

BallPoint exp0(std::span<const double> v, Curvature c) {
  require_finite(v, "exp0");
  return project_to_ball(exp0_raw(v, c.sqrt_c()), c);
}

Vec log0(std::span<const double> x, Curvature c) {
  require_finite(x, "log0");
  const double n = norm(x);
  if (c.sqrt_c() * n >= 1.0) throw DomainError("log0: point lies on or outside the ball boundary");
  return scaled(x, log_factor(n, c.sqrt_c()).h);
}

Vec log0(const BallPoint& x) { return log0(x.span(), x.curvature()); }

Vec mobius_add_raw(std::span<const double> x, std::span<const double> y, double c) {
  const double xy = dot(x, y);
  const double x2 = squared_norm(x);
  const double y2 = squared_norm(y);
  const double a = 1.0 + 2.0 * c * xy + c * y2;
  const double b = 1.0 - c * x2;
  const double d = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (a * x[i] + b * y[i]) / d;
  return out;
}

BallPoint mobius_add(const BallPoint& x, const BallPoint& y) {
  require_same_curvature(x, y, "mobius_add");
  return project_to_ball(mobius_add_raw(x.span(), y.span(), x.curvature().value()), x.curvature());
}

BallPoint mobius_neg(const BallPoint& x) { return BallPoint(scaled(x.span(), -1.0), x.curvature()); }

BallPoint mobius_scalar_mul(double r, const BallPoint& x) {
  if (!std::isfinite(r)) throw InvalidInput("mobius_scalar_mul: non-finite scalar");
  const double s = x.curvature().sqrt_c();
  const double n = x.norm();
  if (n < kOriginThreshold) return project_to_ball(scaled(x.span(), r), x.curvature());
  const double xs = std::min(s * n, kAtanhClamp);
  const double k = std::tanh(r * std::atanh(xs)) / xs;
  return project_to_ball(scaled(x.span(), k), x.curvature());
}

BallPoint mobius_matvec(const Matrix& w, const BallPoint& x) {
  if (w.cols() != x.dim())
    throw InvalidInput("mobius_matvec: weight has " + std::to_string(w.cols()) + " columns, point has dimension " +
                       std::to_string(x.dim()));
  return exp0(matvec(w, log0(x)), x.curvature());
}

BallPoint mobius_linear(const MobiusLinearParams& p, const BallPoint& x) {
  if (p.bias.dim() != p.weight.rows()) throw InvalidInput("mobius_linear: bias dimension != weight rows");
  return mobius_add(mobius_matvec(p.weight, x), p.bias);
}

double geodesic_dist(const BallPoint& x, const BallPoint& y) {
  require_same_curvature(x, y, "geodesic_dist");
  const double s = x.curvature().sqrt_c();
  return 2.0 / s * clamped_atanh(s * std::sqrt(sq_gyro_distance(x.span(), y.span(), x.curvature().value())));
}

double gcs(const BallPoint& x, const BallPoint& y) {
  require_same_curvature(x, y, "gcs");
  // (sqrt(c)/2) d_c(x, y) = atanh(sqrt(c) |(-x) (+)_c y|)
  const double s = x.curvature().sqrt_c();
  return std::cos(clamped_atanh(s * std::sqrt(sq_gyro_distance(x.span(), y.span(), x.curvature().value()))));
}

namespace grad {

Vec project_to_ball(std::span<const double> x, Curvature c, std::span<const double> g_out) {
  const double n = norm(x);
  Vec g(g_out.begin(), g_out.end());
  if (c.sqrt_c() * n < 1.0 - kBallEpsilon) return g;
  // y = m x / |x|  ->  dy/dx = (m/|x|)(I - x x^T/|x|^2)
  const double k = c.max_norm() / n;
  const double proj = dot(x, g_out) / (n * n);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = k * (g_out[i] - proj * x[i]);
  return g;
}

Vec exp0(std::span<const double> v, Curvature c, std::span<const double> g_out) {
  const double s = c.sqrt_c();
  const Vec raw = exp0_raw(v, s);
  const Vec g = project_to_ball(raw, c, g_out);
  const auto [f, df_over_n] = exp_factor(norm(v), s);
  Vec dv = scaled(g, f);
  axpy(df_over_n * dot(v, g), v, dv);
  return dv;
}

Vec log0(const BallPoint& x, std::span<const double> g_out) {
  const auto [h, dh_over_n] = log_factor(x.norm(), x.curvature().sqrt_c());
  Vec dx = scaled(g_out, h);
  axpy(dh_over_n * dot(x.span(), g_out), x.span(), dx);
  return dx;
}

Pair mobius_add(const BallPoint& x, const BallPoint& y, std::span<const double> g_out) {
  require_same_curvature(x, y, "grad::mobius_add");
  const double c = x.curvature().value();
  const Vec raw = mobius_add_raw(x.span(), y.span(), c);
  const Vec g = project_to_ball(raw, x.curvature(), g_out);
  return add_raw_vjp(x.span(), y.span(), c, g);
}

ScalarMul mobius_scalar_mul(double r, const BallPoint& x, std::span<const double> g_out) {
  const double s = x.curvature().sqrt_c();
  const double n = x.norm();
  if (n < kOriginThreshold) {
    const Vec g = project_to_ball(scaled(x.span(), r), x.curvature(), g_out);
    return {dot(x.span(), g), scaled(g, r)};
  }
  const double xs = std::min(s * n, kAtanhClamp);
  const double u = std::atanh(xs);
  const double t = std::tanh(r * u);
  const double k = t / xs;
  const Vec g = project_to_ball(scaled(x.span(), k), x.curvature(), g_out);

  const double xg = dot(x.span(), g);
  const double dk_dr = (1.0 - t * t) * u / xs;
  const double dt_dx = (1.0 - t * t) * r / (1.0 - xs * xs);
  const double dk_over_n = s * s * (dt_dx * xs - t) / (xs * xs * xs);

  ScalarMul out{dk_dr * xg, scaled(g, k)};
  axpy(dk_over_n * xg, x.span(), out.dx);
  return out;
}

MatVec mobius_matvec(const Matrix& w, const BallPoint& x, std::span<const double> g_out) {
  const Vec t = log0(x);
  const Vec u = gocoma::matvec(w, t);
  const Vec gu = exp0(u, x.curvature(), g_out);
  MatVec out{Matrix(w.rows(), w.cols()), {}};
  add_outer(out.dw, gu, t);
  out.dx = log0(x, matvec_transposed(w, gu));
  return out;
}

Pair gcs(const BallPoint& x, const BallPoint& y, double g_out) {
  require_same_curvature(x, y, "grad::gcs");
  const double c = x.curvature().value();
  const double s = x.curvature().sqrt_c();
  const auto xs = x.span();
  const auto ys = y.span();
  const double q = sq_gyro_distance(xs, ys, c);
  const double a = std::sqrt(q);

  // gcs = cos(atanh(s * sqrt(q))); dgcs/dq, with the q -> 0 limit -c/2.
  double dq;
  if (a < kOriginThreshold) {
    dq = -0.5 * c;
  } else if (s * a < kAtanhClamp) {
    dq = -std::sin(std::atanh(s * a)) * s / (1.0 - c * q) / (2.0 * a);
  } else {
    return {Vec(xs.size(), 0.0), Vec(ys.size(), 0.0)};
  }
  dq *= g_out;

  // q = N / D with N = |x - y|^2, D = 1 - 2c<x,y> + c^2 |x|^2 |y|^2.
  const double x2 = squared_norm(xs);
  const double y2 = squared_norm(ys);
  const double d = 1.0 - 2.0 * c * dot(xs, ys) + c * c * x2 * y2;
  const double g_n = dq / d;
  const double g_d = -dq * q / d;
  Pair out{Vec(xs.size()), Vec(ys.size())};
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double diff = xs[i] - ys[i];
    out.dx[i] = 2.0 * g_n * diff + g_d * (-2.0 * c * ys[i] + 2.0 * c * c * y2 * xs[i]);
    out.dy[i] = -2.0 * g_n * diff + g_d * (-2.0 * c * xs[i] + 2.0 * c * c * x2 * ys[i]);
  }
  return out;
}

}  // namespace grad

}  // namespace gocoma::geo
