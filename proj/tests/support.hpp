#pragma once

// Shared helpers for the unit and acceptance suites: random generators and a
// central finite-difference oracle that only ever calls forward code.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "gocoma/geometry.hpp"
#include "gocoma/rng.hpp"
#include "gocoma/tensor.hpp"

namespace testing_support {

using gocoma::Matrix;
using gocoma::Rng;
using gocoma::Vec;

inline Vec random_vec(Rng& rng, std::size_t n, double scale = 1.0) {
  Vec v(n);
  for (double& x : v) x = scale * rng.uniform(-1.0, 1.0);
  return v;
}

inline Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (double& x : m.values()) x = scale * rng.uniform(-1.0, 1.0);
  return m;
}

// Uniform direction, radius drawn so that sqrt(c)|x| <= max_frac.
inline gocoma::geo::BallPoint random_ball_point(Rng& rng, std::size_t n, gocoma::geo::Curvature c,
                                                double max_frac = 0.95) {
  Vec v(n);
  for (double& x : v) x = rng.normal();
  const double len = gocoma::norm(v);
  const double radius = max_frac * rng.uniform() / c.sqrt_c();
  for (double& x : v) x *= radius / std::max(len, 1e-300);
  return gocoma::geo::BallPoint(v, c);
}

// Central differences of a scalar function over every entry of `params`.
inline Vec finite_difference(std::span<double> params, const std::function<double()>& f, double h = 1e-5) {
  Vec g(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double keep = params[i];
    params[i] = keep + h;
    const double up = f();
    params[i] = keep - h;
    const double down = f();
    params[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline Vec finite_difference(std::vector<double>& params, const std::function<double()>& f, double h = 1e-5) {
  return finite_difference(std::span<double>(params), f, h);
}

// Entrywise relative error with an absolute floor on the denominator, so
// gradients that are zero on both sides do not divide by zero.
inline double max_rel_error(std::span<const double> a, std::span<const double> b, double floor = 1e-7) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

}  // namespace testing_support
