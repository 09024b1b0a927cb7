#include <cmath>

#include "doctest.h"
#include "gocoma/baselines.hpp"
#include "support.hpp"

using namespace gocoma;
using namespace gocoma::baselines;
using namespace testing_support;

TEST_CASE("concat") {
  const Vec out = baseline_concat(Vec{1, 2, 3}, Vec{4, 5});
  CHECK(out == Vec{1, 2, 3, 4, 5});
  CHECK(baseline_concat(Vec(3, 0.0), Vec(2, 0.0)) == Vec(5, 0.0));
  CHECK(flatten({Vec{1, 2}, Vec{3, 4}}) == Vec{1, 2, 3, 4});
}

TEST_CASE("mobius fuse") {
  const geo::Curvature c(1.0);
  Rng rng(1);
  const Vec code = random_vec(rng, 4);
  CHECK(max_abs_diff(baseline_mobius_fuse(code, Vec(4, 0.0), c), code) < 1e-8);
  CHECK(baseline_mobius_fuse(Vec(3, 0.0), Vec(3, 0.0), c) == Vec(3, 0.0));
  CHECK_THROWS_AS(baseline_mobius_fuse(Vec(3, 0.0), Vec(2, 0.0), c), InvalidInput);

  // 1-D: atanh((tanh a + tanh b)/(1 + tanh a tanh b)) = a + b for c = 1.
  const double a = 0.37, b = -0.81;
  CHECK(baseline_mobius_fuse(Vec{a}, Vec{b}, c)[0] == doctest::Approx(a + b).epsilon(1e-12));
  // General c: tangent vectors add after rescaling by sqrt(c).
  const geo::Curvature c2(2.5);
  CHECK(baseline_mobius_fuse(Vec{a}, Vec{b}, c2)[0] == doctest::Approx(a + b).epsilon(1e-12));
}

TEST_CASE("euclidean cross-attention") {
  Rng rng(2);
  SUBCASE("single tokens: V of image || Q of code") {
    const auto p = XattnParams::init(3, 2, 4, rng);
    const Vec c = random_vec(rng, 3), v = random_vec(rng, 2);
    const auto st = baseline_euclid_xattn({c}, {v}, p);
    const Vec vq = matvec(p.w_v, v);
    const Vec qq = matvec(p.w_q, c);
    CHECK(max_abs_diff(Vec(st.out.begin(), st.out.begin() + 4), vq) < 1e-15);
    CHECK(max_abs_diff(Vec(st.out.begin() + 4, st.out.end()), qq) < 1e-15);
  }
  SUBCASE("attention rows sum to one") {
    const auto p = XattnParams::init(3, 3, 5, rng);
    const auto st = baseline_euclid_xattn({random_vec(rng, 3), random_vec(rng, 3)},
                                          {random_vec(rng, 3), random_vec(rng, 3), random_vec(rng, 3)}, p);
    for (std::size_t i = 0; i < 2; ++i) {
      double s = 0.0;
      for (double v : st.attn_code_to_img.row(i)) s += v;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0.0;
      for (double v : st.attn_img_to_code.row(j)) s += v;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
    }
  }
  SUBCASE("hand computation, d_model = 1") {
    // Q = [1, 2], K = [1, -1], V = [3, 5] with identity 1x1 weights.
    XattnParams p;
    p.w_q = p.w_k = p.w_v = Matrix::identity(1);
    p.b_q = p.b_k = p.b_v = Vec{0.0};
    const auto st = baseline_euclid_xattn({Vec{1.0}, Vec{2.0}}, {Vec{1.0}, Vec{-1.0}}, p);
    // code->img row i: softmax(Q_i * K_j); out_i = sum_j a_ij V_j where V = K here.
    const auto row = [](double q) {
      const double e1 = std::exp(q * 1.0), e2 = std::exp(q * -1.0);
      return (e1 * 1.0 + e2 * -1.0) / (e1 + e2);
    };
    CHECK(st.out[0] == doctest::Approx((row(1.0) + row(2.0)) / 2.0).epsilon(1e-14));
    const auto col = [](double k) {
      const double e1 = std::exp(k * 1.0), e2 = std::exp(k * 2.0);
      return (e1 * 1.0 + e2 * 2.0) / (e1 + e2);
    };
    CHECK(st.out[1] == doctest::Approx((col(1.0) + col(-1.0)) / 2.0).epsilon(1e-14));
  }
}

TEST_CASE("euclidean cross-attention gradients") {
  Rng rng(3);
  for (int trial = 0; trial < 3; ++trial) {
    auto p = XattnParams::init(3, 4, 5, rng);
    for (auto* b : {&p.b_q, &p.b_k, &p.b_v})
      for (double& v : *b) v = rng.uniform(-0.5, 0.5);
    std::vector<Vec> code{random_vec(rng, 3), random_vec(rng, 3)};
    std::vector<Vec> img{random_vec(rng, 4), random_vec(rng, 4), random_vec(rng, 4)};
    const Vec probe = random_vec(rng, 10);
    const auto loss = [&] { return dot(baseline_euclid_xattn(code, img, p).out, probe); };
    const auto g = euclid_xattn_backward(p, baseline_euclid_xattn(code, img, p), probe);
    CHECK(max_rel_error(g.w_q.values(), finite_difference(p.w_q.values(), loss)) < 1e-6);
    CHECK(max_rel_error(g.w_k.values(), finite_difference(p.w_k.values(), loss)) < 1e-6);
    CHECK(max_rel_error(g.w_v.values(), finite_difference(p.w_v.values(), loss)) < 1e-6);
    CHECK(max_rel_error(g.b_q, finite_difference(p.b_q, loss)) < 1e-6);
    CHECK(max_rel_error(g.b_k, finite_difference(p.b_k, loss)) < 1e-6);
    CHECK(max_rel_error(g.b_v, finite_difference(p.b_v, loss)) < 1e-6);
    CHECK(max_rel_error(g.code[1], finite_difference(code[1], loss)) < 1e-6);
    CHECK(max_rel_error(g.img[2], finite_difference(img[2], loss)) < 1e-6);
  }
}

TEST_CASE("mobius fusion gradients") {
  Rng rng(4);
  SUBCASE("projected") {
    auto p = MobiusFuseParams::init(5, 3, 4, geo::Curvature(0.8), rng);
    Vec a = random_vec(rng, 5), b = random_vec(rng, 3);
    const Vec probe = random_vec(rng, 4);
    const auto loss = [&] { return dot(mobius_fuse_forward(a, b, p).out, probe); };
    const auto g = mobius_fuse_backward(p, mobius_fuse_forward(a, b, p), probe);
    CHECK(max_rel_error(g.proj_code.values(), finite_difference(p.proj_code.values(), loss)) < 1e-6);
    CHECK(max_rel_error(g.proj_img.values(), finite_difference(p.proj_img.values(), loss)) < 1e-6);
    CHECK(max_rel_error(g.code_vec, finite_difference(a, loss)) < 1e-6);
    CHECK(max_rel_error(g.img_vec, finite_difference(b, loss)) < 1e-6);
  }
  SUBCASE("equal dims, no projection") {
    auto p = MobiusFuseParams::init(3, 3, 8, geo::Curvature(1.0), rng);
    CHECK_FALSE(p.projected());
    Vec a = random_vec(rng, 3), b = random_vec(rng, 3);
    const Vec probe = random_vec(rng, 3);
    const auto loss = [&] { return dot(mobius_fuse_forward(a, b, p).out, probe); };
    const auto g = mobius_fuse_backward(p, mobius_fuse_forward(a, b, p), probe);
    CHECK(max_rel_error(g.code_vec, finite_difference(a, loss)) < 1e-6);
    CHECK(mobius_fuse_forward(a, b, p).out == baseline_mobius_fuse(a, b, p.curvature));
  }
}
