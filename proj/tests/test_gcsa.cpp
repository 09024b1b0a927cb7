#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "gocoma/gcsa.hpp"
#include "support.hpp"

using namespace gocoma;
using namespace gocoma::gcsa;
using geo::BallPoint;
using geo::Curvature;
using namespace testing_support;

namespace {

const Curvature kUnit{1.0};
constexpr double kTanhHalf = 0.46211715726000975850;
constexpr double kTwoCosAtanhHalf = 1.7057739726157212972;  // 2 cos(atanh 0.5), mpmath

GcsaParams random_params(Rng& rng, std::size_t dc, std::size_t di, std::size_t d, bool symmetric = false,
                         bool softmax = false) {
  GcsaConfig cfg;
  cfg.d_model = d;
  cfg.symmetric_values = symmetric;
  cfg.softmax_scores = softmax;
  auto p = GcsaParams::init(dc, di, cfg, rng);
  for (auto* m : {&p.w_q, &p.w_k, &p.w_v, &p.w_v_code})
    for (double& v : m->values()) v = rng.uniform(-1.0, 1.0);
  for (auto* b : {&p.b_q, &p.b_k, &p.b_v, &p.b_v_code})
    for (double& v : *b) v = rng.uniform(-0.4, 0.4);
  p.lambda = rng.uniform(0.5, 2.0);
  return p;
}

std::vector<Vec> random_seq(Rng& rng, std::size_t t, std::size_t d, double scale = 0.8) {
  std::vector<Vec> s;
  for (std::size_t i = 0; i < t; ++i) s.push_back(random_vec(rng, d, scale));
  return s;
}

HyperbolicSequence seq_of(std::vector<BallPoint> pts, Modality m) { return {std::move(pts), m}; }

// 1-D closed forms for collinear points on axis 0.
double add1(double a, double b, double c) { return (a + b) / (1.0 + c * a * b); }
double smul1(double r, double a, double c) {
  if (a == 0.0) return 0.0;
  const double s = std::sqrt(c);
  return std::tanh(r * std::atanh(s * std::abs(a))) / s * (a > 0 ? 1.0 : -1.0);
}

}  // namespace

TEST_CASE("lift") {
  const auto zeros = lift({Vec{0.0, 0.0}, Vec{0.0, 0.0}}, kUnit, Modality::code);
  for (const auto& t : zeros.tokens) CHECK(t.norm() == 0.0);
  const auto one = lift({Vec{0.5, 0.0}}, kUnit, Modality::image);
  CHECK(one.tokens[0].data()[0] == doctest::Approx(kTanhHalf).epsilon(1e-15));

  Rng rng(1);
  const auto seq = random_seq(rng, 4, 6, 2.0);
  const auto lifted = lift(seq, kUnit, Modality::code, 3.0);
  for (std::size_t i = 0; i < seq.size(); ++i)
    CHECK(max_abs_diff(geo::log0(lifted.tokens[i]), scaled(seq[i], 1.0 / 3.0)) < 1e-8);

  CHECK_THROWS_AS(lift({}, kUnit, Modality::code), InvalidInput);
  CHECK_THROWS_AS(lift({Vec{1.0}, Vec{1.0, 2.0}}, kUnit, Modality::code), InvalidInput);
}

TEST_CASE("compute_qkv") {
  Rng rng(2);
  const auto code = lift(random_seq(rng, 2, 4), kUnit, Modality::code);
  const auto img = lift(random_seq(rng, 3, 4), kUnit, Modality::image);

  GcsaParams ident = GcsaParams::init(4, 4, {.d_model = 4}, rng);
  ident.w_q = ident.w_k = ident.w_v = Matrix::identity(4);
  const auto same = compute_qkv(code, img, ident);
  for (std::size_t i = 0; i < 2; ++i) CHECK(max_abs_diff(same.q.tokens[i].data(), code.tokens[i].data()) < 1e-9);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(max_abs_diff(same.k.tokens[j].data(), img.tokens[j].data()) < 1e-9);
    CHECK(max_abs_diff(same.v.tokens[j].data(), img.tokens[j].data()) < 1e-9);
  }

  GcsaParams zero = ident;
  zero.w_q = zero.w_k = zero.w_v = Matrix(4, 4);
  zero.b_q = {0.1, 0.0, 0.0, 0.0};
  zero.b_k = {0.0, 0.2, 0.0, 0.0};
  zero.b_v = {0.0, 0.0, -0.3, 0.0};
  const auto biased = compute_qkv(code, img, zero);
  for (const auto& q : biased.q.tokens) CHECK(q.data() == geo::exp0(zero.b_q, kUnit).data());
  for (const auto& k : biased.k.tokens) CHECK(k.data() == geo::exp0(zero.b_k, kUnit).data());
  for (const auto& v : biased.v.tokens) CHECK(v.data() == geo::exp0(zero.b_v, kUnit).data());

  const auto p = random_params(rng, 4, 4, 4);
  const auto r = compute_qkv(code, img, p);
  CHECK(r.q.tokens[1].data() == geo::mobius_linear(p.query(), code.tokens[1]).data());
  CHECK(r.k.tokens[2].data() == geo::mobius_linear(p.key(), img.tokens[2]).data());
  CHECK(r.v.tokens[0].data() == geo::mobius_linear(p.value(), img.tokens[0]).data());

  const auto wrong = lift(random_seq(rng, 2, 5), kUnit, Modality::code);
  CHECK_THROWS_AS(compute_qkv(wrong, img, p), InvalidInput);
}

TEST_CASE("attention scores") {
  Rng rng(3);
  const auto pts = lift(random_seq(rng, 3, 4), kUnit, Modality::code);
  const auto same = attention_scores(seq_of({pts.tokens[0], pts.tokens[0]}, Modality::code),
                                     seq_of({pts.tokens[0], pts.tokens[0], pts.tokens[0]}, Modality::image), 1.7);
  for (double v : same.code_to_img.values()) CHECK(v == 1.7);
  const auto zero = attention_scores(pts, pts, 0.0);
  for (double v : zero.code_to_img.values()) CHECK(v == 0.0);

  const auto s = attention_scores(seq_of({BallPoint::origin(2, kUnit)}, Modality::code),
                                  seq_of({BallPoint({0.5, 0.0}, kUnit)}, Modality::image), 2.0);
  CHECK(s.code_to_img(0, 0) == doctest::Approx(kTwoCosAtanhHalf).epsilon(1e-14));

  const auto q = lift(random_seq(rng, 3, 4, 3.0), kUnit, Modality::code);
  const auto k = lift(random_seq(rng, 2, 4, 3.0), kUnit, Modality::image);
  const auto m = attention_scores(q, k, -2.5);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      CHECK(std::abs(m.code_to_img(i, j)) <= 2.5);
      CHECK(std::abs(m.code_to_img(i, j) - m.img_to_code(j, i)) < 1e-12);
    }
}

TEST_CASE("aggregate") {
  Rng rng(4);
  const auto ops = lift(random_seq(rng, 1, 3), kUnit, Modality::image);
  Matrix s(2, 1);
  s(0, 0) = 0.7;
  s(1, 0) = -1.2;
  const auto out = aggregate(Direction::code_to_img, s, ops);
  CHECK(out.tokens[0].data() == geo::mobius_scalar_mul(0.7, ops.tokens[0]).data());
  CHECK(out.tokens[1].data() == geo::mobius_scalar_mul(-1.2, ops.tokens[0]).data());

  const auto many = lift(random_seq(rng, 3, 3), kUnit, Modality::image);
  const auto zeros = aggregate(Direction::code_to_img, Matrix(2, 3), many);
  for (const auto& t : zeros.tokens) CHECK(t.norm() == 0.0);

  // Collinear case: hand fold with the 1-D closed forms.
  const double v0 = 0.31, v1 = -0.47, s0 = 0.8, s1 = 1.6;
  Matrix sc(1, 2);
  sc(0, 0) = s0;
  sc(0, 1) = s1;
  const auto line = aggregate(Direction::code_to_img, sc,
                              seq_of({BallPoint({v0, 0.0}, kUnit), BallPoint({v1, 0.0}, kUnit)}, Modality::image));
  const double expect = add1(smul1(s0, v0, 1.0), smul1(s1, v1, 1.0), 1.0);
  CHECK(line.tokens[0].data()[0] == doctest::Approx(expect).epsilon(1e-13));
  CHECK(line.tokens[0].data()[1] == 0.0);

  CHECK_THROWS_AS(aggregate(Direction::img_to_code, Matrix(1, 2), ops), InvalidInput);
}

TEST_CASE("pool_and_fuse") {
  const BallPoint a({0.2, 0.1}, kUnit), b({-0.3, 0.25}, kUnit);
  const auto f = pool_and_fuse(seq_of({a}, Modality::code), seq_of({b}, Modality::image));
  CHECK(f.z_hyp.data() == geo::mobius_add(a, b).data());
  CHECK(f.z_euc == geo::log0(f.z_hyp));

  const auto g = pool_and_fuse(seq_of({a, b}, Modality::code),
                               seq_of({BallPoint::origin(2, kUnit), BallPoint::origin(2, kUnit)}, Modality::image));
  CHECK(g.z_hyp.data() == geo::mobius_add(a, b).data());

  // Collinear pooling vs the 1-D oracle.
  const double c = 0.7;
  const Curvature cc(c);
  const auto h = pool_and_fuse(
      seq_of({BallPoint({0.4, 0.0}, cc), BallPoint({0.3, 0.0}, cc), BallPoint({-0.2, 0.0}, cc)}, Modality::code),
      seq_of({BallPoint({0.1, 0.0}, cc), BallPoint({0.5, 0.0}, cc)}, Modality::image));
  const double pc = add1(add1(0.4, 0.3, c), -0.2, c);
  const double pi = add1(0.1, 0.5, c);
  CHECK(h.z_hyp.data()[0] == doctest::Approx(add1(pc, pi, c)).epsilon(1e-13));
}

TEST_CASE("gcsa_forward reductions and determinism") {
  Rng rng(5);
  GcsaParams p = GcsaParams::init(3, 3, {.d_model = 3}, rng);
  const auto zero = gcsa_forward({Vec(3, 0.0), Vec(3, 0.0)}, {Vec(3, 0.0)}, p);
  CHECK(zero.out.z_euc == Vec(3, 0.0));

  const auto code = random_seq(rng, 2, 3);
  const auto img = random_seq(rng, 2, 3);
  p.lambda = 0.0;
  const auto lam0 = gcsa_forward(code, img, p);
  CHECK(lam0.out.z_hyp.norm() == 0.0);
  CHECK(lam0.out.z_euc == Vec(3, 0.0));

  // Identity parameters: hand-composed pipeline.
  GcsaParams id = p;
  id.lambda = 1.3;
  id.w_q = id.w_k = id.w_v = Matrix::identity(3);
  const auto st = gcsa_forward(code, img, id);
  const auto ch = lift(code, kUnit, Modality::code);
  const auto ih = lift(img, kUnit, Modality::image);
  const auto qkv = compute_qkv(ch, ih, id);
  const auto s = attention_scores(qkv.q, qkv.k, id.lambda);
  const auto zc = aggregate(Direction::code_to_img, s.code_to_img, qkv.v);
  const auto zi = aggregate(Direction::img_to_code, s.img_to_code, qkv.q);
  const auto fused = pool_and_fuse(zc, zi);
  CHECK(st.out.z_hyp.data() == fused.z_hyp.data());
  CHECK(st.out.z_euc == fused.z_euc);

  const auto r = random_params(rng, 4, 5, 3);
  const auto c2 = random_seq(rng, 3, 4);
  const auto i2 = random_seq(rng, 2, 5);
  CHECK(gcsa_forward(c2, i2, r).out.z_euc == gcsa_forward(c2, i2, r).out.z_euc);
  for (const auto& t : gcsa_forward(c2, i2, r).z_code.tokens) CHECK(t.norm() <= kUnit.max_norm());
}

namespace {

// Finite-difference check of a linear functional of z_euc against
// gcsa_backward, over every trainable scalar and every input entry.
void check_gradients(GcsaParams p, std::vector<Vec> code, std::vector<Vec> img, Rng& rng, double pc = 1.0,
                     double pi = 1.0) {
  const Vec probe = random_vec(rng, p.d_model());
  const auto loss = [&] { return dot(gcsa_forward(code, img, p, pc, pi).out.z_euc, probe); };
  const auto st = gcsa_forward(code, img, p, pc, pi);
  const auto g = gcsa_backward(p, st, probe);

  constexpr double kTol = 1e-4;
  CHECK(max_rel_error(g.w_q.values(), finite_difference(p.w_q.values(), loss)) < kTol);
  CHECK(max_rel_error(g.w_k.values(), finite_difference(p.w_k.values(), loss)) < kTol);
  CHECK(max_rel_error(g.w_v.values(), finite_difference(p.w_v.values(), loss)) < kTol);
  CHECK(max_rel_error(g.b_q, finite_difference(p.b_q, loss)) < kTol);
  CHECK(max_rel_error(g.b_k, finite_difference(p.b_k, loss)) < kTol);
  CHECK(max_rel_error(g.b_v, finite_difference(p.b_v, loss)) < kTol);
  if (p.symmetric_values) {
    CHECK(max_rel_error(g.w_v_code.values(), finite_difference(p.w_v_code.values(), loss)) < kTol);
    CHECK(max_rel_error(g.b_v_code, finite_difference(p.b_v_code, loss)) < kTol);
  }
  Vec lam{p.lambda};
  const auto lam_loss = [&] {
    p.lambda = lam[0];
    return loss();
  };
  CHECK(max_rel_error(Vec{g.lambda}, finite_difference(lam, lam_loss)) < kTol);
  p.lambda = lam[0];
  for (std::size_t i = 0; i < code.size(); ++i)
    CHECK(max_rel_error(g.code_in[i], finite_difference(code[i], loss)) < kTol);
  for (std::size_t j = 0; j < img.size(); ++j)
    CHECK(max_rel_error(g.img_in[j], finite_difference(img[j], loss)) < kTol);
}

}  // namespace

TEST_CASE("gcsa_backward matches finite differences") {
  Rng rng(42);
  SUBCASE("T_c=2, T_v=2, d=3") {
    check_gradients(random_params(rng, 3, 3, 3), random_seq(rng, 2, 3), random_seq(rng, 2, 3), rng);
  }
  SUBCASE("unequal dims and lengths") {
    check_gradients(random_params(rng, 5, 4, 6), random_seq(rng, 3, 5), random_seq(rng, 1, 4), rng);
  }
  SUBCASE("prescaled inputs") {
    check_gradients(random_params(rng, 4, 4, 3), random_seq(rng, 2, 4, 3.0), random_seq(rng, 3, 4, 3.0), rng, 2.5,
                    4.0);
  }
  SUBCASE("symmetric values ablation") {
    check_gradients(random_params(rng, 3, 4, 3, true), random_seq(rng, 2, 3), random_seq(rng, 2, 4), rng);
  }
  SUBCASE("softmax ablation") {
    check_gradients(random_params(rng, 3, 3, 4, false, true), random_seq(rng, 3, 3), random_seq(rng, 2, 3), rng);
  }
}

TEST_CASE("gcsa_backward special cases") {
  Rng rng(8);
  const auto p = random_params(rng, 3, 3, 3);
  const auto code = random_seq(rng, 2, 3);
  const auto img = random_seq(rng, 2, 3);
  const auto st = gcsa_forward(code, img, p);

  const auto g0 = gcsa_backward(p, st, Vec(3, 0.0));
  CHECK(g0.lambda == 0.0);
  for (double v : g0.w_q.values()) CHECK(v == 0.0);
  for (double v : g0.b_v) CHECK(v == 0.0);

  CHECK_THROWS_AS(gcsa_backward(p, st, Vec{NAN, 0.0, 0.0}), NumericalFailure);
  CHECK_THROWS_AS(gcsa_backward(p, st, Vec(2, 0.0)), InvalidInput);

  // T=1: d loss/d lambda = GCS(Q,K) * d loss/d s, summed over both directions.
  const auto c1 = random_seq(rng, 1, 3);
  const auto i1 = random_seq(rng, 1, 3);
  const auto s1 = gcsa_forward(c1, i1, p);
  const Vec probe = random_vec(rng, 3);
  const auto g1 = gcsa_backward(p, s1, probe);
  // ds for each direction via finite differences on the score itself.
  const double gcs_qk = geo::gcs(s1.qkv.q.tokens[0], s1.qkv.k.tokens[0]);
  auto loss_of_scores = [&](double s_ci, double s_ic) {
    Matrix a(1, 1), b(1, 1);
    a(0, 0) = s_ci;
    b(0, 0) = s_ic;
    const auto zc = aggregate(Direction::code_to_img, a, s1.qkv.v);
    const auto zi = aggregate(Direction::img_to_code, b, s1.qkv.q);
    return dot(pool_and_fuse(zc, zi).z_euc, probe);
  };
  const double s = p.lambda * gcs_qk;
  const double h = 1e-6;
  const double ds_ci = (loss_of_scores(s + h, s) - loss_of_scores(s - h, s)) / (2 * h);
  const double ds_ic = (loss_of_scores(s, s + h) - loss_of_scores(s, s - h)) / (2 * h);
  CHECK(g1.lambda == doctest::Approx(gcs_qk * (ds_ci + ds_ic)).epsilon(1e-6));
}

TEST_CASE("checkpoint round trip") {
  Rng rng(9);
  for (bool symmetric : {false, true}) {
    const auto p = random_params(rng, 5, 3, 4, symmetric);
    const auto bytes = encode_checkpoint(p);
    CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "GCSA0001");
    const auto q = decode_checkpoint(bytes);
    CHECK(q.w_q == p.w_q);
    CHECK(q.w_k == p.w_k);
    CHECK(q.w_v == p.w_v);
    CHECK(q.b_q == p.b_q);
    CHECK(q.b_v == p.b_v);
    CHECK(q.lambda == p.lambda);
    CHECK(q.symmetric_values == symmetric);
    if (symmetric) CHECK(q.w_v_code == p.w_v_code);
  }
  const auto p = random_params(rng, 2, 2, 2);
  auto bytes = encode_checkpoint(p);
  // First field after the magic is W_Q[0][0], little-endian f64.
  double first = 0.0;
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= std::uint64_t{bytes[8 + i]} << (8 * i);
  std::memcpy(&first, &bits, 8);
  CHECK(first == p.w_q(0, 0));

  bytes.pop_back();
  CHECK_THROWS_AS(decode_checkpoint(bytes), InvalidInput);
  auto bad = encode_checkpoint(p);
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), InvalidInput);

  const auto path = std::filesystem::temp_directory_path() / "gocoma_gcsa_ckpt_test.bin";
  save_checkpoint(p, path);
  CHECK(load_checkpoint(path).w_k == p.w_k);
  std::filesystem::remove(path);
}
