#include "gocoma/gcsa.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gocoma/binary_io.hpp"
#include "gocoma/errors.hpp"

namespace gocoma::gcsa {

using geo::BallPoint;

namespace {

constexpr std::string_view kMagic = "GCSA0001";

Matrix init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix w(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  for (double& v : w.values()) v = rng.uniform(-bound, bound);
  return w;
}

void check_sequence(const HyperbolicSequence& s, const char* what) {
  if (s.tokens.empty()) throw InvalidInput(std::string(what) + ": empty sequence");
  const auto c = s.tokens.front().curvature();
  const auto d = s.tokens.front().dim();
  for (const auto& t : s.tokens)
    if (!(t.curvature() == c) || t.dim() != d)
      throw InvalidInput(std::string(what) + ": tokens must share curvature and dimension");
}

void check_finite(std::span<const double> v, const char* stage) {
  if (!all_finite(v)) throw NumericalFailure(std::string("gcsa_backward: non-finite gradient in ") + stage);
}

struct Fold {
  std::vector<BallPoint> partials;  // partials[k] = t_0 (+) ... (+) t_k
};

Fold fold_with_partials(const std::vector<BallPoint>& terms) {
  Fold f;
  f.partials.reserve(terms.size());
  f.partials.push_back(terms.front());
  for (std::size_t k = 1; k < terms.size(); ++k) f.partials.push_back(geo::mobius_add(f.partials.back(), terms[k]));
  return f;
}

// Gradients w.r.t. each term of a left fold given the gradient of its result.
std::vector<Vec> fold_backward(const std::vector<BallPoint>& terms, const std::vector<BallPoint>& partials,
                               std::span<const double> g_out) {
  std::vector<Vec> g_terms(terms.size());
  Vec g_acc(g_out.begin(), g_out.end());
  for (std::size_t k = terms.size() - 1; k > 0; --k) {
    auto pair = geo::grad::mobius_add(partials[k - 1], terms[k], g_acc);
    g_terms[k] = std::move(pair.dy);
    g_acc = std::move(pair.dx);
  }
  g_terms[0] = std::move(g_acc);
  return g_terms;
}

Matrix row_softmax(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < row.size(); ++c) sum += (out(r, c) = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < row.size(); ++c) out(r, c) /= sum;
  }
  return out;
}

Matrix row_softmax_backward(const Matrix& probs, const Matrix& g) {
  Matrix out(g.rows(), g.cols());
  for (std::size_t r = 0; r < g.rows(); ++r) {
    double inner = 0.0;
    for (std::size_t c = 0; c < g.cols(); ++c) inner += probs(r, c) * g(r, c);
    for (std::size_t c = 0; c < g.cols(); ++c) out(r, c) = probs(r, c) * (g(r, c) - inner);
  }
  return out;
}

struct AggregateResult {
  HyperbolicSequence out;
  std::vector<std::vector<BallPoint>> terms, partials;
};

AggregateResult aggregate_with_state(const Matrix& scores, const HyperbolicSequence& operands, Modality modality) {
  if (scores.cols() != operands.size()) throw InvalidInput("aggregate: score columns != operand count");
  AggregateResult r;
  r.out.modality = modality;
  r.terms.resize(scores.rows());
  r.partials.resize(scores.rows());
  for (std::size_t row = 0; row < scores.rows(); ++row) {
    auto& terms = r.terms[row];
    terms.reserve(operands.size());
    for (std::size_t k = 0; k < operands.size(); ++k)
      terms.push_back(geo::mobius_scalar_mul(scores(row, k), operands.tokens[k]));
    auto fold = fold_with_partials(terms);
    r.out.tokens.push_back(fold.partials.back());
    r.partials[row] = std::move(fold.partials);
  }
  return r;
}

// Backward through aggregate: accumulates into g_scores and g_operands.
void aggregate_backward(const Matrix& scores, const HyperbolicSequence& operands,
                        const std::vector<std::vector<BallPoint>>& terms,
                        const std::vector<std::vector<BallPoint>>& partials, const std::vector<Vec>& g_out,
                        Matrix& g_scores, std::vector<Vec>& g_operands) {
  for (std::size_t row = 0; row < scores.rows(); ++row) {
    const auto g_terms = fold_backward(terms[row], partials[row], g_out[row]);
    for (std::size_t k = 0; k < operands.size(); ++k) {
      const auto sm = geo::grad::mobius_scalar_mul(scores(row, k), operands.tokens[k], g_terms[k]);
      g_scores(row, k) += sm.dr;
      axpy(1.0, sm.dx, g_operands[k]);
    }
  }
}

// Backward through x -> mobius_linear(W, exp0(b_tangent), x) for a token list.
void linear_backward(const Matrix& w, std::span<const double> b_tangent, const BallPoint& bias,
                     const std::vector<BallPoint>& inputs, const std::vector<BallPoint>& pre_bias,
                     const std::vector<Vec>& g_out, Matrix& g_w, Vec& g_b, std::vector<Vec>& g_inputs) {
  Vec g_bias(bias.dim(), 0.0);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto add = geo::grad::mobius_add(pre_bias[t], bias, g_out[t]);
    axpy(1.0, add.dy, g_bias);
    auto mv = geo::grad::mobius_matvec(w, inputs[t], add.dx);
    axpy(1.0, mv.dw.values(), g_w.values());
    g_inputs[t] = std::move(mv.dx);
  }
  axpy(1.0, geo::grad::exp0(b_tangent, bias.curvature(), g_bias), g_b);
}

void append_matrix(io::ByteWriter& w, const Matrix& m) { w.put_f64s(m.values()); }

Matrix take_matrix(io::ByteReader& r, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  m.values() = r.take_f64s(rows * cols);
  return m;
}

}  // namespace

GcsaParams GcsaParams::init(std::size_t d_code, std::size_t d_img, const GcsaConfig& cfg, Rng& rng) {
  if (d_code == 0 || d_img == 0 || cfg.d_model == 0) throw InvalidInput("GcsaParams::init: zero dimension");
  GcsaParams p;
  p.curvature = geo::Curvature(cfg.curvature);
  p.w_q = init_weight(cfg.d_model, d_code, rng);
  p.w_k = init_weight(cfg.d_model, d_img, rng);
  p.w_v = init_weight(cfg.d_model, d_img, rng);
  p.b_q = p.b_k = p.b_v = Vec(cfg.d_model, 0.0);
  if (cfg.symmetric_values) {
    p.w_v_code = init_weight(cfg.d_model, d_code, rng);
    p.b_v_code = Vec(cfg.d_model, 0.0);
  }
  p.lambda = cfg.lambda_init;
  p.softmax_scores = cfg.softmax_scores;
  p.symmetric_values = cfg.symmetric_values;
  return p;
}

geo::MobiusLinearParams GcsaParams::query() const { return {w_q, geo::exp0(b_q, curvature)}; }
geo::MobiusLinearParams GcsaParams::key() const { return {w_k, geo::exp0(b_k, curvature)}; }
geo::MobiusLinearParams GcsaParams::value() const { return {w_v, geo::exp0(b_v, curvature)}; }
geo::MobiusLinearParams GcsaParams::code_value() const { return {w_v_code, geo::exp0(b_v_code, curvature)}; }

void GcsaParams::validate() const {
  const std::size_t d = w_q.rows();
  if (w_k.rows() != d || w_v.rows() != d || w_v.cols() != w_k.cols() || b_q.size() != d || b_k.size() != d ||
      b_v.size() != d)
    throw InvalidInput("GcsaParams: inconsistent shapes");
  if (symmetric_values && (w_v_code.rows() != d || w_v_code.cols() != w_q.cols() || b_v_code.size() != d))
    throw InvalidInput("GcsaParams: inconsistent code-value projection shapes");
  if (!std::isfinite(lambda)) throw InvalidInput("GcsaParams: non-finite lambda");
}

HyperbolicSequence lift(const std::vector<Vec>& seq, geo::Curvature c, Modality modality, double prescale) {
  if (seq.empty()) throw InvalidInput("lift: empty sequence");
  if (!(prescale > 0.0)) throw InvalidInput("lift: prescale must be positive");
  HyperbolicSequence out;
  out.modality = modality;
  const std::size_t d = seq.front().size();
  for (const auto& v : seq) {
    if (v.size() != d) throw InvalidInput("lift: tokens have differing dimensions");
    out.tokens.push_back(geo::exp0(scaled(v, 1.0 / prescale), c));
  }
  return out;
}

Qkv compute_qkv(const HyperbolicSequence& code, const HyperbolicSequence& img, const GcsaParams& p) {
  check_sequence(code, "compute_qkv(code)");
  check_sequence(img, "compute_qkv(image)");
  p.validate();
  if (code.tokens.front().dim() != p.d_code() || img.tokens.front().dim() != p.d_img())
    throw InvalidInput("compute_qkv: token dimension does not match parameters");
  const auto lq = p.query();
  const auto lk = p.key();
  const auto lv = p.value();
  Qkv out;
  out.q.modality = Modality::code;
  out.k.modality = out.v.modality = Modality::image;
  for (const auto& t : code.tokens) out.q.tokens.push_back(geo::mobius_linear(lq, t));
  for (const auto& t : img.tokens) {
    out.k.tokens.push_back(geo::mobius_linear(lk, t));
    out.v.tokens.push_back(geo::mobius_linear(lv, t));
  }
  return out;
}

AttentionMatrix attention_scores(const HyperbolicSequence& q, const HyperbolicSequence& k, double lambda) {
  check_sequence(q, "attention_scores(Q)");
  check_sequence(k, "attention_scores(K)");
  AttentionMatrix s{Matrix(q.size(), k.size()), Matrix(k.size(), q.size())};
  for (std::size_t i = 0; i < q.size(); ++i)
    for (std::size_t j = 0; j < k.size(); ++j) {
      s.code_to_img(i, j) = lambda * geo::gcs(q.tokens[i], k.tokens[j]);
      s.img_to_code(j, i) = lambda * geo::gcs(k.tokens[j], q.tokens[i]);
    }
  return s;
}

HyperbolicSequence aggregate(Direction direction, const Matrix& scores, const HyperbolicSequence& operands) {
  check_sequence(operands, "aggregate");
  const auto modality = direction == Direction::code_to_img ? Modality::code : Modality::image;
  return aggregate_with_state(scores, operands, modality).out;
}

BallPoint mobius_fold(const std::vector<BallPoint>& points) {
  if (points.empty()) throw InvalidInput("mobius_fold: empty input");
  BallPoint acc = points.front();
  for (std::size_t k = 1; k < points.size(); ++k) acc = geo::mobius_add(acc, points[k]);
  return acc;
}

FusedEmbedding pool_and_fuse(const HyperbolicSequence& z_code, const HyperbolicSequence& z_img) {
  check_sequence(z_code, "pool_and_fuse(code)");
  check_sequence(z_img, "pool_and_fuse(image)");
  auto z = geo::mobius_add(mobius_fold(z_code.tokens), mobius_fold(z_img.tokens));
  auto e = geo::log0(z);
  return {std::move(z), std::move(e)};
}

GcsaState gcsa_forward(const std::vector<Vec>& code_euc, const std::vector<Vec>& img_euc, const GcsaParams& p,
                       double code_prescale, double img_prescale) {
  p.validate();
  GcsaState st;
  st.code_prescale = code_prescale;
  st.img_prescale = img_prescale;
  st.code_h = lift(code_euc, p.curvature, Modality::code, code_prescale);
  st.img_h = lift(img_euc, p.curvature, Modality::image, img_prescale);
  for (const auto& v : code_euc) st.code_in.push_back(scaled(v, 1.0 / code_prescale));
  for (const auto& v : img_euc) st.img_in.push_back(scaled(v, 1.0 / img_prescale));
  if (st.code_h.tokens.front().dim() != p.d_code() || st.img_h.tokens.front().dim() != p.d_img())
    throw InvalidInput("gcsa_forward: embedding dimension does not match parameters");

  st.bias_q = geo::exp0(p.b_q, p.curvature);
  st.bias_k = geo::exp0(p.b_k, p.curvature);
  st.bias_v = geo::exp0(p.b_v, p.curvature);
  st.qkv.q.modality = Modality::code;
  st.qkv.k.modality = st.qkv.v.modality = Modality::image;
  // Same arithmetic as mobius_linear, with the pre-bias points kept.
  for (const auto& t : st.code_h.tokens) {
    st.q_lin.push_back(geo::mobius_matvec(p.w_q, t));
    st.qkv.q.tokens.push_back(geo::mobius_add(st.q_lin.back(), st.bias_q));
  }
  for (const auto& t : st.img_h.tokens) {
    st.k_lin.push_back(geo::mobius_matvec(p.w_k, t));
    st.qkv.k.tokens.push_back(geo::mobius_add(st.k_lin.back(), st.bias_k));
    st.v_lin.push_back(geo::mobius_matvec(p.w_v, t));
    st.qkv.v.tokens.push_back(geo::mobius_add(st.v_lin.back(), st.bias_v));
  }
  if (p.symmetric_values) {
    st.bias_vc = geo::exp0(p.b_v_code, p.curvature);
    st.vc.modality = Modality::code;
    for (const auto& t : st.code_h.tokens) {
      st.vc_lin.push_back(geo::mobius_matvec(p.w_v_code, t));
      st.vc.tokens.push_back(geo::mobius_add(st.vc_lin.back(), st.bias_vc));
    }
  }

  st.raw_scores = attention_scores(st.qkv.q, st.qkv.k, p.lambda);
  st.scores = st.raw_scores;
  if (p.softmax_scores) {
    st.scores.code_to_img = row_softmax(st.raw_scores.code_to_img);
    st.scores.img_to_code = row_softmax(st.raw_scores.img_to_code);
  }

  auto code_agg = aggregate_with_state(st.scores.code_to_img, st.qkv.v, Modality::code);
  auto img_agg =
      aggregate_with_state(st.scores.img_to_code, p.symmetric_values ? st.vc : st.qkv.q, Modality::image);
  st.z_code = std::move(code_agg.out);
  st.code_terms = std::move(code_agg.terms);
  st.code_partials = std::move(code_agg.partials);
  st.z_img = std::move(img_agg.out);
  st.img_terms = std::move(img_agg.terms);
  st.img_partials = std::move(img_agg.partials);

  st.pool_code_partials = fold_with_partials(st.z_code.tokens).partials;
  st.pool_img_partials = fold_with_partials(st.z_img.tokens).partials;
  auto z = geo::mobius_add(st.pool_code_partials.back(), st.pool_img_partials.back());
  auto e = geo::log0(z);
  st.out = {std::move(z), std::move(e)};
  return st;
}

GcsaGrads GcsaGrads::zeros_like(const GcsaParams& p) {
  GcsaGrads g;
  g.w_q = Matrix(p.w_q.rows(), p.w_q.cols());
  g.w_k = Matrix(p.w_k.rows(), p.w_k.cols());
  g.w_v = Matrix(p.w_v.rows(), p.w_v.cols());
  g.w_v_code = Matrix(p.w_v_code.rows(), p.w_v_code.cols());
  g.b_q = Vec(p.b_q.size(), 0.0);
  g.b_k = Vec(p.b_k.size(), 0.0);
  g.b_v = Vec(p.b_v.size(), 0.0);
  g.b_v_code = Vec(p.b_v_code.size(), 0.0);
  return g;
}

void GcsaGrads::accumulate(const GcsaGrads& o) {
  axpy(1.0, o.w_q.values(), w_q.values());
  axpy(1.0, o.w_k.values(), w_k.values());
  axpy(1.0, o.w_v.values(), w_v.values());
  axpy(1.0, o.w_v_code.values(), w_v_code.values());
  axpy(1.0, o.b_q, b_q);
  axpy(1.0, o.b_k, b_k);
  axpy(1.0, o.b_v, b_v);
  axpy(1.0, o.b_v_code, b_v_code);
  lambda += o.lambda;
}

GcsaGrads gcsa_backward(const GcsaParams& p, const GcsaState& st, std::span<const double> g_z_euc) {
  if (g_z_euc.size() != st.out.z_euc.size()) throw InvalidInput("gcsa_backward: upstream gradient size mismatch");
  check_finite(g_z_euc, "upstream gradient");
  const std::size_t tc = st.code_h.size();
  const std::size_t tv = st.img_h.size();
  const std::size_t d = p.d_model();
  GcsaGrads g = GcsaGrads::zeros_like(p);

  // Back-projection and joint fusion.
  const Vec g_z = geo::grad::log0(st.out.z_hyp, g_z_euc);
  const auto fuse =
      geo::grad::mobius_add(st.pool_code_partials.back(), st.pool_img_partials.back(), g_z);
  const auto g_zc = fold_backward(st.z_code.tokens, st.pool_code_partials, fuse.dx);
  const auto g_zi = fold_backward(st.z_img.tokens, st.pool_img_partials, fuse.dy);
  check_finite(g_z, "log0 back-projection");

  // Aggregation in both directions.
  const auto& img_operands = p.symmetric_values ? st.vc : st.qkv.q;
  Matrix g_s_ci(tc, tv), g_s_ic(tv, tc);
  std::vector<Vec> g_q(tc, Vec(d, 0.0)), g_k(tv, Vec(d, 0.0)), g_v(tv, Vec(d, 0.0)), g_vc(tc, Vec(d, 0.0));
  aggregate_backward(st.scores.code_to_img, st.qkv.v, st.code_terms, st.code_partials, g_zc, g_s_ci, g_v);
  aggregate_backward(st.scores.img_to_code, img_operands, st.img_terms, st.img_partials, g_zi, g_s_ic,
                     p.symmetric_values ? g_vc : g_q);
  check_finite(g_s_ci.values(), "curvature-consistent aggregation");
  check_finite(g_s_ic.values(), "curvature-consistent aggregation");

  if (p.softmax_scores) {
    g_s_ci = row_softmax_backward(st.scores.code_to_img, g_s_ci);
    g_s_ic = row_softmax_backward(st.scores.img_to_code, g_s_ic);
  }

  // Scores: s = lambda * GCS.
  for (std::size_t i = 0; i < tc; ++i)
    for (std::size_t j = 0; j < tv; ++j) {
      const auto& q = st.qkv.q.tokens[i];
      const auto& k = st.qkv.k.tokens[j];
      if (g_s_ci(i, j) != 0.0) {
        g.lambda += g_s_ci(i, j) * geo::gcs(q, k);
        const auto gg = geo::grad::gcs(q, k, p.lambda * g_s_ci(i, j));
        axpy(1.0, gg.dx, g_q[i]);
        axpy(1.0, gg.dy, g_k[j]);
      }
      if (g_s_ic(j, i) != 0.0) {
        g.lambda += g_s_ic(j, i) * geo::gcs(k, q);
        const auto gg = geo::grad::gcs(k, q, p.lambda * g_s_ic(j, i));
        axpy(1.0, gg.dx, g_k[j]);
        axpy(1.0, gg.dy, g_q[i]);
      }
    }
  check_finite(Vec{g.lambda}, "attention scores");

  // Mobius linear maps and the lift.
  std::vector<Vec> g_code_h(tc), g_img_h(tv), g_img_h_v(tv);
  linear_backward(p.w_q, p.b_q, st.bias_q, st.code_h.tokens, st.q_lin, g_q, g.w_q, g.b_q, g_code_h);
  linear_backward(p.w_k, p.b_k, st.bias_k, st.img_h.tokens, st.k_lin, g_k, g.w_k, g.b_k, g_img_h);
  linear_backward(p.w_v, p.b_v, st.bias_v, st.img_h.tokens, st.v_lin, g_v, g.w_v, g.b_v, g_img_h_v);
  if (p.symmetric_values) {
    std::vector<Vec> g_code_h_v(tc);
    linear_backward(p.w_v_code, p.b_v_code, st.bias_vc, st.code_h.tokens, st.vc_lin, g_vc, g.w_v_code,
                    g.b_v_code, g_code_h_v);
    for (std::size_t i = 0; i < tc; ++i) axpy(1.0, g_code_h_v[i], g_code_h[i]);
  }
  for (std::size_t j = 0; j < tv; ++j) axpy(1.0, g_img_h_v[j], g_img_h[j]);

  for (std::size_t i = 0; i < tc; ++i)
    g.code_in.push_back(scaled(geo::grad::exp0(st.code_in[i], p.curvature, g_code_h[i]), 1.0 / st.code_prescale));
  for (std::size_t j = 0; j < tv; ++j)
    g.img_in.push_back(scaled(geo::grad::exp0(st.img_in[j], p.curvature, g_img_h[j]), 1.0 / st.img_prescale));

  check_finite(g.w_q.values(), "query projection");
  check_finite(g.w_k.values(), "key projection");
  check_finite(g.w_v.values(), "value projection");
  check_finite(g.b_q, "query bias");
  check_finite(g.b_k, "key bias");
  check_finite(g.b_v, "value bias");
  return g;
}

std::vector<std::uint8_t> encode_checkpoint(const GcsaParams& p) {
  p.validate();
  io::ByteWriter w;
  w.put_string(kMagic);
  append_matrix(w, p.w_q);
  w.put_f64s(p.b_q);
  append_matrix(w, p.w_k);
  w.put_f64s(p.b_k);
  append_matrix(w, p.w_v);
  w.put_f64s(p.b_v);
  if (p.symmetric_values) {
    append_matrix(w, p.w_v_code);
    w.put_f64s(p.b_v_code);
  }
  w.put_f64(p.lambda);
  w.put_f64(p.curvature.value());
  w.put_f64(static_cast<double>(p.d_model()));
  w.put_f64(static_cast<double>(p.d_code()));
  w.put_f64(static_cast<double>(p.d_img()));
  return w.bytes();
}

GcsaParams decode_checkpoint(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kTail = 5 * 8;
  if (bytes.size() < kMagic.size() + kTail) throw InvalidInput("GCSA checkpoint: file too short");
  io::ByteReader head(bytes);
  if (head.take_string(kMagic.size()) != kMagic) throw InvalidInput("GCSA checkpoint: bad magic");

  io::ByteReader tail(bytes.subspan(bytes.size() - kTail));
  const double lambda = tail.take_f64();
  const double c = tail.take_f64();
  const auto as_dim = [](double v) {
    if (!(v >= 1.0) || v != std::floor(v) || v > 1e9) throw InvalidInput("GCSA checkpoint: bad dimension field");
    return static_cast<std::size_t>(v);
  };
  const std::size_t d = as_dim(tail.take_f64());
  const std::size_t dc = as_dim(tail.take_f64());
  const std::size_t di = as_dim(tail.take_f64());

  const std::size_t core = d * dc + d + 2 * (d * di + d);
  const std::size_t body = (bytes.size() - kMagic.size() - kTail);
  if (body % 8 != 0) throw InvalidInput("GCSA checkpoint: misaligned body");
  const std::size_t fields = body / 8;
  const std::size_t extension = d * dc + d;
  if (fields != core && fields != core + extension) throw InvalidInput("GCSA checkpoint: length does not match dims");

  GcsaParams p;
  p.curvature = geo::Curvature(c);
  p.lambda = lambda;
  p.w_q = take_matrix(head, d, dc);
  p.b_q = head.take_f64s(d);
  p.w_k = take_matrix(head, d, di);
  p.b_k = head.take_f64s(d);
  p.w_v = take_matrix(head, d, di);
  p.b_v = head.take_f64s(d);
  if (fields == core + extension) {
    p.symmetric_values = true;
    p.w_v_code = take_matrix(head, d, dc);
    p.b_v_code = head.take_f64s(d);
  }
  p.validate();
  return p;
}

void save_checkpoint(const GcsaParams& p, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_checkpoint(p));
}

GcsaParams load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace gocoma::gcsa
