#include "gocoma/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "gocoma/errors.hpp"

namespace gocoma::baselines {

namespace {

Matrix init_weight(std::size_t rows, std::size_t cols, Rng& rng) {
  Matrix w(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  for (double& v : w.values()) v = rng.uniform(-bound, bound);
  return w;
}

void check_seq(const std::vector<Vec>& seq, std::size_t d, const char* what) {
  if (seq.empty()) throw InvalidInput(std::string(what) + ": empty sequence");
  for (const auto& t : seq)
    if (t.size() != d) throw InvalidInput(std::string(what) + ": token dimension mismatch");
}

Vec affine(const Matrix& w, std::span<const double> b, std::span<const double> x) {
  Vec y = matvec(w, x);
  axpy(1.0, b, y);
  return y;
}

void softmax_in_place(std::span<double> row) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double& v : row) sum += (v = std::exp(v - mx));
  for (double& v : row) v /= sum;
}

}  // namespace

Vec flatten(const std::vector<Vec>& seq) {
  Vec out;
  for (const auto& t : seq) out.insert(out.end(), t.begin(), t.end());
  return out;
}

Vec baseline_concat(std::span<const double> code_vec, std::span<const double> img_vec) {
  Vec out(code_vec.begin(), code_vec.end());
  out.insert(out.end(), img_vec.begin(), img_vec.end());
  return out;
}

Vec baseline_mobius_fuse(std::span<const double> code_vec, std::span<const double> img_vec, geo::Curvature c) {
  if (code_vec.size() != img_vec.size()) throw InvalidInput("baseline_mobius_fuse: dimension mismatch");
  return geo::log0(geo::mobius_add(geo::exp0(code_vec, c), geo::exp0(img_vec, c)));
}

XattnParams XattnParams::init(std::size_t d_code, std::size_t d_img, std::size_t d_model, Rng& rng) {
  XattnParams p;
  p.w_q = init_weight(d_model, d_code, rng);
  p.w_k = init_weight(d_model, d_img, rng);
  p.w_v = init_weight(d_model, d_img, rng);
  p.b_q = p.b_k = p.b_v = Vec(d_model, 0.0);
  return p;
}

XattnState baseline_euclid_xattn(const std::vector<Vec>& code, const std::vector<Vec>& img, const XattnParams& p) {
  check_seq(code, p.w_q.cols(), "baseline_euclid_xattn(code)");
  check_seq(img, p.w_k.cols(), "baseline_euclid_xattn(image)");
  const std::size_t tc = code.size(), tv = img.size(), d = p.d_model();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  XattnState st;
  st.code = code;
  st.img = img;
  for (const auto& c : code) st.q.push_back(affine(p.w_q, p.b_q, c));
  for (const auto& v : img) {
    st.k.push_back(affine(p.w_k, p.b_k, v));
    st.v.push_back(affine(p.w_v, p.b_v, v));
  }
  st.attn_code_to_img = Matrix(tc, tv);
  st.attn_img_to_code = Matrix(tv, tc);
  for (std::size_t i = 0; i < tc; ++i)
    for (std::size_t j = 0; j < tv; ++j) {
      const double logit = dot(st.q[i], st.k[j]) * scale;
      st.attn_code_to_img(i, j) = logit;
      st.attn_img_to_code(j, i) = logit;
    }
  for (std::size_t i = 0; i < tc; ++i) softmax_in_place(st.attn_code_to_img.row(i));
  for (std::size_t j = 0; j < tv; ++j) softmax_in_place(st.attn_img_to_code.row(j));

  st.out.assign(2 * d, 0.0);
  std::span<double> left(st.out.data(), d), right(st.out.data() + d, d);
  for (std::size_t i = 0; i < tc; ++i)
    for (std::size_t j = 0; j < tv; ++j) axpy(st.attn_code_to_img(i, j) / static_cast<double>(tc), st.v[j], left);
  for (std::size_t j = 0; j < tv; ++j)
    for (std::size_t i = 0; i < tc; ++i) axpy(st.attn_img_to_code(j, i) / static_cast<double>(tv), st.q[i], right);
  return st;
}

XattnGrads euclid_xattn_backward(const XattnParams& p, const XattnState& st, std::span<const double> g_out) {
  const std::size_t tc = st.q.size(), tv = st.k.size(), d = p.d_model();
  if (g_out.size() != 2 * d) throw InvalidInput("euclid_xattn_backward: upstream gradient size mismatch");
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Vec g_oc = scaled(g_out.subspan(0, d), 1.0 / static_cast<double>(tc));
  const Vec g_oi = scaled(g_out.subspan(d, d), 1.0 / static_cast<double>(tv));

  std::vector<Vec> g_q(tc, Vec(d, 0.0)), g_k(tv, Vec(d, 0.0)), g_v(tv, Vec(d, 0.0));

  // code -> image
  for (std::size_t i = 0; i < tc; ++i) {
    Vec g_a(tv);
    double inner = 0.0;
    for (std::size_t j = 0; j < tv; ++j) {
      g_a[j] = dot(g_oc, st.v[j]);
      inner += st.attn_code_to_img(i, j) * g_a[j];
      axpy(st.attn_code_to_img(i, j), g_oc, g_v[j]);
    }
    for (std::size_t j = 0; j < tv; ++j) {
      const double g_logit = st.attn_code_to_img(i, j) * (g_a[j] - inner) * scale;
      axpy(g_logit, st.k[j], g_q[i]);
      axpy(g_logit, st.q[i], g_k[j]);
    }
  }
  // image -> code
  for (std::size_t j = 0; j < tv; ++j) {
    Vec g_b(tc);
    double inner = 0.0;
    for (std::size_t i = 0; i < tc; ++i) {
      g_b[i] = dot(g_oi, st.q[i]);
      inner += st.attn_img_to_code(j, i) * g_b[i];
      axpy(st.attn_img_to_code(j, i), g_oi, g_q[i]);
    }
    for (std::size_t i = 0; i < tc; ++i) {
      const double g_logit = st.attn_img_to_code(j, i) * (g_b[i] - inner) * scale;
      axpy(g_logit, st.q[i], g_k[j]);
      axpy(g_logit, st.k[j], g_q[i]);
    }
  }

  XattnGrads g{Matrix(d, p.w_q.cols()), Matrix(d, p.w_k.cols()), Matrix(d, p.w_v.cols()),
               Vec(d, 0.0), Vec(d, 0.0), Vec(d, 0.0), {}, {}};
  for (std::size_t i = 0; i < tc; ++i) {
    add_outer(g.w_q, g_q[i], st.code[i]);
    axpy(1.0, g_q[i], g.b_q);
    g.code.push_back(matvec_transposed(p.w_q, g_q[i]));
  }
  for (std::size_t j = 0; j < tv; ++j) {
    add_outer(g.w_k, g_k[j], st.img[j]);
    add_outer(g.w_v, g_v[j], st.img[j]);
    axpy(1.0, g_k[j], g.b_k);
    axpy(1.0, g_v[j], g.b_v);
    Vec gi = matvec_transposed(p.w_k, g_k[j]);
    axpy(1.0, matvec_transposed(p.w_v, g_v[j]), gi);
    g.img.push_back(std::move(gi));
  }
  return g;
}

MobiusFuseParams MobiusFuseParams::init(std::size_t d_code, std::size_t d_img, std::size_t d_model,
                                        geo::Curvature c, Rng& rng) {
  MobiusFuseParams p;
  p.curvature = c;
  if (d_code != d_img) {
    p.proj_code = init_weight(d_model, d_code, rng);
    p.proj_img = init_weight(d_model, d_img, rng);
  }
  return p;
}

MobiusFuseState mobius_fuse_forward(std::span<const double> code_vec, std::span<const double> img_vec,
                                    const MobiusFuseParams& p) {
  MobiusFuseState st;
  st.code_vec.assign(code_vec.begin(), code_vec.end());
  st.img_vec.assign(img_vec.begin(), img_vec.end());
  if (p.projected()) {
    st.code_t = matvec(p.proj_code, code_vec);
    st.img_t = matvec(p.proj_img, img_vec);
  } else {
    if (code_vec.size() != img_vec.size())
      throw InvalidInput("mobius fusion: unequal dimensions need learned projections");
    st.code_t = st.code_vec;
    st.img_t = st.img_vec;
  }
  st.a = geo::exp0(st.code_t, p.curvature);
  st.b = geo::exp0(st.img_t, p.curvature);
  st.z = geo::mobius_add(st.a, st.b);
  st.out = geo::log0(st.z);
  return st;
}

MobiusFuseGrads mobius_fuse_backward(const MobiusFuseParams& p, const MobiusFuseState& st,
                                     std::span<const double> g_out) {
  const Vec g_z = geo::grad::log0(st.z, g_out);
  const auto add = geo::grad::mobius_add(st.a, st.b, g_z);
  const Vec g_ct = geo::grad::exp0(st.code_t, p.curvature, add.dx);
  const Vec g_it = geo::grad::exp0(st.img_t, p.curvature, add.dy);
  MobiusFuseGrads g;
  if (p.projected()) {
    g.proj_code = Matrix(p.proj_code.rows(), p.proj_code.cols());
    g.proj_img = Matrix(p.proj_img.rows(), p.proj_img.cols());
    add_outer(g.proj_code, g_ct, st.code_vec);
    add_outer(g.proj_img, g_it, st.img_vec);
    g.code_vec = matvec_transposed(p.proj_code, g_ct);
    g.img_vec = matvec_transposed(p.proj_img, g_it);
  } else {
    g.code_vec = g_ct;
    g.img_vec = g_it;
  }
  return g;
}

}  // namespace gocoma::baselines
