#pragma once

// Baseline fusion strategies: concatenation, Euclidean cross-attention and
// Mobius-addition fusion. Each trainable one has a forward that keeps its
// intermediate values and an exact backward.

#include <vector>

#include "gocoma/geometry.hpp"
#include "gocoma/rng.hpp"
#include "gocoma/tensor.hpp"

namespace gocoma::baselines {

// Tokens concatenated in order: T x d -> T*d.
Vec flatten(const std::vector<Vec>& seq);

// (code, image) in that order.
Vec baseline_concat(std::span<const double> code_vec, std::span<const double> img_vec);

// log0(exp0(code) (+)_c exp0(img)); dims must match.
Vec baseline_mobius_fuse(std::span<const double> code_vec, std::span<const double> img_vec, geo::Curvature c);

// --- Euclidean scaled-dot-product cross-attention ---

struct XattnParams {
  Matrix w_q, w_k, w_v;
  Vec b_q, b_k, b_v;

  static XattnParams init(std::size_t d_code, std::size_t d_img, std::size_t d_model, Rng& rng);
  std::size_t d_model() const { return w_q.rows(); }
};

struct XattnState {
  std::vector<Vec> code, img;
  std::vector<Vec> q, k, v;
  Matrix attn_code_to_img;  // T_c x T_v, rows sum to 1
  Matrix attn_img_to_code;  // T_v x T_c, rows sum to 1
  Vec out;                  // mean_i(code->img) || mean_j(img->code)
};

// code->img: query Q_i attends over image keys K_j, aggregating V_j.
// img->code: K_j attends over code queries Q_i, aggregating Q_i (mirrors
// the hyperbolic layer's literal operand choice).
XattnState baseline_euclid_xattn(const std::vector<Vec>& code, const std::vector<Vec>& img, const XattnParams& p);

struct XattnGrads {
  Matrix w_q, w_k, w_v;
  Vec b_q, b_k, b_v;
  std::vector<Vec> code, img;
};
XattnGrads euclid_xattn_backward(const XattnParams& p, const XattnState& st, std::span<const double> g_out);

// --- Mobius-addition fusion with optional learned projections ---

struct MobiusFuseParams {
  // Empty when the two inputs already share a dimension.
  Matrix proj_code, proj_img;
  geo::Curvature curvature{1.0};

  static MobiusFuseParams init(std::size_t d_code, std::size_t d_img, std::size_t d_model, geo::Curvature c,
                               Rng& rng);
  bool projected() const { return proj_code.rows() > 0; }
  std::size_t output_dim(std::size_t d_code) const { return projected() ? proj_code.rows() : d_code; }
};

struct MobiusFuseState {
  Vec code_vec, img_vec;
  Vec code_t, img_t;  // after projection
  geo::BallPoint a, b, z;
  Vec out;
};
MobiusFuseState mobius_fuse_forward(std::span<const double> code_vec, std::span<const double> img_vec,
                                    const MobiusFuseParams& p);

struct MobiusFuseGrads {
  Matrix proj_code, proj_img;
  Vec code_vec, img_vec;
};
MobiusFuseGrads mobius_fuse_backward(const MobiusFuseParams& p, const MobiusFuseState& st,
                                     std::span<const double> g_out);

}  // namespace gocoma::baselines
