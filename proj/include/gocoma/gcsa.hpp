#pragma once

// Geodesic-similarity cross-modal attention fusion.
//
// Pipeline per sample:
//   lift       : tokenwise exp0 of the pre-scaled Euclidean embeddings
//   compute_qkv: Q from code tokens, K and V from image tokens, each through a
//                Mobius linear map (W (x)_c x) (+)_c b
//   scores     : s_code->img[i][j] = lambda * GCS(Q_i, K_j)
//                s_img->code[j][i] = lambda * GCS(K_j, Q_i)
//   aggregate  : z_code[i] = (+)_j s[i][j] (x)_c V_j
//                z_img[j]  = (+)_i s[j][i] (x)_c Q_i
//   fuse       : pool each modality by Mobius left-fold, then
//                z = pool(z_code) (+)_c pool(z_img), z_euc = log0(z)
//
// Mobius addition is neither commutative nor associative, so every
// (+)-reduction here is a left fold in ascending token index.
//
// Trainable quantities are Euclidean: the three weight matrices, the bias
// tangents (bias = exp0(tangent)) and lambda.

#include <filesystem>
#include <vector>

#include "gocoma/geometry.hpp"
#include "gocoma/rng.hpp"
#include "gocoma/tensor.hpp"

namespace gocoma::gcsa {

enum class Modality { code, image };
enum class Direction { code_to_img, img_to_code };

struct HyperbolicSequence {
  std::vector<geo::BallPoint> tokens;
  Modality modality = Modality::code;

  std::size_t size() const { return tokens.size(); }
};

struct GcsaConfig {
  std::size_t d_model = 128;
  double curvature = 1.0;
  double lambda_init = 1.0;
  // Row-softmax over raw scores; ablation only.
  bool softmax_scores = false;
  // img->code aggregates a V-projection of the code tokens instead of Q.
  bool symmetric_values = false;
};

struct GcsaParams {
  Matrix w_q, w_k, w_v;
  Vec b_q, b_k, b_v;  // bias tangents
  // Only used with symmetric_values.
  Matrix w_v_code;
  Vec b_v_code;
  double lambda = 1.0;
  geo::Curvature curvature{1.0};
  bool softmax_scores = false;
  bool symmetric_values = false;

  // W ~ U(-1/sqrt(d_in), 1/sqrt(d_in)), biases at the origin, lambda from cfg.
  static GcsaParams init(std::size_t d_code, std::size_t d_img, const GcsaConfig& cfg, Rng& rng);

  std::size_t d_model() const { return w_q.rows(); }
  std::size_t d_code() const { return w_q.cols(); }
  std::size_t d_img() const { return w_k.cols(); }

  geo::MobiusLinearParams query() const;
  geo::MobiusLinearParams key() const;
  geo::MobiusLinearParams value() const;
  geo::MobiusLinearParams code_value() const;

  void validate() const;
};

struct AttentionMatrix {
  Matrix code_to_img;  // T_c x T_v
  Matrix img_to_code;  // T_v x T_c
};

struct FusedEmbedding {
  geo::BallPoint z_hyp;
  Vec z_euc;
};

struct Qkv {
  HyperbolicSequence q, k, v;
};

HyperbolicSequence lift(const std::vector<Vec>& seq, geo::Curvature c, Modality modality, double prescale = 1.0);

Qkv compute_qkv(const HyperbolicSequence& code, const HyperbolicSequence& img, const GcsaParams& p);

AttentionMatrix attention_scores(const HyperbolicSequence& q, const HyperbolicSequence& k, double lambda);

// Output token r = left fold over k of scores(r, k) (x)_c operands[k].
HyperbolicSequence aggregate(Direction direction, const Matrix& scores, const HyperbolicSequence& operands);

FusedEmbedding pool_and_fuse(const HyperbolicSequence& z_code, const HyperbolicSequence& z_img);

// Left fold of Mobius addition in ascending index order.
geo::BallPoint mobius_fold(const std::vector<geo::BallPoint>& points);

// Everything the backward pass needs.
struct GcsaState {
  std::vector<Vec> code_in, img_in;  // after pre-scaling
  double code_prescale = 1.0, img_prescale = 1.0;
  HyperbolicSequence code_h, img_h;
  std::vector<geo::BallPoint> q_lin, k_lin, v_lin, vc_lin;  // W (x) x before the bias
  geo::BallPoint bias_q, bias_k, bias_v, bias_vc;
  Qkv qkv;
  HyperbolicSequence vc;  // symmetric_values only
  AttentionMatrix raw_scores;
  AttentionMatrix scores;  // after optional softmax
  std::vector<std::vector<geo::BallPoint>> code_terms, img_terms;
  std::vector<std::vector<geo::BallPoint>> code_partials, img_partials;
  HyperbolicSequence z_code, z_img;
  std::vector<geo::BallPoint> pool_code_partials, pool_img_partials;
  FusedEmbedding out;
};

GcsaState gcsa_forward(const std::vector<Vec>& code_euc, const std::vector<Vec>& img_euc, const GcsaParams& p,
                       double code_prescale = 1.0, double img_prescale = 1.0);

struct GcsaGrads {
  Matrix w_q, w_k, w_v, w_v_code;
  Vec b_q, b_k, b_v, b_v_code;
  double lambda = 0.0;
  std::vector<Vec> code_in, img_in;  // w.r.t. raw (unscaled) inputs

  static GcsaGrads zeros_like(const GcsaParams& p);
  void accumulate(const GcsaGrads& o);
};

// Throws NumericalFailure naming the stage if any gradient is non-finite.
GcsaGrads gcsa_backward(const GcsaParams& p, const GcsaState& state, std::span<const double> g_z_euc);

// "GCSA0001" followed by little-endian f64 fields: W_Q, b_Q tangent, W_K,
// b_K tangent, W_V, b_V tangent, [W_V_code, b_V_code tangent when
// symmetric_values], lambda, c, d_model, d_code, d_img.
void save_checkpoint(const GcsaParams& p, const std::filesystem::path& path);
GcsaParams load_checkpoint(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_checkpoint(const GcsaParams& p);
GcsaParams decode_checkpoint(std::span<const std::uint8_t> bytes);

}  // namespace gocoma::gcsa
