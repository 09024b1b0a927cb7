#pragma once

// Classification heads, optimizer, training loop and metrics.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string_view>
#include <vector>

#include "gocoma/binary_io.hpp"
#include "gocoma/fusion_layers.hpp"
#include "gocoma/params.hpp"
#include "gocoma/rng.hpp"
#include "gocoma/sample.hpp"
#include "gocoma/tensor.hpp"

namespace gocoma::clf {

Vec softmax(std::span<const double> logits);
// -log p[label], floored away from log(0).
double cross_entropy(std::span<const double> probs, int label);

enum class HeadKind { fcn, cnn };
std::string_view to_string(HeadKind kind);
HeadKind parse_head(std::string_view name);

struct HeadConfig {
  std::size_t hidden = 128;  // FCN hidden width
  double dropout = 0.2;
  std::size_t filters1 = 64, filters2 = 128, kernel = 3;
  std::size_t pool = 2;
};

struct HeadState {
  virtual ~HeadState() = default;
};

class Head {
 public:
  virtual ~Head() = default;
  virtual HeadKind kind() const = 0;
  virtual std::size_t input_dim() const = 0;
  virtual std::size_t n_classes() const = 0;
  // Dropout is active only when a dropout stream is supplied.
  virtual Vec logits(std::span<const double> x, Rng* dropout_rng, std::unique_ptr<HeadState>& state) const = 0;
  // Accumulates parameter gradients; returns the gradient w.r.t. x.
  virtual Vec backward(const HeadState& state, std::span<const double> g_logits) = 0;
  virtual std::vector<ParamView> params() = 0;
  // Shape tail written after the parameters in a checkpoint.
  virtual std::vector<double> shape_tail() const = 0;

  Vec probabilities(std::span<const double> x) const;
};

struct FcnParams {
  Matrix w1;  // hidden x in
  Vec b1;
  Matrix w2;  // classes x hidden
  Vec b2;
};

class FcnHead final : public Head {
 public:
  FcnHead(std::size_t in, std::size_t n_classes, const HeadConfig& cfg, Rng& rng);
  FcnHead(FcnParams p, double dropout);
  HeadKind kind() const override { return HeadKind::fcn; }
  std::size_t input_dim() const override { return p_.w1.cols(); }
  std::size_t n_classes() const override { return p_.w2.rows(); }
  Vec logits(std::span<const double> x, Rng* dropout_rng, std::unique_ptr<HeadState>& state) const override;
  Vec backward(const HeadState& state, std::span<const double> g_logits) override;
  std::vector<ParamView> params() override;
  std::vector<double> shape_tail() const override;
  FcnParams& raw() { return p_; }

 private:
  FcnParams p_, g_;
  double dropout_;
};

struct CnnParams {
  Matrix conv1;  // filters1 x kernel (single input channel)
  Vec b1;
  Matrix conv2;  // filters2 x (filters1 * kernel), column f * kernel + k
  Vec b2;
  Matrix dense;  // classes x (filters2 * pooled_len), column g * pooled_len + u
  Vec bd;
  std::size_t pool = 2;
};

// conv(k) -> ReLU -> conv(k) -> ReLU -> max-pool (ceil) -> flatten -> dropout -> dense.
class Conv1dStack final : public Head {
 public:
  Conv1dStack(std::size_t in, std::size_t n_classes, const HeadConfig& cfg, Rng& rng);
  Conv1dStack(CnnParams p, std::size_t in, double dropout);
  HeadKind kind() const override { return HeadKind::cnn; }
  std::size_t input_dim() const override { return in_; }
  std::size_t n_classes() const override { return p_.dense.rows(); }
  Vec logits(std::span<const double> x, Rng* dropout_rng, std::unique_ptr<HeadState>& state) const override;
  Vec backward(const HeadState& state, std::span<const double> g_logits) override;
  std::vector<ParamView> params() override;
  std::vector<double> shape_tail() const override;
  CnnParams& raw() { return p_; }
  static std::size_t pooled_length(std::size_t in, std::size_t kernel, std::size_t pool);

 private:
  CnnParams p_, g_;
  std::size_t in_;
  double dropout_;
};

std::unique_ptr<Head> make_head(HeadKind kind, std::size_t in, std::size_t n_classes, const HeadConfig& cfg,
                                Rng& rng);

// Evaluation-mode probabilities.
Vec fcn_head_forward(std::span<const double> z_euc, const FcnHead& head);
Vec cnn_forward(std::span<const double> x, const Conv1dStack& head);

// "CLSF0001" then little-endian f64: every parameter tensor in params()
// order, then kind, input dim, hidden or pool size, classes, filters1,
// filters2, kernel.
std::vector<std::uint8_t> encode_head(Head& head);
std::unique_ptr<Head> decode_head(std::span<const std::uint8_t> bytes, double dropout = 0.2);
void save_head(Head& head, const std::filesystem::path& path);
std::unique_ptr<Head> load_head(const std::filesystem::path& path, double dropout = 0.2);

class Model {
 public:
  Model(std::unique_ptr<FusionLayer> fusion, std::unique_ptr<Head> head);
  Vec predict_proba(const Sample& s) const;
  int predict(const Sample& s) const;
  // Forward + backward for one sample; gradients accumulate. Returns the loss.
  double accumulate(const Sample& s, Rng* dropout_rng);
  std::vector<ParamView> params();
  FusionLayer& fusion() { return *fusion_; }
  const FusionLayer& fusion() const { return *fusion_; }
  Head& head() { return *head_; }
  const Head& head() const { return *head_; }

 private:
  std::unique_ptr<FusionLayer> fusion_;
  std::unique_ptr<Head> head_;
};

class Adam {
 public:
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(const std::vector<ParamView>& params);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<double> m_, v_;
};

struct TrainConfig {
  std::size_t epochs = 25;
  double learning_rate = 5e-6;
  std::size_t batch_size = 16;
  double dropout = 0.2;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  void validate() const;
};

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0;  // percent
  std::size_t support = 0;
};

struct MetricsReport {
  double accuracy = 0;  // percent
  double macro_f1 = 0;  // percent
  std::vector<ClassMetrics> per_class;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t n = 0;
};

MetricsReport compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t n_classes);
MetricsReport evaluate(const Model& model, const std::vector<Sample>& split);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0, val_acc = 0, val_macro_f1 = 0;
  bool operator==(const EpochRecord&) const = default;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_macro_f1 = 0;
  bool stopped_early = false;
};

// Substream ids derived from the run seed.
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kOrderStream = 2;
inline constexpr std::uint64_t kDropoutStream = 3;

// Epoch-by-epoch visiting order: indices sorted by sample id, reshuffled
// each epoch from the (seed, order) substream. Depends on nothing else, so
// every fusion mode trained with one seed sees the same batches.
class DataOrder {
 public:
  DataOrder(const std::vector<Sample>& samples, std::uint64_t seed);
  std::vector<std::size_t> next_epoch();

 private:
  std::vector<std::size_t> base_;
  Rng rng_;
};

// Data order: samples sorted by id, then reshuffled every epoch from the
// (seed, 2) substream; dropout masks come from the (seed, 3) substream.
// On return the model holds the best-validation parameters.
TrainResult train(Model& model, const std::vector<Sample>& train_split, const std::vector<Sample>& val_split,
                  const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace gocoma::clf
