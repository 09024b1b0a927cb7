#include "gocoma/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "gocoma/errors.hpp"

namespace gocoma::clf {

namespace {

constexpr std::string_view kMagic = "CLSF0001";
constexpr std::size_t kTailFields = 7;

Matrix init_weight(std::size_t rows, std::size_t cols, std::size_t fan_in, Rng& rng) {
  Matrix w(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : w.values()) v = rng.uniform(-bound, bound);
  return w;
}

ParamView view(std::string name, Matrix& v, Matrix& g) { return {std::move(name), v.values(), g.values()}; }
ParamView view(std::string name, Vec& v, Vec& g) { return {std::move(name), v, g}; }

void check_input(std::span<const double> x, std::size_t expected, const char* what) {
  if (x.size() != expected)
    throw InvalidInput(std::string(what) + ": expected input of size " + std::to_string(expected) + ", got " +
                       std::to_string(x.size()));
  if (!all_finite(x)) throw InvalidInput(std::string(what) + ": non-finite input");
}

// Inverted dropout: kept units are scaled by 1/(1-p).
Vec dropout_mask(std::size_t n, double p, Rng* rng) {
  Vec mask(n, 1.0);
  if (rng == nullptr || p <= 0.0) return mask;
  const double keep = 1.0 / (1.0 - p);
  for (double& m : mask) m = rng->uniform() < p ? 0.0 : keep;
  return mask;
}

Matrix zeros_like(const Matrix& m) { return Matrix(m.rows(), m.cols()); }

struct FcnState final : HeadState {
  Vec x, pre, mask, hidden;
};

struct CnnState final : HeadState {
  Vec x;
  Matrix a1, a2;  // pre-activations
  std::vector<std::size_t> argmax;
  Vec mask, flat;  // flat is after dropout
};

}  // namespace

Vec softmax(std::span<const double> logits) {
  if (logits.empty()) throw InvalidInput("softmax: empty input");
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) sum += (out[i] = std::exp(logits[i] - mx));
  for (double& v : out) v /= sum;
  return out;
}

double cross_entropy(std::span<const double> probs, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probs.size()) throw InvalidInput("cross_entropy: bad label");
  return -std::log(std::max(probs[static_cast<std::size_t>(label)], 1e-300));
}

std::string_view to_string(HeadKind kind) { return kind == HeadKind::fcn ? "fcn" : "cnn"; }

HeadKind parse_head(std::string_view name) {
  if (name == "fcn") return HeadKind::fcn;
  if (name == "cnn") return HeadKind::cnn;
  throw InvalidInput("unknown head '" + std::string(name) + "'");
}

Vec Head::probabilities(std::span<const double> x) const {
  std::unique_ptr<HeadState> st;
  return softmax(logits(x, nullptr, st));
}

// --- FCN ---

FcnHead::FcnHead(std::size_t in, std::size_t n_classes, const HeadConfig& cfg, Rng& rng) : dropout_(cfg.dropout) {
  if (in == 0 || n_classes == 0 || cfg.hidden == 0) throw InvalidInput("FcnHead: sizes must be positive");
  p_.w1 = init_weight(cfg.hidden, in, in, rng);
  p_.b1 = Vec(cfg.hidden, 0.0);
  p_.w2 = init_weight(n_classes, cfg.hidden, cfg.hidden, rng);
  p_.b2 = Vec(n_classes, 0.0);
  g_ = {zeros_like(p_.w1), Vec(cfg.hidden, 0.0), zeros_like(p_.w2), Vec(n_classes, 0.0)};
}

FcnHead::FcnHead(FcnParams p, double dropout) : p_(std::move(p)), dropout_(dropout) {
  if (p_.b1.size() != p_.w1.rows() || p_.w2.cols() != p_.w1.rows() || p_.b2.size() != p_.w2.rows())
    throw InvalidInput("FcnHead: inconsistent parameter shapes");
  g_ = {zeros_like(p_.w1), Vec(p_.b1.size(), 0.0), zeros_like(p_.w2), Vec(p_.b2.size(), 0.0)};
}

Vec FcnHead::logits(std::span<const double> x, Rng* dropout_rng, std::unique_ptr<HeadState>& state) const {
  check_input(x, input_dim(), "fcn head");
  auto st = std::make_unique<FcnState>();
  st->x.assign(x.begin(), x.end());
  st->pre = matvec(p_.w1, x);
  axpy(1.0, p_.b1, st->pre);
  st->mask = dropout_mask(st->pre.size(), dropout_, dropout_rng);
  st->hidden.resize(st->pre.size());
  for (std::size_t i = 0; i < st->pre.size(); ++i) st->hidden[i] = std::max(st->pre[i], 0.0) * st->mask[i];
  Vec out = matvec(p_.w2, st->hidden);
  axpy(1.0, p_.b2, out);
  state = std::move(st);
  return out;
}

Vec FcnHead::backward(const HeadState& state, std::span<const double> g_logits) {
  const auto& st = dynamic_cast<const FcnState&>(state);
  if (g_logits.size() != n_classes()) throw InvalidInput("fcn head backward: gradient size mismatch");
  add_outer(g_.w2, g_logits, st.hidden);
  axpy(1.0, g_logits, g_.b2);
  Vec g_pre = matvec_transposed(p_.w2, g_logits);
  for (std::size_t i = 0; i < g_pre.size(); ++i) g_pre[i] *= st.pre[i] > 0.0 ? st.mask[i] : 0.0;
  add_outer(g_.w1, g_pre, st.x);
  axpy(1.0, g_pre, g_.b1);
  return matvec_transposed(p_.w1, g_pre);
}

std::vector<ParamView> FcnHead::params() {
  return {view("fcn.w1", p_.w1, g_.w1), view("fcn.b1", p_.b1, g_.b1), view("fcn.w2", p_.w2, g_.w2),
          view("fcn.b2", p_.b2, g_.b2)};
}

std::vector<double> FcnHead::shape_tail() const {
  return {0.0, double(input_dim()), double(p_.w1.rows()), double(n_classes()), 0.0, 0.0, 0.0};
}

// --- 1-D CNN ---

std::size_t Conv1dStack::pooled_length(std::size_t in, std::size_t kernel, std::size_t pool) {
  if (kernel == 0 || pool == 0) throw InvalidInput("Conv1dStack: kernel and pool must be positive");
  if (in < 2 * kernel - 1)
    throw InvalidInput("Conv1dStack: input length " + std::to_string(in) + " is shorter than " +
                       std::to_string(2 * kernel - 1));
  const std::size_t l2 = in - 2 * (kernel - 1);
  return (l2 + pool - 1) / pool;
}

Conv1dStack::Conv1dStack(std::size_t in, std::size_t n_classes, const HeadConfig& cfg, Rng& rng)
    : in_(in), dropout_(cfg.dropout) {
  if (n_classes == 0 || cfg.filters1 == 0 || cfg.filters2 == 0) throw InvalidInput("Conv1dStack: bad sizes");
  const std::size_t k = cfg.kernel, f1 = cfg.filters1, f2 = cfg.filters2;
  const std::size_t pooled = pooled_length(in, k, cfg.pool);
  p_.pool = cfg.pool;
  p_.conv1 = init_weight(f1, k, k, rng);
  p_.b1 = Vec(f1, 0.0);
  p_.conv2 = init_weight(f2, f1 * k, f1 * k, rng);
  p_.b2 = Vec(f2, 0.0);
  p_.dense = init_weight(n_classes, f2 * pooled, f2 * pooled, rng);
  p_.bd = Vec(n_classes, 0.0);
  g_ = {zeros_like(p_.conv1), Vec(f1, 0.0), zeros_like(p_.conv2), Vec(f2, 0.0), zeros_like(p_.dense),
        Vec(n_classes, 0.0), p_.pool};
}

Conv1dStack::Conv1dStack(CnnParams p, std::size_t in, double dropout) : p_(std::move(p)), in_(in), dropout_(dropout) {
  const std::size_t k = p_.conv1.cols(), f1 = p_.conv1.rows(), f2 = p_.conv2.rows();
  const std::size_t pooled = pooled_length(in, k, p_.pool);
  if (p_.b1.size() != f1 || p_.conv2.cols() != f1 * k || p_.b2.size() != f2 || p_.dense.cols() != f2 * pooled ||
      p_.bd.size() != p_.dense.rows())
    throw InvalidInput("Conv1dStack: inconsistent parameter shapes");
  g_ = {zeros_like(p_.conv1), Vec(f1, 0.0), zeros_like(p_.conv2), Vec(f2, 0.0), zeros_like(p_.dense),
        Vec(p_.bd.size(), 0.0), p_.pool};
}

Vec Conv1dStack::logits(std::span<const double> x, Rng* dropout_rng, std::unique_ptr<HeadState>& state) const {
  check_input(x, in_, "cnn head");
  const std::size_t k = p_.conv1.cols(), f1 = p_.conv1.rows(), f2 = p_.conv2.rows();
  const std::size_t l1 = in_ - k + 1, l2 = l1 - k + 1;
  const std::size_t pooled = (l2 + p_.pool - 1) / p_.pool;

  auto st = std::make_unique<CnnState>();
  st->x.assign(x.begin(), x.end());
  st->a1 = Matrix(f1, l1);
  for (std::size_t f = 0; f < f1; ++f)
    for (std::size_t t = 0; t < l1; ++t) {
      double s = p_.b1[f];
      for (std::size_t j = 0; j < k; ++j) s += p_.conv1(f, j) * x[t + j];
      st->a1(f, t) = s;
    }
  Matrix h1(f1, l1);
  for (std::size_t i = 0; i < h1.values().size(); ++i) h1.values()[i] = std::max(st->a1.values()[i], 0.0);

  st->a2 = Matrix(f2, l2);
  for (std::size_t g = 0; g < f2; ++g) {
    const auto w = p_.conv2.row(g);
    for (std::size_t t = 0; t < l2; ++t) {
      double s = p_.b2[g];
      for (std::size_t f = 0; f < f1; ++f) {
        const auto h = h1.row(f);
        for (std::size_t j = 0; j < k; ++j) s += w[f * k + j] * h[t + j];
      }
      st->a2(g, t) = s;
    }
  }

  Vec flat(f2 * pooled);
  st->argmax.resize(flat.size());
  for (std::size_t g = 0; g < f2; ++g)
    for (std::size_t u = 0; u < pooled; ++u) {
      const std::size_t lo = u * p_.pool, hi = std::min(l2, lo + p_.pool);
      std::size_t best = lo;
      for (std::size_t t = lo + 1; t < hi; ++t)
        if (st->a2(g, t) > st->a2(g, best)) best = t;
      st->argmax[g * pooled + u] = best;
      flat[g * pooled + u] = std::max(st->a2(g, best), 0.0);
    }
  st->mask = dropout_mask(flat.size(), dropout_, dropout_rng);
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] *= st->mask[i];
  st->flat = std::move(flat);

  Vec out = matvec(p_.dense, st->flat);
  axpy(1.0, p_.bd, out);
  state = std::move(st);
  return out;
}

Vec Conv1dStack::backward(const HeadState& state, std::span<const double> g_logits) {
  const auto& st = dynamic_cast<const CnnState&>(state);
  if (g_logits.size() != n_classes()) throw InvalidInput("cnn head backward: gradient size mismatch");
  const std::size_t k = p_.conv1.cols(), f1 = p_.conv1.rows(), f2 = p_.conv2.rows();
  const std::size_t l1 = st.a1.cols(), l2 = st.a2.cols();
  const std::size_t pooled = st.flat.size() / f2;

  add_outer(g_.dense, g_logits, st.flat);
  axpy(1.0, g_logits, g_.bd);
  const Vec g_flat = matvec_transposed(p_.dense, g_logits);

  Matrix g_a2(f2, l2);
  for (std::size_t g = 0; g < f2; ++g)
    for (std::size_t u = 0; u < pooled; ++u) {
      const std::size_t i = g * pooled + u, t = st.argmax[i];
      if (st.a2(g, t) > 0.0) g_a2(g, t) += g_flat[i] * st.mask[i];
    }

  Matrix g_h1(f1, l1);
  for (std::size_t g = 0; g < f2; ++g) {
    const auto w = p_.conv2.row(g);
    const auto gw = g_.conv2.row(g);
    for (std::size_t t = 0; t < l2; ++t) {
      const double ga = g_a2(g, t);
      if (ga == 0.0) continue;
      g_.b2[g] += ga;
      for (std::size_t f = 0; f < f1; ++f)
        for (std::size_t j = 0; j < k; ++j) {
          gw[f * k + j] += ga * std::max(st.a1(f, t + j), 0.0);
          g_h1(f, t + j) += ga * w[f * k + j];
        }
    }
  }

  Vec g_x(in_, 0.0);
  for (std::size_t f = 0; f < f1; ++f)
    for (std::size_t t = 0; t < l1; ++t) {
      if (st.a1(f, t) <= 0.0) continue;
      const double ga = g_h1(f, t);
      g_.b1[f] += ga;
      for (std::size_t j = 0; j < k; ++j) {
        g_.conv1(f, j) += ga * st.x[t + j];
        g_x[t + j] += ga * p_.conv1(f, j);
      }
    }
  return g_x;
}

std::vector<ParamView> Conv1dStack::params() {
  return {view("cnn.conv1", p_.conv1, g_.conv1), view("cnn.b1", p_.b1, g_.b1),
          view("cnn.conv2", p_.conv2, g_.conv2), view("cnn.b2", p_.b2, g_.b2),
          view("cnn.dense", p_.dense, g_.dense), view("cnn.bd", p_.bd, g_.bd)};
}

std::vector<double> Conv1dStack::shape_tail() const {
  return {1.0,
          double(in_),
          double(p_.pool),
          double(n_classes()),
          double(p_.conv1.rows()),
          double(p_.conv2.rows()),
          double(p_.conv1.cols())};
}

std::unique_ptr<Head> make_head(HeadKind kind, std::size_t in, std::size_t n_classes, const HeadConfig& cfg,
                                Rng& rng) {
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0)) throw InvalidInput("head dropout must lie in [0, 1)");
  if (kind == HeadKind::fcn) return std::make_unique<FcnHead>(in, n_classes, cfg, rng);
  return std::make_unique<Conv1dStack>(in, n_classes, cfg, rng);
}

Vec fcn_head_forward(std::span<const double> z_euc, const FcnHead& head) { return head.probabilities(z_euc); }
Vec cnn_forward(std::span<const double> x, const Conv1dStack& head) { return head.probabilities(x); }

// --- checkpoints ---

std::vector<std::uint8_t> encode_head(Head& head) {
  io::ByteWriter w;
  w.put_string(kMagic);
  for (const auto& p : head.params()) w.put_f64s(p.value);
  w.put_f64s(head.shape_tail());
  return w.bytes();
}

std::unique_ptr<Head> decode_head(std::span<const std::uint8_t> bytes, double dropout) {
  if (bytes.size() < kMagic.size() + kTailFields * 8) throw InvalidInput("CLSF checkpoint: file too short");
  io::ByteReader r(bytes);
  if (r.take_string(kMagic.size()) != kMagic) throw InvalidInput("CLSF checkpoint: bad magic");
  io::ByteReader tail_reader(bytes.subspan(bytes.size() - kTailFields * 8));
  const auto tail = tail_reader.take_f64s(kTailFields);
  for (double v : tail)
    if (!(v >= 0.0) || v != std::floor(v) || v > 1e9) throw InvalidInput("CLSF checkpoint: bad shape field");
  const auto at = [&](std::size_t i) { return static_cast<std::size_t>(tail[i]); };

  // Build a zero-initialized head of the recorded shape, then fill it.
  Rng dummy(0);
  HeadConfig cfg;
  cfg.dropout = dropout;
  std::unique_ptr<Head> head;
  if (at(0) == 0) {
    cfg.hidden = at(2);
    head = make_head(HeadKind::fcn, at(1), at(3), cfg, dummy);
  } else if (at(0) == 1) {
    cfg.pool = at(2);
    cfg.filters1 = at(4);
    cfg.filters2 = at(5);
    cfg.kernel = at(6);
    head = make_head(HeadKind::cnn, at(1), at(3), cfg, dummy);
  } else {
    throw InvalidInput("CLSF checkpoint: unknown head kind");
  }
  const auto params = head->params();
  std::size_t total = 0;
  for (const auto& p : params) total += p.value.size();
  if (bytes.size() != kMagic.size() + (total + kTailFields) * 8)
    throw InvalidInput("CLSF checkpoint: size does not match recorded shapes");
  for (const auto& p : params) {
    const auto v = r.take_f64s(p.value.size());
    std::copy(v.begin(), v.end(), p.value.begin());
  }
  return head;
}

void save_head(Head& head, const std::filesystem::path& path) { io::write_file_atomic(path, encode_head(head)); }

std::unique_ptr<Head> load_head(const std::filesystem::path& path, double dropout) {
  return decode_head(io::read_file(path), dropout);
}

// --- model ---

Model::Model(std::unique_ptr<FusionLayer> fusion, std::unique_ptr<Head> head)
    : fusion_(std::move(fusion)), head_(std::move(head)) {
  if (!fusion_ || !head_) throw InvalidInput("Model: null component");
  if (fusion_->output_dim() != head_->input_dim())
    throw InvalidInput("Model: fusion output " + std::to_string(fusion_->output_dim()) + " != head input " +
                       std::to_string(head_->input_dim()));
}

Vec Model::predict_proba(const Sample& s) const {
  std::unique_ptr<FusionState> fs;
  return head_->probabilities(fusion_->forward(s, fs));
}

int Model::predict(const Sample& s) const {
  const Vec p = predict_proba(s);
  return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
}

double Model::accumulate(const Sample& s, Rng* dropout_rng) {
  std::unique_ptr<FusionState> fs;
  std::unique_ptr<HeadState> hs;
  const Vec z = fusion_->forward(s, fs);
  if (!all_finite(z)) throw NumericalFailure("non-finite fused features for sample '" + s.id + "'");
  Vec g = softmax(head_->logits(z, dropout_rng, hs));
  const double loss = cross_entropy(g, s.label);
  g[static_cast<std::size_t>(s.label)] -= 1.0;
  const Vec g_z = head_->backward(*hs, g);
  if (!fusion_->params().empty()) fusion_->backward(*fs, g_z);
  return loss;
}

std::vector<ParamView> Model::params() {
  auto out = fusion_->params();
  for (auto& p : head_->params()) out.push_back(std::move(p));
  return out;
}

// --- optimizer ---

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(const std::vector<ParamView>& params) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.value.size();
  if (m_.empty()) {
    m_.assign(total, 0.0);
    v_.assign(total, 0.0);
  }
  if (m_.size() != total) throw InvalidInput("Adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t i = 0;
  for (const auto& p : params)
    for (std::size_t j = 0; j < p.value.size(); ++j, ++i) {
      const double g = p.grad[j];
      m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
      v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
      p.value[j] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
    }
}

// --- metrics ---

void TrainConfig::validate() const {
  if (epochs == 0) throw InvalidInput("epochs must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InvalidInput("learning_rate must be positive");
  if (batch_size == 0) throw InvalidInput("batch_size must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidInput("dropout must lie in [0, 1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw InvalidInput("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw InvalidInput("Adam eps must be positive");
}

MetricsReport compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred, std::size_t n_classes) {
  if (y_true.empty()) throw InvalidInput("evaluate: empty split");
  if (y_true.size() != y_pred.size()) throw InvalidInput("evaluate: label/prediction count mismatch");
  if (n_classes == 0) throw InvalidInput("evaluate: no classes");
  MetricsReport r;
  r.n = y_true.size();
  r.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i], p = y_pred[i];
    if (t < 0 || p < 0 || std::size_t(t) >= n_classes || std::size_t(p) >= n_classes)
      throw InvalidInput("evaluate: label out of range");
    ++r.confusion[std::size_t(t)][std::size_t(p)];
    correct += t == p;
  }
  r.accuracy = 100.0 * double(correct) / double(r.n);
  double f1_sum = 0.0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const double tp = double(r.confusion[c][c]);
    double predicted = 0.0, actual = 0.0;
    for (std::size_t o = 0; o < n_classes; ++o) {
      predicted += double(r.confusion[o][c]);
      actual += double(r.confusion[c][o]);
    }
    ClassMetrics m;
    m.support = static_cast<std::size_t>(actual);
    const double prec = predicted > 0.0 ? tp / predicted : 0.0;
    const double rec = actual > 0.0 ? tp / actual : 0.0;
    const double f1 = prec + rec > 0.0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    m.precision = 100.0 * prec;
    m.recall = 100.0 * rec;
    m.f1 = 100.0 * f1;
    f1_sum += m.f1;
    r.per_class.push_back(m);
  }
  r.macro_f1 = f1_sum / double(n_classes);
  return r;
}

MetricsReport evaluate(const Model& model, const std::vector<Sample>& split) {
  if (split.empty()) throw InvalidInput("evaluate: empty split");
  std::vector<int> truth, pred;
  for (const auto& s : split) {
    truth.push_back(s.label);
    pred.push_back(model.predict(s));
  }
  return compute_metrics(truth, pred, model.head().n_classes());
}

// --- training ---

DataOrder::DataOrder(const std::vector<Sample>& samples, std::uint64_t seed)
    : base_(samples.size()), rng_(Rng::substream(seed, kOrderStream)) {
  std::iota(base_.begin(), base_.end(), 0);
  std::stable_sort(base_.begin(), base_.end(),
                   [&](std::size_t a, std::size_t b) { return samples[a].id < samples[b].id; });
}

std::vector<std::size_t> DataOrder::next_epoch() {
  std::vector<std::size_t> order = base_;
  rng_.shuffle(order);
  return order;
}

TrainResult train(Model& model, const std::vector<Sample>& train_split, const std::vector<Sample>& val_split,
                  const TrainConfig& cfg, const std::function<void(const EpochRecord&)>& on_epoch) {
  cfg.validate();
  if (train_split.empty() || val_split.empty()) throw InvalidInput("train: train and validation splits must be nonempty");

  DataOrder data_order(train_split, cfg.seed);
  Rng dropout_rng = Rng::substream(cfg.seed, kDropoutStream);
  const auto params = model.params();
  Adam adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);

  TrainResult result;
  double best = -1.0;
  std::vector<double> best_values = snapshot(params);
  std::size_t stale = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = data_order.next_epoch();
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      zero_grads(params);
      for (std::size_t i = start; i < end; ++i) {
        const double loss = model.accumulate(train_split[order[i]], &dropout_rng);
        if (!std::isfinite(loss))
          throw NumericalFailure("non-finite training loss at epoch " + std::to_string(epoch));
        total += loss;
      }
      scale_grads(params, 1.0 / double(end - start));
      adam.step(params);
    }
    const auto val = evaluate(model, val_split);
    EpochRecord rec{epoch, total / double(order.size()), val.accuracy, val.macro_f1};
    if (!std::isfinite(rec.train_loss)) throw NumericalFailure("non-finite training loss at epoch " + std::to_string(epoch));
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (val.macro_f1 > best) {
      best = val.macro_f1;
      best_values = snapshot(params);
      result.best_epoch = epoch;
      result.best_val_macro_f1 = val.macro_f1;
      stale = 0;
    } else if (++stale > cfg.patience) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  restore(params, best_values);
  zero_grads(params);
  return result;
}

}  // namespace gocoma::clf
