#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gocoma/classifier.hpp"
#include "support.hpp"

using namespace gocoma;
using namespace gocoma::clf;
using namespace testing_support;

namespace {

// Loss through a head with a replayed dropout mask, so finite differences
// see exactly the same function as the analytic backward.
double head_loss(const Head& head, std::span<const double> x, int label, std::uint64_t mask_seed) {
  Rng r(mask_seed);
  std::unique_ptr<HeadState> st;
  return cross_entropy(softmax(head.logits(x, &r, st)), label);
}

void check_head_gradients(Head& head, Vec x, int label, std::uint64_t mask_seed, std::size_t max_entries = 4000) {
  for (const auto& p : head.params()) std::fill(p.grad.begin(), p.grad.end(), 0.0);
  Rng r(mask_seed);
  std::unique_ptr<HeadState> st;
  Vec g = softmax(head.logits(x, &r, st));
  g[std::size_t(label)] -= 1.0;
  const Vec g_x = head.backward(*st, g);

  const auto loss = [&] { return head_loss(head, x, label, mask_seed); };
  for (const auto& p : head.params()) {
    INFO(p.name);
    if (p.value.size() <= max_entries) {
      CHECK(max_rel_error(p.grad, finite_difference(p.value, loss)) < 1e-4);
    } else {
      // Large tensors: a fixed stride of entries.
      const std::size_t stride = p.value.size() / max_entries + 1;
      double worst = 0.0;
      for (std::size_t i = 0; i < p.value.size(); i += stride) {
        std::span<double> one(p.value.data() + i, 1);
        worst = std::max(worst, max_rel_error(std::span<const double>(p.grad.data() + i, 1),
                                              finite_difference(one, loss)));
      }
      CHECK(worst < 1e-4);
    }
  }
  CHECK(max_rel_error(g_x, finite_difference(x, loss)) < 1e-4);
}

std::vector<Sample> separable_set(std::size_t n, std::uint64_t seed, double noise = 0.0) {
  Rng rng(seed);
  const std::vector<Vec> centers{{1.0, 0.0, 0.5, -0.5, 0.2, 0.0}, {-1.0, 0.5, 0.0, 0.5, 0.0, 0.3}, {0.0, -1.0, -0.5, 0.0, -0.2, -0.3}};
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.id = "s" + std::to_string(1000 + i);
    s.label = int(i % centers.size());
    Vec v = centers[std::size_t(s.label)];
    for (double& x : v) x += noise * rng.uniform(-1.0, 1.0);
    s.code = {v};
    s.image = {Vec{0.0, 0.0}};
    out.push_back(std::move(s));
  }
  return out;
}

Model code_model(std::uint64_t seed, HeadKind head = HeadKind::fcn, double dropout = 0.2) {
  FusionSpec spec;
  spec.kind = FusionKind::code;
  spec.d_code = 6;
  spec.d_img = 2;
  Rng rng = Rng::substream(seed, kInitStream);
  auto fusion = make_fusion(spec, rng);
  HeadConfig hc;
  hc.hidden = 8;
  hc.dropout = dropout;
  hc.filters1 = 4;
  hc.filters2 = 6;
  auto h = make_head(head, fusion->output_dim(), 3, hc, rng);
  return Model(std::move(fusion), std::move(h));
}

}  // namespace

TEST_CASE("softmax and cross-entropy") {
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    const Vec p = softmax(random_vec(rng, 5, 30.0));
    CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  }
  CHECK(softmax(Vec{1000.0, 1000.0})[0] == doctest::Approx(0.5));
  CHECK(cross_entropy(Vec{0.25, 0.75}, 1) == doctest::Approx(-std::log(0.75)));
  CHECK(std::isfinite(cross_entropy(Vec{0.0, 1.0}, 0)));
  CHECK_THROWS_AS(cross_entropy(Vec{0.5, 0.5}, 2), InvalidInput);
}

TEST_CASE("fcn head") {
  Rng rng(2);
  HeadConfig cfg;
  cfg.hidden = 6;
  FcnHead head(5, 3, cfg, rng);
  const Vec x = random_vec(rng, 5);
  const Vec p = fcn_head_forward(x, head);
  CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(fcn_head_forward(x, head) == p);  // no dropout at evaluation
  CHECK_THROWS_AS(fcn_head_forward(Vec(4, 0.0), head), InvalidInput);

  for (const auto& pv : head.params()) std::fill(pv.value.begin(), pv.value.end(), 0.0);
  for (double v : fcn_head_forward(x, head)) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("fcn head gradients") {
  Rng rng(3);
  const std::size_t shapes[][3] = {{3, 4, 2}, {5, 7, 3}, {8, 8, 4}, {2, 3, 5}};
  for (const auto& s : shapes) {
    HeadConfig cfg;
    cfg.hidden = s[1];
    FcnHead head(s[0], s[2], cfg, rng);
    for (auto& b : {std::ref(head.raw().b1), std::ref(head.raw().b2)})
      for (double& v : b.get()) v = rng.uniform(-0.3, 0.3);
    check_head_gradients(head, random_vec(rng, s[0]), int(rng.below(s[2])), rng.next_u64());
  }
}

TEST_CASE("cnn head") {
  Rng rng(4);
  HeadConfig cfg;
  CHECK(Conv1dStack::pooled_length(5, 3, 2) == 1);
  CHECK(Conv1dStack::pooled_length(9, 3, 2) == 3);
  CHECK_THROWS_AS(Conv1dStack(4, 2, cfg, rng), InvalidInput);

  Conv1dStack head(12, 4, cfg, rng);
  CHECK(head.raw().conv1.rows() == 64);
  CHECK(head.raw().conv2.rows() == 128);
  const Vec x = random_vec(rng, 12);
  const Vec p = cnn_forward(x, head);
  CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));

  for (const auto& pv : head.params()) std::fill(pv.value.begin(), pv.value.end(), 0.0);
  for (double v : cnn_forward(x, head)) CHECK(v == 0.25);
}

TEST_CASE("cnn forward matches a brute-force convolution") {
  // 2 filters, then 2 filters, input length 7, pool 2: L1 = 5, L2 = 3, pooled 2.
  CnnParams p;
  p.conv1 = Matrix(2, 3);
  p.conv1.values() = {0.5, -0.25, 1.0, -1.0, 0.75, 0.5};
  p.b1 = {0.1, -0.2};
  p.conv2 = Matrix(2, 6);
  p.conv2.values() = {0.3, -0.2, 0.1, 0.4, 0.5, -0.6, -0.1, 0.2, 0.7, -0.3, 0.25, 0.15};
  p.b2 = {0.05, -0.05};
  p.dense = Matrix(3, 4);
  p.dense.values() = {1.0, -1.0, 0.5, 0.25, -0.5, 0.75, 1.5, -0.25, 0.2, 0.3, -0.4, 0.6};
  p.bd = {0.0, 0.1, -0.1};
  p.pool = 2;
  const Vec x{0.9, -0.3, 0.4, 1.2, -0.8, 0.6, 0.1};

  double h1[2][5], h2[2][3];
  for (int f = 0; f < 2; ++f)
    for (int t = 0; t < 5; ++t)
      h1[f][t] = std::max(0.0, p.b1[f] + p.conv1(f, 0) * x[t] + p.conv1(f, 1) * x[t + 1] + p.conv1(f, 2) * x[t + 2]);
  for (int g = 0; g < 2; ++g)
    for (int t = 0; t < 3; ++t) {
      double s = p.b2[g];
      for (int f = 0; f < 2; ++f)
        for (int k = 0; k < 3; ++k) s += p.conv2(g, f * 3 + k) * h1[f][t + k];
      h2[g][t] = std::max(0.0, s);
    }
  const double flat[4] = {std::max(h2[0][0], h2[0][1]), h2[0][2], std::max(h2[1][0], h2[1][1]), h2[1][2]};
  Vec logits(3);
  for (int c = 0; c < 3; ++c) {
    logits[c] = p.bd[c];
    for (int i = 0; i < 4; ++i) logits[c] += p.dense(c, i) * flat[i];
  }
  const Vec expected = softmax(logits);
  const Conv1dStack head(p, 7, 0.2);
  CHECK(max_abs_diff(cnn_forward(x, head), expected) < 1e-15);
}

TEST_CASE("cnn head gradients") {
  Rng rng(5);
  SUBCASE("small stacks") {
    const std::size_t shapes[][4] = {{7, 3, 4, 2}, {10, 2, 5, 3}, {6, 4, 3, 4}};  // in, f1, f2, classes
    for (const auto& s : shapes) {
      HeadConfig cfg;
      cfg.filters1 = s[1];
      cfg.filters2 = s[2];
      Conv1dStack head(s[0], s[3], cfg, rng);
      for (auto& b : {std::ref(head.raw().b1), std::ref(head.raw().b2), std::ref(head.raw().bd)})
        for (double& v : b.get()) v = rng.uniform(-0.2, 0.2);
      check_head_gradients(head, random_vec(rng, s[0]), int(rng.below(s[3])), rng.next_u64());
    }
  }
  SUBCASE("full-width stack") {
    HeadConfig cfg;
    Conv1dStack head(8, 3, cfg, rng);
    for (double& v : head.raw().b1) v = rng.uniform(-0.2, 0.2);
    check_head_gradients(head, random_vec(rng, 8), 1, 99, 3000);
  }
}

TEST_CASE("head checkpoints") {
  Rng rng(6);
  HeadConfig cfg;
  cfg.hidden = 5;
  cfg.filters1 = 3;
  cfg.filters2 = 4;
  for (HeadKind kind : {HeadKind::fcn, HeadKind::cnn}) {
    auto head = make_head(kind, 9, 3, cfg, rng);
    const auto bytes = encode_head(*head);
    CHECK(std::string(bytes.begin(), bytes.begin() + 8) == "CLSF0001");
    auto back = decode_head(bytes);
    CHECK(back->kind() == kind);
    CHECK(snapshot(back->params()) == snapshot(head->params()));
    CHECK(encode_head(*back) == bytes);
    auto cut = bytes;
    cut.pop_back();
    CHECK_THROWS_AS(decode_head(cut), InvalidInput);
  }
}

TEST_CASE("adam") {
  Vec value{1.0, -2.0}, grad{0.5, -3.0};
  std::vector<ParamView> params{{"p", value, grad}};
  Adam adam(0.1);
  adam.step(params);
  // First bias-corrected step is lr * g / (|g| + eps).
  CHECK(value[0] == doctest::Approx(1.0 - 0.1 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(value[1] == doctest::Approx(-2.0 + 0.1 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("metrics") {
  SUBCASE("all correct") {
    const auto r = compute_metrics({0, 1, 2, 1}, {0, 1, 2, 1}, 3);
    CHECK(r.accuracy == 100.0);
    CHECK(r.macro_f1 == 100.0);
  }
  SUBCASE("absent class contributes zero F1") {
    const auto r = compute_metrics({0, 0, 0}, {0, 0, 0}, 2);
    CHECK(r.accuracy == 100.0);
    CHECK(r.macro_f1 == 50.0);
  }
  SUBCASE("empty split") { CHECK_THROWS_AS(compute_metrics({}, {}, 2), InvalidInput); }
  SUBCASE("random 3-class case against naive counting") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<int> t, p;
      for (int i = 0; i < 40; ++i) {
        t.push_back(int(rng.below(3)));
        p.push_back(rng.uniform() < 0.6 ? t.back() : int(rng.below(3)));
      }
      double f1_sum = 0.0;
      int correct = 0;
      for (int c = 0; c < 3; ++c) {
        int tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < t.size(); ++i) {
          tp += t[i] == c && p[i] == c;
          fp += t[i] != c && p[i] == c;
          fn += t[i] == c && p[i] != c;
        }
        f1_sum += tp == 0 ? 0.0 : 2.0 * tp / (2.0 * tp + fp + fn);
      }
      for (std::size_t i = 0; i < t.size(); ++i) correct += t[i] == p[i];
      const auto r = compute_metrics(t, p, 3);
      CHECK(r.accuracy == doctest::Approx(100.0 * correct / 40.0).epsilon(1e-12));
      CHECK(r.macro_f1 == doctest::Approx(100.0 * f1_sum / 3.0).epsilon(1e-12));
      CHECK(r.macro_f1 <= 100.0);

      // Relabeling classes leaves the summary unchanged.
      const int perm[3] = {2, 0, 1};
      std::vector<int> t2, p2;
      for (std::size_t i = 0; i < t.size(); ++i) {
        t2.push_back(perm[t[i]]);
        p2.push_back(perm[p[i]]);
      }
      const auto r2 = compute_metrics(t2, p2, 3);
      CHECK(r2.accuracy == r.accuracy);
      CHECK(r2.macro_f1 == doctest::Approx(r.macro_f1).epsilon(1e-12));
    }
  }
}

TEST_CASE("training") {
  const auto train_set = separable_set(60, 1, 0.1);
  const auto val_set = separable_set(15, 2, 0.1);
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.batch_size = 8;
  cfg.epochs = 6;
  cfg.seed = 11;

  SUBCASE("loss decreases on separable data") {
    Model m = code_model(cfg.seed);
    const auto r = train(m, train_set, val_set, cfg);
    REQUIRE(r.history.size() >= 5);
    for (std::size_t e = 1; e < 5; ++e) CHECK(r.history[e].train_loss < r.history[e - 1].train_loss);
  }
  SUBCASE("equal seeds give identical histories") {
    cfg.epochs = 4;
    for (HeadKind kind : {HeadKind::fcn, HeadKind::cnn}) {
      Model a = code_model(cfg.seed, kind), b = code_model(cfg.seed, kind);
      const auto ra = train(a, train_set, val_set, cfg), rb = train(b, train_set, val_set, cfg);
      CHECK(ra.history == rb.history);
      CHECK(snapshot(a.params()) == snapshot(b.params()));
    }
  }
  SUBCASE("patience 0 stops after the first non-improving epoch") {
    cfg.patience = 0;
    cfg.epochs = 25;
    cfg.learning_rate = 1e-9;  // nothing improves after epoch 1
    Model m = code_model(cfg.seed);
    const auto r = train(m, train_set, val_set, cfg);
    CHECK(r.history.size() == 2);
    CHECK(r.best_epoch == 1);
    CHECK(r.stopped_early);
  }
  SUBCASE("best checkpoint is restored") {
    Model m = code_model(cfg.seed);
    const auto r = train(m, train_set, val_set, cfg);
    CHECK(evaluate(m, val_set).macro_f1 == r.best_val_macro_f1);
  }
  SUBCASE("divergence is reported") {
    Model m = code_model(cfg.seed);
    m.params().back().value[0] = std::nan("");
    CHECK_THROWS_AS(train(m, train_set, val_set, cfg), NumericalFailure);
  }
  SUBCASE("empty splits") {
    Model m = code_model(cfg.seed);
    CHECK_THROWS_AS(train(m, {}, val_set, cfg), InvalidInput);
    CHECK_THROWS_AS(evaluate(m, {}), InvalidInput);
  }
}
