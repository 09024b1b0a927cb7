#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "gocoma/errors.hpp"
#include "gocoma/pipeline.hpp"

using namespace gocoma;
using namespace gocoma::pipeline;

namespace {

data::Dataset synth_dataset(std::size_t n, std::size_t depth, double noise, data::SplitMode mode, std::uint64_t seed) {
  data::SynthConfig sc;
  sc.n_samples = n;
  sc.n_classes = 4;
  sc.t_code = sc.t_img = 1;
  sc.hierarchy_depth = depth;
  sc.noise = noise;
  sc.seed = seed;
  const auto recs = data::synth_generate(sc);
  auto m = data::ingest_records(recs);
  data::apply_splits(m, data::make_splits(m, mode, seed), recs);
  return data::build_dataset(m, recs);
}

ExperimentConfig small_config() {
  ExperimentConfig c;
  c.train.learning_rate = 1e-3;
  c.train.epochs = 6;
  c.train.seed = 3;
  c.gcsa.d_model = 8;
  return c;
}

}  // namespace

TEST_CASE("config files") {
  ExperimentConfig c = small_config();
  c.head = HeadChoice::fcn;
  c.fold = 2;
  c.gcsa.symmetric_values = true;
  const auto text = config_to_json(c);
  CHECK(config_to_json(config_from_json(text)) == text);
  CHECK(config_from_json(R"({"epochs": 3})").train.learning_rate == 5e-6);
  CHECK_THROWS_AS(config_from_json(R"({"epoch": 3})"), InvalidInput);
  CHECK_THROWS_AS(config_from_json(R"({"learning_rate": -1})"), InvalidInput);
  CHECK_THROWS_AS(config_from_json(R"({"fold": 5})"), InvalidInput);

  ::setenv("GOCOMA_SEED", "77", 1);
  apply_env_overrides(c);
  CHECK(c.train.seed == 77);
  ::setenv("GOCOMA_SEED", "x1", 1);
  CHECK_THROWS_AS(apply_env_overrides(c), InvalidInput);
  ::unsetenv("GOCOMA_SEED");
}

TEST_CASE("head selection") {
  CHECK(resolve_head(HeadChoice::automatic, FusionKind::code) == clf::HeadKind::cnn);
  CHECK(resolve_head(HeadChoice::automatic, FusionKind::image) == clf::HeadKind::cnn);
  CHECK(resolve_head(HeadChoice::automatic, FusionKind::gcsa) == clf::HeadKind::fcn);
  CHECK(resolve_head(HeadChoice::fcn, FusionKind::code) == clf::HeadKind::fcn);
}

TEST_CASE("batch order is independent of the model") {
  const auto ds = synth_dataset(80, 2, 0.5, data::SplitMode::official, 1);
  const auto train = ds.select(ds.manifest.splits->train);
  auto shuffled = train;
  std::reverse(shuffled.begin(), shuffled.end());
  clf::DataOrder a(train, 9), b(shuffled, 9);
  for (int e = 0; e < 3; ++e) {
    const auto oa = a.next_epoch(), ob = b.next_epoch();
    for (std::size_t i = 0; i < oa.size(); ++i) CHECK(train[oa[i]].id == shuffled[ob[i]].id);
  }
}

TEST_CASE("experiments") {
  SUBCASE("official split: deterministic, re-parsable") {
    const auto ds = synth_dataset(160, 2, 0.5, data::SplitMode::official, 2);
    for (FusionKind k : all_fusions()) {
      const auto r1 = run_experiment(ds, k, small_config());
      const auto r2 = run_experiment(ds, k, small_config());
      CHECK(result_to_json(r1) == result_to_json(r2));
      CHECK(result_to_json(result_from_json(result_to_json(r1))) == result_to_json(r1));
      CHECK(result_from_json(result_to_json(r1)).test.macro_f1_mean == r1.test.macro_f1_mean);
      CHECK(r1.runs.size() == 1);
      CHECK(r1.runs[0].test.n == ds.manifest.splits->test.size());
    }
  }
  SUBCASE("five folds") {
    const auto ds = synth_dataset(120, 2, 0.5, data::SplitMode::stratified5cv, 4);
    auto cfg = small_config();
    cfg.train.epochs = 2;
    std::size_t epochs_seen = 0;
    const auto r = run_experiment(ds, FusionKind::concat, cfg, [&](auto, const auto&) { ++epochs_seen; });
    REQUIRE(r.runs.size() == 5);
    CHECK(epochs_seen >= 5);
    std::vector<double> acc, f1;
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(*r.runs[k].fold == k);
      CHECK(r.runs[k].val.n == ds.manifest.splits->folds[k].size());
      acc.push_back(r.runs[k].test.accuracy);
      f1.push_back(r.runs[k].test.macro_f1);
    }
    double mean = 0.0, var = 0.0;
    for (double v : f1) mean += v / 5.0;
    for (double v : f1) var += (v - mean) * (v - mean) / 5.0;
    CHECK(r.test.macro_f1_mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(r.test.macro_f1_std == doctest::Approx(std::sqrt(var)).epsilon(1e-12));

    cfg.fold = 3;
    const auto single = run_experiment(ds, FusionKind::concat, cfg);
    REQUIRE(single.runs.size() == 1);
    CHECK(result_to_json(single).find("\"fold\": 3") != std::string::npos);
  }
  SUBCASE("unimodal code head fits separable data") {
    const auto ds = synth_dataset(400, 1, 0.0, data::SplitMode::official, 5);
    auto cfg = small_config();
    cfg.train.epochs = 25;
    cfg.gcsa.d_model = 16;
    const auto r = run_experiment(ds, FusionKind::code, cfg);
    CHECK(r.head == clf::HeadKind::cnn);
    CHECK(r.runs[0].train.accuracy >= 99.0);
  }
  SUBCASE("missing splits") {
    auto ds = synth_dataset(40, 1, 0.0, data::SplitMode::official, 5);
    ds.manifest.splits.reset();
    CHECK_THROWS_AS(run_experiment(ds, FusionKind::gcsa, small_config()), InvalidInput);
  }
}

TEST_CASE("report") {
  const auto ds = synth_dataset(100, 2, 0.5, data::SplitMode::official, 6);
  auto cfg = small_config();
  cfg.train.epochs = 2;
  const auto gcsa = run_experiment(ds, FusionKind::gcsa, cfg);
  const auto concat = run_experiment(ds, FusionKind::concat, cfg);

  const auto one = make_report({gcsa});
  REQUIRE(one.size() == 1);
  CHECK(one[0].test.macro_f1_mean == gcsa.test.macro_f1_mean);

  const auto rows = make_report({gcsa, concat});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].fusion == FusionKind::concat);  // fixed order, not input order
  CHECK(rows[1].fusion == FusionKind::gcsa);
  const auto json_text = report_json(rows);
  const auto text = report_text(rows);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", rows[1].test.macro_f1_mean);
  CHECK(text.find(buf) != std::string::npos);
  CHECK(json_text.find("\"method\": \"gcsa\"") != std::string::npos);

  auto other = concat;
  other.config.train.learning_rate = 0.5;
  other.fusion = FusionKind::xattn;
  CHECK_THROWS_AS(make_report({gcsa, other}), InvalidInput);
  CHECK_THROWS_AS(make_report({gcsa, gcsa}), InvalidInput);
  CHECK_THROWS_AS(make_report({}), InvalidInput);
}
