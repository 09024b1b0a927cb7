#include "gocoma/pipeline.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <set>
#include <sstream>

#include "gocoma/binary_io.hpp"
#include "gocoma/errors.hpp"
#include "json.hpp"

namespace gocoma::pipeline {

using nlohmann::json;

namespace {

const char* head_choice_name(HeadChoice h) {
  switch (h) {
    case HeadChoice::automatic: return "auto";
    case HeadChoice::fcn: return "fcn";
    case HeadChoice::cnn: return "cnn";
  }
  return "?";
}

HeadChoice parse_head_choice(const std::string& s) {
  if (s == "auto") return HeadChoice::automatic;
  if (s == "fcn") return HeadChoice::fcn;
  if (s == "cnn") return HeadChoice::cnn;
  throw InvalidInput("config: head must be auto, fcn or cnn");
}

json config_json(const ExperimentConfig& c) {
  return json{{"epochs", c.train.epochs},
              {"learning_rate", c.train.learning_rate},
              {"batch_size", c.train.batch_size},
              {"dropout", c.train.dropout},
              {"patience", c.train.patience},
              {"seed", c.train.seed},
              {"beta1", c.train.beta1},
              {"beta2", c.train.beta2},
              {"eps", c.train.eps},
              {"d_model", c.gcsa.d_model},
              {"curvature", c.gcsa.curvature},
              {"lambda_init", c.gcsa.lambda_init},
              {"softmax_scores", c.gcsa.softmax_scores},
              {"symmetric_values", c.gcsa.symmetric_values},
              {"head", head_choice_name(c.head)},
              {"fcn_hidden", c.fcn_hidden},
              {"fold", c.fold ? json(*c.fold) : json(nullptr)}};
}

ExperimentConfig config_of(const json& j) {
  if (!j.is_object()) throw InvalidInput("config: expected a JSON object");
  ExperimentConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "epochs") c.train.epochs = v.get<std::size_t>();
    else if (key == "learning_rate") c.train.learning_rate = v.get<double>();
    else if (key == "batch_size") c.train.batch_size = v.get<std::size_t>();
    else if (key == "dropout") c.train.dropout = v.get<double>();
    else if (key == "patience") c.train.patience = v.get<std::size_t>();
    else if (key == "seed") c.train.seed = v.get<std::uint64_t>();
    else if (key == "beta1") c.train.beta1 = v.get<double>();
    else if (key == "beta2") c.train.beta2 = v.get<double>();
    else if (key == "eps") c.train.eps = v.get<double>();
    else if (key == "d_model") c.gcsa.d_model = v.get<std::size_t>();
    else if (key == "curvature") c.gcsa.curvature = v.get<double>();
    else if (key == "lambda_init") c.gcsa.lambda_init = v.get<double>();
    else if (key == "softmax_scores") c.gcsa.softmax_scores = v.get<bool>();
    else if (key == "symmetric_values") c.gcsa.symmetric_values = v.get<bool>();
    else if (key == "head") c.head = parse_head_choice(v.get<std::string>());
    else if (key == "fcn_hidden") c.fcn_hidden = v.get<std::size_t>();
    else if (key == "fold") c.fold = v.is_null() ? std::nullopt : std::optional<std::size_t>(v.get<std::size_t>());
    else throw InvalidInput("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

json metrics_json(const clf::MetricsReport& m) {
  json per_class = json::array();
  for (const auto& c : m.per_class)
    per_class.push_back({{"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}, {"support", c.support}});
  return json{{"accuracy", m.accuracy}, {"macro_f1", m.macro_f1}, {"n", m.n}, {"per_class", per_class},
              {"confusion", m.confusion}};
}

clf::MetricsReport metrics_of(const json& j) {
  clf::MetricsReport m;
  m.accuracy = j.at("accuracy").get<double>();
  m.macro_f1 = j.at("macro_f1").get<double>();
  m.n = j.at("n").get<std::size_t>();
  for (const auto& c : j.at("per_class"))
    m.per_class.push_back({c.at("precision").get<double>(), c.at("recall").get<double>(), c.at("f1").get<double>(),
                           c.at("support").get<std::size_t>()});
  m.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
  return m;
}

json summary_json(const Summary& s) {
  return json{{"accuracy_mean", s.accuracy_mean}, {"accuracy_std", s.accuracy_std},
              {"macro_f1_mean", s.macro_f1_mean}, {"macro_f1_std", s.macro_f1_std}};
}

Summary summary_of(const json& j) {
  return {j.at("accuracy_mean").get<double>(), j.at("accuracy_std").get<double>(),
          j.at("macro_f1_mean").get<double>(), j.at("macro_f1_std").get<double>()};
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return {bytes.begin(), bytes.end()};
}

}  // namespace

void ExperimentConfig::validate() const {
  train.validate();
  if (gcsa.d_model == 0) throw InvalidInput("config: d_model must be positive");
  if (!(gcsa.curvature > 0.0) || !std::isfinite(gcsa.curvature)) throw InvalidInput("config: curvature must be positive");
  if (!std::isfinite(gcsa.lambda_init)) throw InvalidInput("config: lambda_init must be finite");
  if (fold && *fold >= data::kFolds) throw InvalidInput("config: fold must be below 5");
}

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(1) + "\n"; }

ExperimentConfig config_from_json(const std::string& text) {
  try {
    return config_of(json::parse(text));
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
}

ExperimentConfig load_config(const std::filesystem::path& path) { return config_from_json(read_text(path)); }

void apply_env_overrides(ExperimentConfig& cfg) {
  const char* seed = std::getenv("GOCOMA_SEED");
  if (seed == nullptr || *seed == '\0') return;
  char* end = nullptr;
  errno = 0;
  const unsigned long long v = std::strtoull(seed, &end, 10);
  if (errno != 0 || *end != '\0' || seed[0] == '-') throw InvalidInput("GOCOMA_SEED must be a non-negative integer");
  cfg.train.seed = v;
}

clf::HeadKind resolve_head(HeadChoice choice, FusionKind fusion) {
  if (choice == HeadChoice::fcn) return clf::HeadKind::fcn;
  if (choice == HeadChoice::cnn) return clf::HeadKind::cnn;
  return fusion == FusionKind::code || fusion == FusionKind::image ? clf::HeadKind::cnn : clf::HeadKind::fcn;
}

clf::Model build_model(FusionKind fusion, const data::DatasetManifest& m, const ExperimentConfig& cfg) {
  FusionSpec spec;
  spec.kind = fusion;
  spec.d_code = m.d_code;
  spec.d_img = m.d_img;
  spec.t_code = m.t_code;
  spec.t_img = m.t_img;
  spec.gcsa = cfg.gcsa;
  if (fusion != FusionKind::gcsa && fusion != FusionKind::xattn && (m.t_code == 0 || m.t_img == 0))
    throw InvalidInput("fusion '" + std::string(to_string(fusion)) + "' needs a fixed token count per modality");
  if (spec.t_code == 0) spec.t_code = 1;
  if (spec.t_img == 0) spec.t_img = 1;

  Rng init = Rng::substream(cfg.train.seed, clf::kInitStream);
  auto layer = make_fusion(spec, init);
  clf::HeadConfig hc;
  hc.hidden = cfg.fcn_hidden ? cfg.fcn_hidden : cfg.gcsa.d_model;
  hc.dropout = cfg.train.dropout;
  auto head = clf::make_head(resolve_head(cfg.head, fusion), layer->output_dim(), m.n_classes(), hc, init);
  return clf::Model(std::move(layer), std::move(head));
}

Summary summarize(const std::vector<double>& accuracy, const std::vector<double>& macro_f1) {
  const auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = sd = 0.0;
    if (v.empty()) return;
    for (double x : v) mean += x;
    mean /= double(v.size());
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / double(v.size()));
  };
  Summary s;
  stats(accuracy, s.accuracy_mean, s.accuracy_std);
  stats(macro_f1, s.macro_f1_mean, s.macro_f1_std);
  return s;
}

ExperimentResult run_experiment(const data::Dataset& ds, FusionKind fusion, const ExperimentConfig& cfg,
                                const EpochHook& on_epoch) {
  return run_experiment(ds, fusion, cfg, on_epoch, nullptr);
}

ExperimentResult run_experiment(const data::Dataset& ds, FusionKind fusion, const ExperimentConfig& cfg,
                                const EpochHook& on_epoch, std::unique_ptr<clf::Model>* last_model) {
  cfg.validate();
  const auto& m = ds.manifest;
  if (!m.splits) throw InvalidInput("run_experiment: the manifest has no splits; run the split step first");
  const auto& s = *m.splits;

  ExperimentResult result;
  result.fusion = fusion;
  result.head = resolve_head(cfg.head, fusion);
  result.config = cfg;
  result.split_mode = s.mode;
  result.split_seed = s.seed;
  result.n_samples = m.ids.size();
  result.n_classes = m.n_classes();

  struct Plan {
    std::optional<std::size_t> fold;
    std::vector<std::string> train, val;
  };
  std::vector<Plan> plans;
  if (s.mode == data::SplitMode::official) {
    plans.push_back({std::nullopt, s.train, s.val});
  } else {
    for (std::size_t k = 0; k < s.folds.size(); ++k) {
      if (cfg.fold && *cfg.fold != k) continue;
      Plan p{k, {}, s.folds[k]};
      for (std::size_t o = 0; o < s.folds.size(); ++o)
        if (o != k) p.train.insert(p.train.end(), s.folds[o].begin(), s.folds[o].end());
      plans.push_back(std::move(p));
    }
  }

  const auto test = ds.select(s.test);
  std::vector<double> acc, f1;
  for (const auto& plan : plans) {
    const auto train_set = ds.select(plan.train);
    const auto val_set = ds.select(plan.val);
    auto model = std::make_unique<clf::Model>(build_model(fusion, m, cfg));
    RunResult run;
    run.fold = plan.fold;
    run.training = clf::train(*model, train_set, val_set, cfg.train, [&](const clf::EpochRecord& e) {
      if (on_epoch) on_epoch(plan.fold, e);
    });
    run.train = clf::evaluate(*model, train_set);
    run.val = clf::evaluate(*model, val_set);
    run.test = clf::evaluate(*model, test);
    acc.push_back(run.test.accuracy);
    f1.push_back(run.test.macro_f1);
    result.runs.push_back(std::move(run));
    if (last_model) *last_model = std::move(model);
  }
  result.test = summarize(acc, f1);
  return result;
}

std::string result_to_json(const ExperimentResult& r) {
  json runs = json::array();
  for (const auto& run : r.runs) {
    json history = json::array();
    for (const auto& e : run.training.history)
      history.push_back({{"epoch", e.epoch},
                         {"train_loss", e.train_loss},
                         {"val_acc", e.val_acc},
                         {"val_macro_f1", e.val_macro_f1}});
    runs.push_back({{"fold", run.fold ? json(*run.fold) : json(nullptr)},
                    {"best_epoch", run.training.best_epoch},
                    {"best_val_macro_f1", run.training.best_val_macro_f1},
                    {"stopped_early", run.training.stopped_early},
                    {"history", history},
                    {"train", metrics_json(run.train)},
                    {"val", metrics_json(run.val)},
                    {"test", metrics_json(run.test)}});
  }
  const json j{{"format", "gocoma-result-1"},
               {"fusion", to_string(r.fusion)},
               {"head", clf::to_string(r.head)},
               {"config", config_json(r.config)},
               {"dataset",
                {{"split_mode", data::to_string(r.split_mode)},
                 {"split_seed", r.split_seed},
                 {"n_samples", r.n_samples},
                 {"n_classes", r.n_classes}}},
               {"runs", runs},
               {"test", summary_json(r.test)}};
  return j.dump(1) + "\n";
}

ExperimentResult result_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != "gocoma-result-1") throw InvalidInput("result: unsupported format");
    ExperimentResult r;
    r.fusion = parse_fusion(j.at("fusion").get<std::string>());
    r.head = clf::parse_head(j.at("head").get<std::string>());
    r.config = config_of(j.at("config"));
    const auto& d = j.at("dataset");
    r.split_mode = data::parse_split_mode(d.at("split_mode").get<std::string>());
    r.split_seed = d.at("split_seed").get<std::uint64_t>();
    r.n_samples = d.at("n_samples").get<std::size_t>();
    r.n_classes = d.at("n_classes").get<std::size_t>();
    for (const auto& rj : j.at("runs")) {
      RunResult run;
      if (!rj.at("fold").is_null()) run.fold = rj["fold"].get<std::size_t>();
      run.training.best_epoch = rj.at("best_epoch").get<std::size_t>();
      run.training.best_val_macro_f1 = rj.at("best_val_macro_f1").get<double>();
      run.training.stopped_early = rj.at("stopped_early").get<bool>();
      for (const auto& e : rj.at("history"))
        run.training.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                                        e.at("val_acc").get<double>(), e.at("val_macro_f1").get<double>()});
      run.train = metrics_of(rj.at("train"));
      run.val = metrics_of(rj.at("val"));
      run.test = metrics_of(rj.at("test"));
      r.runs.push_back(std::move(run));
    }
    r.test = summary_of(j.at("test"));
    return r;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("result: ") + e.what());
  }
}

void save_result(const ExperimentResult& r, const std::filesystem::path& path) {
  io::write_text_atomic(path, result_to_json(r));
}

ExperimentResult load_result(const std::filesystem::path& path) { return result_from_json(read_text(path)); }

std::vector<ReportRow> make_report(const std::vector<ExperimentResult>& results) {
  if (results.empty()) throw InvalidInput("report: no result files");
  const auto& ref = results.front();
  const json ref_cfg = config_json(ref.config);
  std::set<FusionKind> seen;
  for (const auto& r : results) {
    if (const json cfg = config_json(r.config); cfg != ref_cfg) {
      std::string keys;
      for (const auto& [k, v] : cfg.items())
        if (!ref_cfg.contains(k) || ref_cfg.at(k) != v) keys += (keys.empty() ? "" : ", ") + k;
      for (const auto& [k, v] : ref_cfg.items())
        if (!cfg.contains(k)) keys += (keys.empty() ? "" : ", ") + k;
      throw InvalidInput("report: results were produced with different configs (" + std::string(to_string(r.fusion)) +
                         " vs " + std::string(to_string(ref.fusion)) + " differ in " + keys + ")");
    }
    if (r.split_mode != ref.split_mode || r.split_seed != ref.split_seed || r.n_samples != ref.n_samples ||
        r.n_classes != ref.n_classes)
      throw InvalidInput("report: results come from different datasets or splits");
    if (!seen.insert(r.fusion).second)
      throw InvalidInput("report: duplicate results for method '" + std::string(to_string(r.fusion)) + "'");
  }
  std::vector<ReportRow> rows;
  for (FusionKind k : all_fusions())
    for (const auto& r : results)
      if (r.fusion == k) rows.push_back({k, r.head, r.runs.size(), r.test});
  return rows;
}

std::string report_text(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2);
  out << std::left << std::setw(10) << "method" << std::setw(6) << "head" << std::setw(6) << "runs" << std::setw(18)
      << "accuracy" << "macro_f1\n";
  for (const auto& r : rows) {
    std::ostringstream acc, f1;
    acc << std::fixed << std::setprecision(2) << r.test.accuracy_mean << " +- " << r.test.accuracy_std;
    f1 << std::fixed << std::setprecision(2) << r.test.macro_f1_mean << " +- " << r.test.macro_f1_std;
    out << std::setw(10) << to_string(r.fusion) << std::setw(6) << clf::to_string(r.head) << std::setw(6) << r.runs
        << std::setw(18) << acc.str() << f1.str() << "\n";
  }
  return out.str();
}

std::string report_json(const std::vector<ReportRow>& rows) {
  json arr = json::array();
  for (const auto& r : rows) {
    json row = summary_json(r.test);
    row["method"] = to_string(r.fusion);
    row["head"] = clf::to_string(r.head);
    row["runs"] = r.runs;
    arr.push_back(row);
  }
  return json{{"rows", arr}}.dump(1) + "\n";
}

}  // namespace gocoma::pipeline
