#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "gocoma/binary_io.hpp"
#include "gocoma/pipeline.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace gocoma;

namespace {

// Record paths are stored relative to the manifest's directory.
void relativize(data::DatasetManifest& m, const fs::path& manifest_path) {
  const auto base = fs::absolute(manifest_path).parent_path();
  for (auto& p : m.record_paths) p = fs::relative(fs::absolute(p), base).generic_string();
}

void write_checkpoint(clf::Model& model, const fs::path& dir) {
  fs::create_directories(dir);
  clf::save_head(model.head(), dir / "head.clsf");
  nlohmann::json fusion = nlohmann::json::object();
  for (const auto& p : model.fusion().params())
    fusion[p.name] = std::vector<double>(p.value.begin(), p.value.end());
  io::write_text_atomic(dir / "fusion.json", fusion.dump(1) + "\n");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperbolic multimodal fusion experiments"};
  app.require_subcommand(1);

  // synth
  data::SynthConfig sc;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a hierarchical synthetic dataset");
  synth->add_option("--out", synth_out, "Output directory (records.embr + manifest.json)")->required();
  synth->add_option("--n", sc.n_samples);
  synth->add_option("--classes", sc.n_classes);
  synth->add_option("--t-code", sc.t_code);
  synth->add_option("--t-img", sc.t_img);
  synth->add_option("--d-code", sc.d_code);
  synth->add_option("--d-img", sc.d_img);
  synth->add_option("--depth", sc.hierarchy_depth);
  synth->add_option("--noise", sc.noise);
  synth->add_option("--latent-dim", sc.latent_dim);
  synth->add_option("--seed", sc.seed);

  // ingest
  std::vector<std::string> ingest_paths;
  std::vector<std::string> class_names;
  std::string ingest_out;
  auto* ingest = app.add_subcommand("ingest", "Validate EMBR0001 / JSON-lines records into a manifest");
  ingest->add_option("records", ingest_paths, "Record files")->required()->check(CLI::ExistingFile);
  ingest->add_option("--out", ingest_out, "Manifest path")->required();
  ingest->add_option("--classes", class_names, "Class names in label order")->delimiter(',');

  // split
  std::string split_manifest, split_mode = "official", split_map, split_out;
  std::uint64_t split_seed = 0;
  auto* split = app.add_subcommand("split", "Attach split assignments to a manifest");
  split->add_option("--manifest", split_manifest)->required()->check(CLI::ExistingFile);
  split->add_option("--mode", split_mode)->check(CLI::IsMember({"official", "stratified5cv"}));
  split->add_option("--seed", split_seed);
  split->add_option("--map", split_map, "id -> train/val/test mapping (official mode)")->check(CLI::ExistingFile);
  split->add_option("--out", split_out, "Output manifest (default: overwrite)");

  // train
  std::string fusion_name, config_path, train_manifest, train_out, history_path, checkpoint_dir;
  auto* train = app.add_subcommand("train", "Train and evaluate one fusion method");
  train->add_option("--fusion", fusion_name, "concat, xattn, mobius, gcsa, code or image")->required();
  train->add_option("--config", config_path, "JSON training/GCSA hyperparameters")->check(CLI::ExistingFile);
  train->add_option("--manifest", train_manifest)->required()->check(CLI::ExistingFile);
  train->add_option("--out", train_out, "Results JSON")->required();
  train->add_option("--history", history_path, "Per-epoch JSON lines");
  train->add_option("--checkpoint-dir", checkpoint_dir, "Save the trained model of a single run");

  // report
  std::vector<std::string> result_paths;
  bool report_as_json = false;
  auto* report = app.add_subcommand("report", "Compare result files");
  report->add_option("results", result_paths)->required()->check(CLI::ExistingFile);
  report->add_flag("--json", report_as_json);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) {
      const fs::path dir = synth_out;
      fs::create_directories(dir);
      const auto records = data::synth_generate(sc);
      data::write_records(dir / "records.embr", records);
      auto m = data::ingest_records(records);
      m.record_paths = {"records.embr"};
      data::save_manifest(m, dir / "manifest.json");
      std::cerr << "wrote " << m.ids.size() << " samples to " << (dir / "manifest.json").string() << "\n";
    } else if (*ingest) {
      std::vector<fs::path> paths(ingest_paths.begin(), ingest_paths.end());
      auto m = data::ingest(paths, class_names);
      relativize(m, ingest_out);
      data::save_manifest(m, ingest_out);
      std::cerr << "ingested " << m.ids.size() << " samples\n";
    } else if (*split) {
      auto m = data::load_manifest(split_manifest);
      const auto records = data::load_manifest_records(m, fs::path(split_manifest).parent_path());
      std::map<std::string, std::string> mapping;
      if (!split_map.empty()) mapping = data::read_split_mapping(split_map);
      const auto mode = data::parse_split_mode(split_mode);
      auto assignment = data::make_splits(m, mode, split_seed, split_map.empty() ? nullptr : &mapping);
      data::apply_splits(m, std::move(assignment), records);
      const fs::path out = split_out.empty() ? fs::path(split_manifest) : fs::path(split_out);
      if (!split_out.empty()) {
        // Keep record paths valid from the new location.
        for (auto& p : m.record_paths)
          if (fs::path(p).is_relative()) p = (fs::path(split_manifest).parent_path() / p).string();
        relativize(m, out);
      }
      data::save_manifest(m, out);
    } else if (*train) {
      auto cfg = config_path.empty() ? pipeline::ExperimentConfig{} : pipeline::load_config(config_path);
      pipeline::apply_env_overrides(cfg);
      const auto fusion = parse_fusion(fusion_name);
      const auto ds = data::load_dataset(train_manifest);
      std::string history;
      const auto on_epoch = [&](std::optional<std::size_t> fold, const clf::EpochRecord& e) {
        nlohmann::json j{{"epoch", e.epoch},
                         {"train_loss", e.train_loss},
                         {"val_acc", e.val_acc},
                         {"val_macro_f1", e.val_macro_f1}};
        if (fold) j["fold"] = *fold;
        history += j.dump() + "\n";
        std::cerr << (fold ? "fold " + std::to_string(*fold) + " " : "") << "epoch " << e.epoch << " loss "
                  << e.train_loss << " val macro-F1 " << e.val_macro_f1 << "\n";
      };
      std::unique_ptr<clf::Model> model;
      const auto result = pipeline::run_experiment(ds, fusion, cfg, on_epoch, checkpoint_dir.empty() ? nullptr : &model);
      pipeline::save_result(result, train_out);
      if (!history_path.empty()) io::write_text_atomic(history_path, history);
      if (!checkpoint_dir.empty()) {
        if (result.runs.size() != 1)
          std::cerr << "checkpoint holds the last of " << result.runs.size() << " runs\n";
        write_checkpoint(*model, checkpoint_dir);
      }
      std::cout << pipeline::report_text(pipeline::make_report({result}));
    } else if (*report) {
      std::vector<pipeline::ExperimentResult> results;
      for (const auto& p : result_paths) results.push_back(pipeline::load_result(p));
      const auto rows = pipeline::make_report(results);
      std::cout << (report_as_json ? pipeline::report_json(rows) + "\n" : pipeline::report_text(rows));
    }
  } catch (const std::exception& e) {
    std::cerr << "gocoma: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
