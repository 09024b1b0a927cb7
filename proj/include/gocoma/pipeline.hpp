#pragma once

// Experiment runner and result reporting.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gocoma/classifier.hpp"
#include "gocoma/dataset.hpp"
#include "gocoma/fusion_layers.hpp"

namespace gocoma::pipeline {

enum class HeadChoice { automatic, fcn, cnn };

struct ExperimentConfig {
  clf::TrainConfig train;
  gcsa::GcsaConfig gcsa;
  // automatic: CNN for unimodal runs, FCN after any fusion.
  HeadChoice head = HeadChoice::automatic;
  std::size_t fcn_hidden = 0;  // 0 means d_model
  // stratified5cv only: run a single fold instead of all five.
  std::optional<std::size_t> fold;

  void validate() const;
};

// Flat JSON object; unknown keys are rejected.
std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
// GOCOMA_SEED, when set, replaces the training seed.
void apply_env_overrides(ExperimentConfig& cfg);

clf::HeadKind resolve_head(HeadChoice choice, FusionKind fusion);
clf::Model build_model(FusionKind fusion, const data::DatasetManifest& m, const ExperimentConfig& cfg);

struct RunResult {
  std::optional<std::size_t> fold;
  clf::TrainResult training;
  clf::MetricsReport train, val, test;
};

struct Summary {
  double accuracy_mean = 0, accuracy_std = 0, macro_f1_mean = 0, macro_f1_std = 0;
};

struct ExperimentResult {
  FusionKind fusion = FusionKind::gcsa;
  clf::HeadKind head = clf::HeadKind::fcn;
  ExperimentConfig config;
  data::SplitMode split_mode = data::SplitMode::official;
  std::uint64_t split_seed = 0;
  std::size_t n_samples = 0, n_classes = 0;
  std::vector<RunResult> runs;
  Summary test;  // mean and population std over runs
};

using EpochHook = std::function<void(std::optional<std::size_t> fold, const clf::EpochRecord&)>;

// official: one run (train / val / test). stratified5cv: one run per fold,
// validating on that fold and testing on the held-out 20%.
ExperimentResult run_experiment(const data::Dataset& ds, FusionKind fusion, const ExperimentConfig& cfg,
                                const EpochHook& on_epoch = {});
// The trained model of a single run, for checkpointing.
ExperimentResult run_experiment(const data::Dataset& ds, FusionKind fusion, const ExperimentConfig& cfg,
                                const EpochHook& on_epoch, std::unique_ptr<clf::Model>* last_model);

Summary summarize(const std::vector<double>& accuracy, const std::vector<double>& macro_f1);

std::string result_to_json(const ExperimentResult& r);
ExperimentResult result_from_json(const std::string& text);
void save_result(const ExperimentResult& r, const std::filesystem::path& path);
ExperimentResult load_result(const std::filesystem::path& path);

struct ReportRow {
  FusionKind fusion;
  clf::HeadKind head;
  std::size_t runs = 0;
  Summary test;
};

// One row per method in fixed order; results with differing configs or
// datasets cannot share a table.
std::vector<ReportRow> make_report(const std::vector<ExperimentResult>& results);
std::string report_text(const std::vector<ReportRow>& rows);
std::string report_json(const std::vector<ReportRow>& rows);

}  // namespace gocoma::pipeline
