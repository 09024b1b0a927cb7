#pragma once

// Embedding records, dataset manifests, splits and the synthetic
// hierarchical generator.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gocoma/sample.hpp"

namespace gocoma::data {

enum class Modality : std::uint8_t { code = 0, image = 1 };

// One modality's tokens for one sample. data is T x d, row-major.
struct EmbeddingRecord {
  std::string id;
  std::int32_t label = 0;
  Modality modality = Modality::code;
  std::uint32_t t = 0, d = 0;
  std::vector<float> data;
  bool operator==(const EmbeddingRecord&) const = default;
};

// "EMBR0001", u64 record count, then per record:
// u32 id length, id bytes, i32 label, u8 modality, u32 T, u32 d, T*d f32.
// All integers and floats little-endian.
std::vector<std::uint8_t> encode_records(const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> decode_records(std::span<const std::uint8_t> bytes);
void write_records(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records);
std::vector<EmbeddingRecord> read_records(const std::filesystem::path& path);
// One JSON object per line: {"id", "label", "modality", "tokens": [[...], ...]}.
std::vector<EmbeddingRecord> read_jsonl_records(const std::filesystem::path& path);

enum class SplitMode { official, stratified5cv };
std::string to_string(SplitMode mode);
SplitMode parse_split_mode(const std::string& name);

struct SplitAssignment {
  SplitMode mode = SplitMode::official;
  std::uint64_t seed = 0;
  // official: train / val / test. stratified5cv: folds partition the 80%
  // portion, test holds the rest; train and val stay empty.
  std::vector<std::string> train, val, test;
  std::vector<std::vector<std::string>> folds;
};

struct Prescale {
  double code = 1.0, image = 1.0;
};

struct DatasetManifest {
  std::vector<std::string> record_paths;
  std::vector<std::string> class_names;
  std::vector<std::string> ids;          // sorted
  std::map<std::string, int> labels;     // id -> label
  std::size_t t_code = 0, t_img = 0;     // 0 when token counts vary
  std::size_t d_code = 0, d_img = 0;
  std::optional<Prescale> prescale;      // set once splits exist
  std::optional<SplitAssignment> splits;

  std::size_t n_classes() const { return class_names.size(); }
  // Ids whose tokens feed the pre-scale statistic.
  std::vector<std::string> training_ids() const;
};

std::string manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const std::string& text);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Validates pairing, uniqueness and dimensions. Record paths are stored as
// given (relative paths resolve against the manifest's directory on load).
DatasetManifest ingest(const std::vector<std::filesystem::path>& paths,
                       const std::vector<std::string>& class_names = {});
DatasetManifest ingest_records(const std::vector<EmbeddingRecord>& records,
                               const std::vector<std::string>& class_names = {});

// Per modality: 1 + max token norm over the given ids.
Prescale compute_prescale(const std::vector<EmbeddingRecord>& records, const std::vector<std::string>& ids);

// official: uses `mapping` (id -> train/val/test) when given, otherwise a
// stratified random 80/10/10. stratified5cv: stratified 80/20, then 5 folds.
SplitAssignment make_splits(const DatasetManifest& m, SplitMode mode, std::uint64_t seed,
                            const std::map<std::string, std::string>* mapping = nullptr);
// Accepts a JSON object {id: split} or lines "id,split".
std::map<std::string, std::string> read_split_mapping(const std::filesystem::path& path);
// Attaches splits and recomputes the pre-scale statistic from training ids.
void apply_splits(DatasetManifest& m, SplitAssignment splits, const std::vector<EmbeddingRecord>& records);

inline constexpr std::size_t kFolds = 5;

// Paired samples, pre-scaled, keyed by id.
struct Dataset {
  DatasetManifest manifest;
  std::map<std::string, Sample> samples;
  std::vector<Sample> select(const std::vector<std::string>& ids) const;
};

std::vector<EmbeddingRecord> load_manifest_records(const DatasetManifest& m, const std::filesystem::path& base_dir);
Dataset build_dataset(const DatasetManifest& m, const std::vector<EmbeddingRecord>& records);
Dataset load_dataset(const std::filesystem::path& manifest_path);

struct SynthConfig {
  std::size_t n_samples = 2000;
  std::size_t n_classes = 4;
  std::size_t t_code = 2, t_img = 2;
  std::size_t d_code = 16, d_img = 12;
  std::size_t hierarchy_depth = 3;
  double noise = 0.5;
  std::uint64_t seed = 0;
  std::size_t latent_dim = 8;
  void validate() const;
};

// Classes are the leaves of a random tree of the given depth. Each node has
// a latent prototype; code tokens are noisy affine images of the sum of the
// coarse (prefix) prototypes along the class's path, image tokens of the
// fine (suffix) ones.
std::vector<EmbeddingRecord> synth_generate(const SynthConfig& cfg);

}  // namespace gocoma::data
