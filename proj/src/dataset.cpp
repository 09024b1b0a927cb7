#include "gocoma/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "gocoma/binary_io.hpp"
#include "gocoma/errors.hpp"
#include "gocoma/rng.hpp"
#include "json.hpp"

namespace gocoma::data {

using nlohmann::json;

namespace {

constexpr std::string_view kMagic = "EMBR0001";
constexpr std::string_view kManifestFormat = "gocoma-manifest-1";

const char* modality_name(Modality m) { return m == Modality::code ? "code" : "image"; }

Modality parse_modality(const std::string& s) {
  if (s == "code") return Modality::code;
  if (s == "image") return Modality::image;
  throw InvalidInput("unknown modality '" + s + "'");
}

double token_norm(const EmbeddingRecord& r, std::size_t t) {
  double s = 0.0;
  for (std::size_t j = 0; j < r.d; ++j) {
    const double v = r.data[t * r.d + j];
    s += v * v;
  }
  return std::sqrt(s);
}

json splits_to_json(const SplitAssignment& s) {
  json j{{"mode", to_string(s.mode)}, {"seed", s.seed}, {"train", s.train}, {"val", s.val}, {"test", s.test},
         {"folds", s.folds}};
  return j;
}

SplitAssignment splits_from_json(const json& j) {
  SplitAssignment s;
  s.mode = parse_split_mode(j.at("mode").get<std::string>());
  s.seed = j.at("seed").get<std::uint64_t>();
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  s.folds = j.at("folds").get<std::vector<std::vector<std::string>>>();
  return s;
}

std::vector<std::vector<std::string>> ids_by_class(const DatasetManifest& m) {
  std::vector<std::vector<std::string>> out(m.n_classes());
  for (const auto& id : m.ids) out[std::size_t(m.labels.at(id))].push_back(id);
  return out;
}

std::size_t rounded(double x) { return static_cast<std::size_t>(std::llround(x)); }

}  // namespace

// --- wire format ---

std::vector<std::uint8_t> encode_records(const std::vector<EmbeddingRecord>& records) {
  io::ByteWriter w;
  w.put_string(kMagic);
  w.put_u64(records.size());
  for (const auto& r : records) {
    if (r.data.size() != std::size_t(r.t) * r.d) throw InvalidInput("record '" + r.id + "': payload size != T*d");
    w.put_u32(static_cast<std::uint32_t>(r.id.size()));
    w.put_string(r.id);
    w.put_i32(r.label);
    w.put_u8(static_cast<std::uint8_t>(r.modality));
    w.put_u32(r.t);
    w.put_u32(r.d);
    for (float v : r.data) w.put_f32(v);
  }
  return w.bytes();
}

std::vector<EmbeddingRecord> decode_records(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < kMagic.size() || r.take_string(kMagic.size()) != kMagic)
    throw InvalidInput("embedding file: bad magic (expected EMBR0001)");
  const std::uint64_t n = r.take_u64();
  std::vector<EmbeddingRecord> out;
  for (std::uint64_t i = 0; i < n; ++i) {
    EmbeddingRecord rec;
    rec.id = r.take_string(r.take_u32());
    rec.label = r.take_i32();
    const std::uint8_t m = r.take_u8();
    if (m > 1) throw InvalidInput("record '" + rec.id + "': bad modality byte");
    rec.modality = static_cast<Modality>(m);
    rec.t = r.take_u32();
    rec.d = r.take_u32();
    const std::uint64_t count = std::uint64_t(rec.t) * rec.d;
    if (count * 4 > r.remaining()) throw InvalidInput("record '" + rec.id + "': truncated payload");
    rec.data.resize(count);
    for (float& v : rec.data) v = r.take_f32();
    out.push_back(std::move(rec));
  }
  if (r.remaining() != 0) throw InvalidInput("embedding file: trailing bytes after last record");
  return out;
}

void write_records(const std::filesystem::path& path, const std::vector<EmbeddingRecord>& records) {
  io::write_file_atomic(path, encode_records(records));
}

std::vector<EmbeddingRecord> read_records(const std::filesystem::path& path) {
  return decode_records(io::read_file(path));
}

std::vector<EmbeddingRecord> read_jsonl_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<EmbeddingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      EmbeddingRecord r;
      r.id = j.at("id").get<std::string>();
      r.label = j.at("label").get<std::int32_t>();
      r.modality = parse_modality(j.at("modality").get<std::string>());
      const auto tokens = j.at("tokens").get<std::vector<std::vector<double>>>();
      r.t = static_cast<std::uint32_t>(tokens.size());
      r.d = tokens.empty() ? 0 : static_cast<std::uint32_t>(tokens[0].size());
      for (const auto& tok : tokens) {
        if (tok.size() != r.d) throw InvalidInput("ragged token list");
        for (double v : tok) r.data.push_back(static_cast<float>(v));
      }
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const InvalidInput& e) {
      throw InvalidInput(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// --- manifest ---

std::string to_string(SplitMode mode) { return mode == SplitMode::official ? "official" : "stratified5cv"; }

SplitMode parse_split_mode(const std::string& name) {
  if (name == "official" || name == "official-80-10-10") return SplitMode::official;
  if (name == "stratified5cv" || name == "stratified-80-20-with-5-fold") return SplitMode::stratified5cv;
  throw InvalidInput("unknown split mode '" + name + "'");
}

std::vector<std::string> DatasetManifest::training_ids() const {
  if (!splits) return {};
  if (splits->mode == SplitMode::official) return splits->train;
  std::vector<std::string> out;
  for (const auto& f : splits->folds) out.insert(out.end(), f.begin(), f.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json labels = json::object();
  for (const auto& [id, l] : m.labels) labels[id] = l;
  json j{{"format", kManifestFormat},
         {"records", m.record_paths},
         {"class_names", m.class_names},
         {"ids", m.ids},
         {"labels", labels},
         {"t_code", m.t_code},
         {"t_img", m.t_img},
         {"d_code", m.d_code},
         {"d_img", m.d_img},
         {"prescale", m.prescale ? json{{"code", m.prescale->code}, {"image", m.prescale->image}} : json(nullptr)},
         {"splits", m.splits ? splits_to_json(*m.splits) : json(nullptr)}};
  return j.dump(1) + "\n";
}

DatasetManifest manifest_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    if (j.at("format") != kManifestFormat) throw InvalidInput("manifest: unsupported format");
    DatasetManifest m;
    m.record_paths = j.at("records").get<std::vector<std::string>>();
    m.class_names = j.at("class_names").get<std::vector<std::string>>();
    m.ids = j.at("ids").get<std::vector<std::string>>();
    m.labels = j.at("labels").get<std::map<std::string, int>>();
    m.t_code = j.at("t_code").get<std::size_t>();
    m.t_img = j.at("t_img").get<std::size_t>();
    m.d_code = j.at("d_code").get<std::size_t>();
    m.d_img = j.at("d_img").get<std::size_t>();
    if (!j.at("prescale").is_null())
      m.prescale = Prescale{j["prescale"].at("code").get<double>(), j["prescale"].at("image").get<double>()};
    if (!j.at("splits").is_null()) m.splits = splits_from_json(j["splits"]);
    if (m.class_names.empty()) throw InvalidInput("manifest: empty class set");
    return m;
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("manifest: ") + e.what());
  }
}

void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  io::write_text_atomic(path, manifest_to_json(m));
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return manifest_from_json(std::string(bytes.begin(), bytes.end()));
}

// --- ingest ---

DatasetManifest ingest_records(const std::vector<EmbeddingRecord>& records,
                               const std::vector<std::string>& class_names) {
  if (records.empty()) throw InvalidInput("ingest: no records");
  std::map<std::string, const EmbeddingRecord*> code, image;
  DatasetManifest m;
  std::optional<std::size_t> t_code, t_img;
  bool t_code_varies = false, t_img_varies = false;

  for (const auto& r : records) {
    auto& table = r.modality == Modality::code ? code : image;
    if (r.id.empty()) throw InvalidInput("ingest: empty id");
    if (!table.emplace(r.id, &r).second)
      throw InvalidInput("ingest: duplicate id '" + r.id + "' for modality " + modality_name(r.modality));
    if (r.t == 0 || r.d == 0) throw InvalidInput("ingest: record '" + r.id + "' has no tokens");
    if (r.data.size() != std::size_t(r.t) * r.d) throw InvalidInput("ingest: record '" + r.id + "' payload != T*d");
    for (float v : r.data)
      if (!std::isfinite(v)) throw InvalidInput("ingest: record '" + r.id + "' has non-finite values");
    if (r.label < 0) throw InvalidInput("ingest: record '" + r.id + "' has a negative label");

    std::size_t& d = r.modality == Modality::code ? m.d_code : m.d_img;
    if (d == 0) d = r.d;
    if (d != r.d)
      throw InvalidInput("ingest: dimension inconsistency for '" + r.id + "' (" + modality_name(r.modality) +
                         " d=" + std::to_string(r.d) + ", expected " + std::to_string(d) + ")");
    auto& t = r.modality == Modality::code ? t_code : t_img;
    auto& varies = r.modality == Modality::code ? t_code_varies : t_img_varies;
    if (!t) t = r.t;
    if (*t != r.t) varies = true;
  }
  for (const auto& [id, rec] : code) {
    const auto it = image.find(id);
    if (it == image.end()) throw InvalidInput("ingest: id '" + id + "' has no image record");
    if (it->second->label != rec->label) throw InvalidInput("ingest: id '" + id + "' has conflicting labels");
  }
  for (const auto& [id, rec] : image)
    if (!code.count(id)) throw InvalidInput("ingest: id '" + id + "' has no code record");

  int max_label = 0;
  for (const auto& [id, rec] : code) {
    m.ids.push_back(id);
    m.labels[id] = rec->label;
    max_label = std::max(max_label, rec->label);
  }
  if (!class_names.empty()) {
    if (std::size_t(max_label) >= class_names.size()) throw InvalidInput("ingest: label exceeds class name list");
    m.class_names = class_names;
  } else {
    for (int c = 0; c <= max_label; ++c) m.class_names.push_back("class" + std::to_string(c));
  }
  m.t_code = t_code_varies ? 0 : *t_code;
  m.t_img = t_img_varies ? 0 : *t_img;
  return m;
}

DatasetManifest ingest(const std::vector<std::filesystem::path>& paths, const std::vector<std::string>& class_names) {
  std::vector<EmbeddingRecord> all;
  for (const auto& p : paths) {
    auto part = p.extension() == ".jsonl" ? read_jsonl_records(p) : read_records(p);
    all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  DatasetManifest m = ingest_records(all, class_names);
  for (const auto& p : paths) m.record_paths.push_back(p.string());
  return m;
}

Prescale compute_prescale(const std::vector<EmbeddingRecord>& records, const std::vector<std::string>& ids) {
  const std::set<std::string> wanted(ids.begin(), ids.end());
  double max_code = 0.0, max_img = 0.0;
  for (const auto& r : records) {
    if (!wanted.count(r.id)) continue;
    double& mx = r.modality == Modality::code ? max_code : max_img;
    for (std::size_t t = 0; t < r.t; ++t) mx = std::max(mx, token_norm(r, t));
  }
  return {1.0 + max_code, 1.0 + max_img};
}

// --- splits ---

SplitAssignment make_splits(const DatasetManifest& m, SplitMode mode, std::uint64_t seed,
                            const std::map<std::string, std::string>* mapping) {
  SplitAssignment s;
  s.mode = mode;
  s.seed = seed;
  if (m.ids.empty()) throw InvalidInput("make_splits: empty dataset");

  if (mode == SplitMode::official && mapping) {
    const std::set<std::string> known(m.ids.begin(), m.ids.end());
    for (const auto& [id, split] : *mapping)
      if (!known.count(id)) throw InvalidInput("split mapping names unknown id '" + id + "'");
    for (const auto& id : m.ids) {
      const auto it = mapping->find(id);
      if (it == mapping->end()) throw InvalidInput("split mapping has no entry for id '" + id + "'");
      if (it->second == "train") s.train.push_back(id);
      else if (it->second == "val" || it->second == "validation" || it->second == "dev") s.val.push_back(id);
      else if (it->second == "test") s.test.push_back(id);
      else throw InvalidInput("split mapping: unknown split '" + it->second + "' for id '" + id + "'");
    }
    if (s.train.empty() || s.val.empty() || s.test.empty())
      throw InvalidInput("split mapping must populate train, val and test");
    return s;
  }

  Rng rng = Rng::substream(seed, 20);
  std::size_t fold_offset = 0;
  s.folds.assign(mode == SplitMode::stratified5cv ? kFolds : 0, {});
  auto by_class = ids_by_class(m);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& ids = by_class[c];
    rng.shuffle(ids);
    const std::size_t n = ids.size();
    if (mode == SplitMode::official) {
      const std::size_t n_test = rounded(0.1 * double(n)), n_val = rounded(0.1 * double(n));
      for (std::size_t i = 0; i < n; ++i)
        (i < n_test ? s.test : i < n_test + n_val ? s.val : s.train).push_back(ids[i]);
    } else {
      const std::size_t n_test = rounded(0.2 * double(n));
      if (n - n_test < kFolds)
        throw InvalidInput("class '" + m.class_names[c] + "' has " + std::to_string(n - n_test) +
                           " training samples, fewer than " + std::to_string(kFolds) + " folds");
      for (std::size_t i = 0; i < n; ++i) {
        if (i < n_test) {
          s.test.push_back(ids[i]);
        } else {
          s.folds[fold_offset % kFolds].push_back(ids[i]);
          ++fold_offset;
        }
      }
    }
  }
  if (mode == SplitMode::official && (s.train.empty() || s.val.empty() || s.test.empty()))
    throw InvalidInput("make_splits: dataset too small for an 80/10/10 split");
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  for (auto& f : s.folds) std::sort(f.begin(), f.end());
  return s;
}

std::map<std::string, std::string> read_split_mapping(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const std::string text(bytes.begin(), bytes.end());
  std::map<std::string, std::string> out;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      const json j = json::parse(text);
      for (const auto& [k, v] : j.items()) out[k] = v.get<std::string>();
    } catch (const json::exception& e) {
      throw InvalidInput("split mapping: " + std::string(e.what()));
    }
    return out;
  }
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find_first_of(",\t");
    if (comma == std::string::npos) throw InvalidInput("split mapping: malformed line '" + line + "'");
    out[line.substr(0, comma)] = line.substr(comma + 1);
  }
  return out;
}

void apply_splits(DatasetManifest& m, SplitAssignment splits, const std::vector<EmbeddingRecord>& records) {
  m.splits = std::move(splits);
  m.prescale = compute_prescale(records, m.training_ids());
}

// --- dataset ---

std::vector<Sample> Dataset::select(const std::vector<std::string>& ids) const {
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = samples.find(id);
    if (it == samples.end()) throw InvalidInput("unknown sample id '" + id + "'");
    out.push_back(it->second);
  }
  return out;
}

std::vector<EmbeddingRecord> load_manifest_records(const DatasetManifest& m, const std::filesystem::path& base_dir) {
  std::vector<EmbeddingRecord> all;
  for (const auto& p : m.record_paths) {
    std::filesystem::path path(p);
    if (path.is_relative()) path = base_dir / path;
    auto part = path.extension() == ".jsonl" ? read_jsonl_records(path) : read_records(path);
    all.insert(all.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return all;
}

Dataset build_dataset(const DatasetManifest& m, const std::vector<EmbeddingRecord>& records) {
  // Re-validate against the manifest: the record files may have changed.
  const DatasetManifest check = ingest_records(records, m.class_names);
  if (check.ids != m.ids || check.labels != m.labels || check.d_code != m.d_code || check.d_img != m.d_img)
    throw InvalidInput("record files no longer match the manifest");

  const Prescale scale = m.prescale.value_or(Prescale{});
  Dataset ds;
  ds.manifest = m;
  for (const auto& r : records) {
    Sample& s = ds.samples[r.id];
    s.id = r.id;
    s.label = r.label;
    auto& tokens = r.modality == Modality::code ? s.code : s.image;
    const double div = r.modality == Modality::code ? scale.code : scale.image;
    for (std::size_t t = 0; t < r.t; ++t) {
      Vec v(r.d);
      for (std::size_t j = 0; j < r.d; ++j) v[j] = double(r.data[t * r.d + j]) / div;
      tokens.push_back(std::move(v));
    }
  }
  return ds;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
  const DatasetManifest m = load_manifest(manifest_path);
  return build_dataset(m, load_manifest_records(m, manifest_path.parent_path()));
}

// --- synthetic hierarchy ---

void SynthConfig::validate() const {
  if (n_samples == 0 || n_classes < 2 || t_code == 0 || t_img == 0 || d_code == 0 || d_img == 0 ||
      hierarchy_depth == 0 || latent_dim == 0)
    throw InvalidInput("synth: sizes must be positive and n_classes >= 2");
  if (!(noise >= 0.0) || !std::isfinite(noise)) throw InvalidInput("synth: noise must be a finite non-negative value");
}

std::vector<EmbeddingRecord> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  const std::size_t depth = cfg.hierarchy_depth, m = cfg.latent_dim, k = cfg.n_classes;

  // Smallest branching factor b with b^depth >= k.
  std::size_t branching = 1;
  const auto reach = [&](std::size_t b) {
    double p = 1.0;
    for (std::size_t i = 0; i < depth; ++i) p *= double(b);
    return p;
  };
  while (reach(branching) < double(k)) ++branching;

  Rng tree_rng = Rng::substream(cfg.seed, 10);
  std::vector<std::size_t> leaf_slot(k);
  for (std::size_t c = 0; c < k; ++c) leaf_slot[c] = c;
  tree_rng.shuffle(leaf_slot);

  // Level l (1 = coarsest, depth = leaf) groups slots by slot / b^(depth-l);
  // groups at one level nest inside the groups of the level above.
  std::vector<std::vector<Vec>> protos(depth + 1);
  std::vector<std::vector<std::size_t>> node_of(depth + 1, std::vector<std::size_t>(k));
  for (std::size_t level = 1; level <= depth; ++level) {
    double div = 1.0;
    for (std::size_t i = level; i < depth; ++i) div *= double(branching);
    std::size_t n_nodes = 0;
    for (std::size_t c = 0; c < k; ++c) {
      node_of[level][c] = static_cast<std::size_t>(double(leaf_slot[c]) / div);
      n_nodes = std::max(n_nodes, node_of[level][c] + 1);
    }
    protos[level].resize(n_nodes);
    for (auto& p : protos[level]) {
      p.resize(m);
      for (double& v : p) v = tree_rng.normal();
    }
  }

  const auto affine_maps = [&](std::size_t tokens, std::size_t d) {
    std::vector<std::pair<Matrix, Vec>> maps;
    for (std::size_t i = 0; i < tokens; ++i) {
      Matrix a(d, m);
      for (double& v : a.values()) v = tree_rng.normal() / std::sqrt(double(m));
      Vec b(d);
      for (double& v : b) v = 0.5 * tree_rng.normal();
      maps.emplace_back(std::move(a), std::move(b));
    }
    return maps;
  };
  const auto code_maps = affine_maps(cfg.t_code, cfg.d_code);
  const auto img_maps = affine_maps(cfg.t_img, cfg.d_img);

  // Coarse prefix for code, fine suffix for images; depth 1 shares the leaf.
  const std::size_t prefix_end = (depth + 1) / 2, suffix_begin = depth / 2 + 1;
  std::vector<Vec> code_latent(k, Vec(m, 0.0)), img_latent(k, Vec(m, 0.0));
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t l = 1; l <= prefix_end; ++l) axpy(1.0, protos[l][node_of[l][c]], code_latent[c]);
    for (std::size_t l = suffix_begin; l <= depth; ++l) axpy(1.0, protos[l][node_of[l][c]], img_latent[c]);
  }

  Rng sample_rng = Rng::substream(cfg.seed, 11);
  const std::size_t width = std::max<std::size_t>(6, std::to_string(cfg.n_samples - 1).size());
  std::vector<EmbeddingRecord> out;
  out.reserve(2 * cfg.n_samples);
  for (std::size_t i = 0; i < cfg.n_samples; ++i) {
    std::string id = std::to_string(i);
    id = "syn" + std::string(width - id.size(), '0') + id;
    const std::size_t label = i % k;
    const auto emit = [&](Modality mod, const std::vector<std::pair<Matrix, Vec>>& maps, const Vec& latent) {
      EmbeddingRecord r;
      r.id = id;
      r.label = static_cast<std::int32_t>(label);
      r.modality = mod;
      r.t = static_cast<std::uint32_t>(maps.size());
      r.d = static_cast<std::uint32_t>(maps[0].second.size());
      for (const auto& [a, b] : maps) {
        Vec tok = matvec(a, latent);
        axpy(1.0, b, tok);
        for (double v : tok) r.data.push_back(static_cast<float>(v + cfg.noise * sample_rng.normal()));
      }
      out.push_back(std::move(r));
    };
    emit(Modality::code, code_maps, code_latent[label]);
    emit(Modality::image, img_maps, img_latent[label]);
  }
  return out;
}

}  // namespace gocoma::data
