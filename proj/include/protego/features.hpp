#pragma once

// Detection features: the CLS row of an encoder layer's output, for clean and
// adversarial inputs, assembled into labelled train/test sets.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/parallel.hpp"
#include "protego/ptf.hpp"
#include "protego/random.hpp"
#include "protego/vit.hpp"

namespace protego {

enum class FeatureMode { cls, noise_diff };

inline std::string mode_name(FeatureMode m) { return m == FeatureMode::cls ? "cls" : "noise_diff"; }

inline FeatureMode parse_mode(const std::string& s) {
  if (s == "cls") return FeatureMode::cls;
  if (s == "noise_diff") return FeatureMode::noise_diff;
  throw ConfigError("unknown feature mode '" + s + "'");
}

struct FeatureRecord {
  Tensor feature;            // [d]
  int label = 0;             // 0 clean, 1 adversarial
  std::string source_id;
  std::string attack;        // "clean" for clean records
  std::size_t layer = 0;
};

struct FeatureDataset {
  std::vector<FeatureRecord> records;
  std::string split;
  std::size_t layer = 0;
  FeatureMode mode = FeatureMode::cls;

  std::size_t count(int label) const {
    return static_cast<std::size_t>(
        std::count_if(records.begin(), records.end(), [&](const FeatureRecord& r) { return r.label == label; }));
  }
};

inline Tensor cls_feature(const ForwardTrace& trace, std::size_t layer) {
  if (layer >= trace.tokens.size()) {
    throw ConfigError("feature layer " + std::to_string(layer) + " out of range for " +
                      std::to_string(trace.tokens.size()) + " layers");
  }
  const Tensor& tokens = trace.tokens[layer];
  const std::size_t d = tokens.dim(1);
  return Tensor({d}, std::vector<double>(tokens.data(), tokens.data() + d));
}

/// cls: the CLS row of layer layer_index's block output.
/// noise_diff: that row minus the paired clean feature.
inline Tensor extract_feature(const ViTModel& model, const Tensor& x, std::size_t layer_index, FeatureMode mode,
                              const std::optional<Tensor>& paired_clean = std::nullopt) {
  if (layer_index >= model.config.num_layers) {
    throw ConfigError("extract_feature: layer " + std::to_string(layer_index) + " >= num_layers " +
                      std::to_string(model.config.num_layers));
  }
  Tensor f = cls_feature(forward(model, x), layer_index);
  if (mode == FeatureMode::cls) return f;
  if (!paired_clean) throw ContractError("extract_feature: noise_diff needs the paired clean feature");
  return sub(f, *paired_clean);
}

/// Labels clean images 0 and adversarial images 1, then splits by source id:
/// the distinct source ids are shuffled from the seed and the first
/// round(split_fraction * n) go to train. Records of one source stay together
/// (clean first). In noise_diff mode every adversarial image needs a clean
/// image with the same id, and clean records become zero vectors.
inline std::pair<FeatureDataset, FeatureDataset> build_feature_dataset(
    const ViTModel& model, const std::vector<LabeledImage>& clean_set, const std::vector<LabeledImage>& adv_set,
    const std::string& attack, std::size_t layer_index, FeatureMode mode, double split_fraction,
    std::uint64_t seed) {
  if (clean_set.empty() || adv_set.empty()) throw DataError("build_feature_dataset: empty clean or adversarial set");
  if (!(split_fraction >= 0.0 && split_fraction <= 1.0)) throw ConfigError("split_fraction must be in [0,1]");
  if (layer_index >= model.config.num_layers) throw ConfigError("build_feature_dataset: layer out of range");

  std::vector<Tensor> clean_f(clean_set.size()), adv_f(adv_set.size());
  parallel_for(clean_set.size(), [&](std::size_t i) {
    clean_f[i] = extract_feature(model, clean_set[i].image, layer_index, FeatureMode::cls);
  });
  parallel_for(adv_set.size(), [&](std::size_t i) {
    adv_f[i] = extract_feature(model, adv_set[i].image, layer_index, FeatureMode::cls);
  });
  if (mode == FeatureMode::noise_diff) {
    std::map<std::string, std::size_t> clean_by_id;
    for (std::size_t i = 0; i < clean_set.size(); ++i) clean_by_id.emplace(clean_set[i].id, i);
    for (std::size_t i = 0; i < adv_set.size(); ++i) {
      const auto it = clean_by_id.find(adv_set[i].id);
      if (it == clean_by_id.end()) throw DataError("noise_diff: no clean twin for " + adv_set[i].id);
      adv_f[i] = sub(adv_f[i], clean_f[it->second]);
    }
    for (auto& f : clean_f) f = Tensor(f.shape());
  }

  std::vector<std::string> sources;
  std::set<std::string> seen;
  for (const auto* set : {&clean_set, &adv_set})
    for (const auto& ex : *set)
      if (seen.insert(ex.id).second) sources.push_back(ex.id);
  Rng rng(seed);
  rng.shuffle(sources);
  const auto n_train = static_cast<std::size_t>(std::llround(split_fraction * static_cast<double>(sources.size())));
  std::map<std::string, std::pair<bool, std::size_t>> placement;  // id -> (train?, position)
  for (std::size_t i = 0; i < sources.size(); ++i) placement[sources[i]] = {i < n_train, i};

  FeatureDataset train, test;
  train.split = "train";
  test.split = "test";
  train.layer = test.layer = layer_index;
  train.mode = test.mode = mode;
  struct Pending {
    std::size_t position;
    int label;
    FeatureRecord record;
  };
  std::vector<Pending> pending;
  for (std::size_t i = 0; i < clean_set.size(); ++i)
    pending.push_back({placement[clean_set[i].id].second, 0, {clean_f[i], 0, clean_set[i].id, "clean", layer_index}});
  for (std::size_t i = 0; i < adv_set.size(); ++i)
    pending.push_back({placement[adv_set[i].id].second, 1, {adv_f[i], 1, adv_set[i].id, attack, layer_index}});
  std::stable_sort(pending.begin(), pending.end(), [](const Pending& a, const Pending& b) {
    return a.position != b.position ? a.position < b.position : a.label < b.label;
  });
  for (auto& p : pending) (p.position < n_train ? train : test).records.push_back(std::move(p.record));
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Feature files: <name>.ptf holds an [N, d] matrix, <name>.csv one row per
// record: index,source_id,label,attack,layer,mode.

inline void save_feature_dataset(const FeatureDataset& ds, const std::filesystem::path& dir, const std::string& name) {
  ptf::make_dirs(dir);
  if (ds.records.empty()) throw DataError("save_feature_dataset: no records in " + name);
  const std::size_t d = ds.records.front().feature.size();
  std::vector<double> matrix;
  matrix.reserve(ds.records.size() * d);
  std::ofstream csv(dir / (name + ".csv"), std::ios::trunc);
  if (!csv) throw IoError("cannot write " + (dir / (name + ".csv")).string());
  csv << "index,source_id,label,attack,layer,mode\n";
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    const auto& r = ds.records[i];
    if (r.feature.size() != d) throw DimensionError("save_feature_dataset: ragged features");
    matrix.insert(matrix.end(), r.feature.values().begin(), r.feature.values().end());
    csv << i << ',' << r.source_id << ',' << r.label << ',' << r.attack << ',' << r.layer << ',' << mode_name(ds.mode)
        << '\n';
  }
  ptf::save(Tensor({ds.records.size(), d}, std::move(matrix)), dir / (name + ".ptf"));
}

inline FeatureDataset load_feature_dataset(const std::filesystem::path& dir, const std::string& name) {
  const Tensor matrix = ptf::load(dir / (name + ".ptf"));
  if (matrix.rank() != 2) throw FormatError(name + ".ptf: expected a matrix");
  std::ifstream csv(dir / (name + ".csv"));
  if (!csv) throw IoError("cannot open " + (dir / (name + ".csv")).string());
  std::string line;
  std::getline(csv, line);
  if (line != "index,source_id,label,attack,layer,mode") throw FormatError(name + ".csv: unexpected header");
  FeatureDataset ds;
  ds.split = name;
  const std::size_t d = matrix.dim(1);
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) cols.push_back(col);
    if (cols.size() != 6) throw FormatError(name + ".csv: malformed row '" + line + "'");
    const std::size_t index = std::stoul(cols[0]);
    if (index >= matrix.dim(0)) throw FormatError(name + ".csv: row index out of range");
    FeatureRecord r;
    r.feature = Tensor({d}, std::vector<double>(matrix.data() + index * d, matrix.data() + (index + 1) * d));
    r.source_id = cols[1];
    r.label = std::stoi(cols[2]);
    if (r.label != 0 && r.label != 1) throw FormatError(name + ".csv: label must be 0 or 1");
    r.attack = cols[3];
    r.layer = std::stoul(cols[4]);
    ds.layer = r.layer;
    ds.mode = parse_mode(cols[5]);
    ds.records.push_back(std::move(r));
  }
  if (ds.records.size() != matrix.dim(0)) throw FormatError(name + ": csv and ptf row counts differ");
  return ds;
}

}  // namespace protego
