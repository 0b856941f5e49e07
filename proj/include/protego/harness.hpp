#pragma once

// Config-driven pipeline:
//   ingest -> train -> attack -> extract -> detect -> evaluate -> visualize
// Every stage draws its randomness from derive_seed(global seed, stage name).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "protego/attacks.hpp"
#include "protego/config.hpp"
#include "protego/dataset.hpp"
#include "protego/detector.hpp"
#include "protego/error.hpp"
#include "protego/features.hpp"
#include "protego/interpret.hpp"
#include "protego/metrics.hpp"
#include "protego/parallel.hpp"
#include "protego/ptf.hpp"
#include "protego/random.hpp"
#include "protego/vit.hpp"

namespace protego {

/// A failure tagged with the pipeline stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error("stage " + stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

struct RolloutSettings {
  RolloutMethod method = RolloutMethod::rollout;
  HeadFusion fusion = HeadFusion::mean;
  bool residual = false;
  std::size_t heatmaps = 4;  // successful examples rendered per attack
};

inline bool known_attack(const std::string& name) {
  for (AttackFamily f : kAllAttacks)
    if (attack_name(f) == name) return true;
  return false;
}

struct ExperimentConfig {
  DatasetSpec data;
  ViTConfig model;
  TrainOptions train;
  std::optional<std::filesystem::path> checkpoint;  // load instead of training
  std::vector<AttackSpec> attacks;
  std::string attack_split = "test";
  std::size_t attack_examples = 0;  // 0: the whole split
  FeatureMode mode = FeatureMode::cls;
  std::vector<std::size_t> layers;  // empty: last encoder layer
  double feature_split = 0.5;
  DetectorOptions detector;
  std::size_t lid_k = 10;
  std::size_t lid_reference = 100;
  RolloutSettings rollout;
  std::uint64_t seed = 0;
  std::filesystem::path out = "runs/default";

  std::vector<std::size_t> feature_layers() const {
    if (layers.empty()) return {model.num_layers - 1};
    return layers;
  }

  void validate() const {
    model.validate();
    if (model.num_classes != data.classes) throw ConfigError("model classes must equal data classes");
    if (model.image_size != data.image_size || model.channels != data.channels) {
      throw ConfigError("model input geometry must match the dataset");
    }
    if (attacks.empty()) throw ConfigError("at least one attack is required");
    for (const auto& a : attacks) a.validate(model);
    for (std::size_t l : feature_layers()) {
      if (l >= model.num_layers) throw ConfigError("feature layer " + std::to_string(l) + " >= num_layers");
    }
    if (attack_split != "train" && attack_split != "val" && attack_split != "test") {
      throw ConfigError("attack split must be train, val or test");
    }
    if (!(feature_split > 0.0 && feature_split < 1.0)) throw ConfigError("feature split_fraction must be in (0,1)");
    if (data.kind == DatasetKind::image_dir && !std::filesystem::is_directory(data.path)) {
      throw ConfigError("data path does not exist: " + data.path.string());
    }
    if (checkpoint && !std::filesystem::exists(*checkpoint)) {
      throw ConfigError("checkpoint does not exist: " + checkpoint->string());
    }
    if (train.epochs == 0 || train.batch_size == 0) throw ConfigError("train epochs and batch_size must be positive");
  }

  static ExperimentConfig from(const Config& cfg) {
    ExperimentConfig e;
    e.seed = cfg.get_u64("run", "seed", e.seed);
    e.out = cfg.get_string("run", "out", e.out.string());

    const std::string kind = cfg.get_string("data", "kind", "synthetic_shapes");
    if (kind == "synthetic_shapes") e.data.kind = DatasetKind::synthetic_shapes;
    else if (kind == "image_dir") e.data.kind = DatasetKind::image_dir;
    else throw ConfigError("[data] kind must be synthetic_shapes or image_dir");
    e.data.path = cfg.get_string("data", "path", "");
    e.data.image_size = cfg.get_size("data", "image_size", e.data.image_size);
    e.data.channels = cfg.get_size("data", "channels", e.data.channels);
    e.data.classes = cfg.get_size("data", "classes", e.data.classes);
    e.data.per_class = cfg.get_size("data", "per_class", e.data.per_class);
    e.data.train_fraction = cfg.get_double("data", "train_fraction", e.data.train_fraction);
    e.data.val_fraction = cfg.get_double("data", "val_fraction", e.data.val_fraction);

    e.model.image_size = e.data.image_size;
    e.model.channels = e.data.channels;
    e.model.num_classes = e.data.classes;
    e.model.patch_size = cfg.get_size("model", "patch_size", e.model.patch_size);
    e.model.embed_dim = cfg.get_size("model", "embed_dim", e.model.embed_dim);
    e.model.num_heads = cfg.get_size("model", "num_heads", e.model.num_heads);
    e.model.num_layers = cfg.get_size("model", "num_layers", e.model.num_layers);
    e.model.mlp_hidden = cfg.get_size("model", "mlp_hidden", e.model.mlp_hidden);
    e.model.dropout_rate = cfg.get_double("model", "dropout", e.model.dropout_rate);

    e.train.epochs = cfg.get_size("train", "epochs", e.train.epochs);
    e.train.lr = cfg.get_double("train", "lr", e.train.lr);
    e.train.momentum = cfg.get_double("train", "momentum", e.train.momentum);
    const std::string opt = cfg.get_string("train", "optimizer", "adam");
    if (opt == "adam") e.train.optimizer = Optimizer::adam;
    else if (opt == "sgdm") e.train.optimizer = Optimizer::sgdm;
    else throw ConfigError("[train] optimizer must be adam or sgdm");
    e.train.batch_size = cfg.get_size("train", "batch_size", e.train.batch_size);
    e.train.clip_norm = cfg.get_double("train", "clip_norm", e.train.clip_norm);
    e.train.cosine_decay = cfg.get_bool("train", "cosine_decay", e.train.cosine_decay);
    if (auto ck = cfg.raw("train", "checkpoint"); ck && !ck->empty()) e.checkpoint = *ck;

    const auto families = cfg.get_list("attacks", "families", {"pgd", "fgsm", "bim", "mim", "cw", "patch_fool"});
    e.attack_split = cfg.get_string("attacks", "split", e.attack_split);
    e.attack_examples = cfg.get_size("attacks", "examples", e.attack_examples);
    // Every [attack.<family>] section is parsed so typos surface even for
    // families left out of the run.
    std::map<AttackFamily, AttackSpec> specs;
    for (AttackFamily f : kAllAttacks) {
      AttackSpec s = AttackSpec::defaults(f, e.model.num_layers);
      const std::string sec = "attack." + attack_name(f);
      auto override_double = [&](const char* key, std::optional<double>& field) {
        if (auto v = cfg.get_optional_double(sec, key)) field = *v;
      };
      auto override_size = [&](const char* key, std::optional<std::size_t>& field) {
        if (auto v = cfg.get_optional_size(sec, key)) field = *v;
      };
      override_double("epsilon", s.epsilon);
      override_size("steps", s.steps);
      override_double("alpha", s.alpha);
      override_double("gamma", s.gamma);
      override_double("c", s.c);
      override_double("kappa", s.kappa);
      override_double("lr", s.lr);
      override_size("num_patch", s.num_patch);
      override_size("atten_select", s.atten_select);
      specs[f] = s;
    }
    for (const auto& name : families) e.attacks.push_back(specs.at(parse_attack(name)));

    e.mode = parse_mode(cfg.get_string("features", "mode", "cls"));
    for (const auto& l : cfg.get_list("features", "layers", {})) {
      if (l == "last") {
        e.layers.push_back(e.model.num_layers - 1);
        continue;
      }
      try {
        e.layers.push_back(std::stoul(l));
      } catch (const std::exception&) {
        throw ConfigError("[features] layers: '" + l + "' is not a layer index");
      }
    }
    e.feature_split = cfg.get_double("features", "split_fraction", e.feature_split);

    e.detector.lr = cfg.get_double("detector", "lr", e.detector.lr);
    e.detector.momentum = cfg.get_double("detector", "momentum", e.detector.momentum);
    e.detector.epochs = cfg.get_size("detector", "epochs", e.detector.epochs);
    e.detector.batch_size = cfg.get_size("detector", "batch_size", e.detector.batch_size);

    e.lid_k = cfg.get_size("lid", "k", e.lid_k);
    e.lid_reference = cfg.get_size("lid", "reference", e.lid_reference);

    const std::string method = cfg.get_string("rollout", "method", "rollout");
    if (method == "rollout") e.rollout.method = RolloutMethod::rollout;
    else if (method == "grad_rollout") e.rollout.method = RolloutMethod::grad_rollout;
    else throw ConfigError("[rollout] method must be rollout or grad_rollout");
    e.rollout.fusion = parse_fusion(cfg.get_string("rollout", "fusion", "mean"));
    e.rollout.residual = cfg.get_bool("rollout", "residual", e.rollout.residual);
    e.rollout.heatmaps = cfg.get_size("rollout", "heatmaps", e.rollout.heatmaps);

    for (const auto& section : cfg.sections()) {
      const bool known = section.empty() || section == "run" || section == "data" || section == "model" ||
                         section == "train" || section == "attacks" || section == "features" ||
                         section == "detector" || section == "lid" || section == "rollout" ||
                         (section.rfind("attack.", 0) == 0 && known_attack(section.substr(7)));
      if (!known) throw ConfigError("unknown config section [" + section + "]");
    }
    if (const auto unused = cfg.unused_keys(); !unused.empty()) {
      std::string list;
      for (const auto& k : unused) list += (list.empty() ? "" : ", ") + k;
      throw ConfigError("unknown or inapplicable config keys: " + list);
    }
    return e;
  }
};

// ---------------------------------------------------------------------------
// Stage building blocks

struct AttackRun {
  AttackSpec spec;
  std::vector<LabeledImage> examples;
  std::vector<AdvResult> results;
  std::vector<std::size_t> clean_predictions;
  std::size_t successes = 0;
  double clean_accuracy = 0.0;
  double attacked_accuracy = 0.0;
  double asr = 0.0;
  double mean_l2 = 0.0;    // over successful examples
  double mean_linf = 0.0;  // over successful examples
};

/// Attacks every example; example i uses spec.seed = derive_seed(stage_seed, i).
inline AttackRun run_attack_set(const ViTModel& model, const std::vector<LabeledImage>& examples,
                                const AttackSpec& spec, std::uint64_t stage_seed) {
  if (examples.empty()) throw DataError("no examples to attack");
  spec.validate(model.config);
  AttackRun run;
  run.spec = spec;
  run.examples = examples;
  run.results.resize(examples.size());
  run.clean_predictions.resize(examples.size());
  parallel_for(examples.size(), [&](std::size_t i) {
    AttackSpec s = spec;
    s.seed = derive_seed(stage_seed, static_cast<std::uint64_t>(i));
    run.clean_predictions[i] = predict(model, examples[i].image);
    run.results[i] = run_attack(model, examples[i].image, examples[i].label, s);
  });
  std::size_t clean_hits = 0, adv_hits = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    clean_hits += run.clean_predictions[i] == examples[i].label;
    adv_hits += run.results[i].predicted == examples[i].label;
    if (run.results[i].success) {
      ++run.successes;
      run.mean_l2 += run.results[i].l2;
      run.mean_linf += run.results[i].linf;
    }
  }
  const auto n = static_cast<double>(examples.size());
  run.clean_accuracy = static_cast<double>(clean_hits) / n;
  run.attacked_accuracy = static_cast<double>(adv_hits) / n;
  run.asr = asr(run.successes, examples.size());
  if (run.successes > 0) {
    run.mean_l2 /= static_cast<double>(run.successes);
    run.mean_linf /= static_cast<double>(run.successes);
  }
  return run;
}

/// Detector inputs: clean examples the model classifies correctly, and the
/// successful adversarial versions of those same examples.
struct DetectionPairs {
  std::vector<LabeledImage> clean;
  std::vector<LabeledImage> adversarial;
};

inline DetectionPairs detection_pairs(const std::vector<LabeledImage>& examples,
                                      const std::vector<std::size_t>& clean_predictions,
                                      const std::vector<LabeledImage>& adversarial, const std::vector<bool>& success) {
  if (examples.size() != clean_predictions.size() || adversarial.size() != success.size()) {
    throw DimensionError("detection_pairs: size mismatch");
  }
  DetectionPairs out;
  std::set<std::string> correct;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (clean_predictions[i] == examples[i].label) {
      out.clean.push_back(examples[i]);
      correct.insert(examples[i].id);
    }
  }
  for (std::size_t i = 0; i < adversarial.size(); ++i) {
    if (success[i] && correct.count(adversarial[i].id)) out.adversarial.push_back(adversarial[i]);
  }
  return out;
}

inline DetectionPairs detection_pairs(const AttackRun& run) {
  std::vector<LabeledImage> adv;
  std::vector<bool> success;
  for (std::size_t i = 0; i < run.results.size(); ++i) {
    adv.push_back({run.examples[i].id, run.results[i].image, run.examples[i].label});
    success.push_back(run.results[i].success);
  }
  return detection_pairs(run.examples, run.clean_predictions, adv, success);
}

/// Clean features of the first `count` training images after a seeded
/// shuffle; the LID neighbourhood reference.
inline std::vector<std::vector<double>> lid_reference_set(const ViTModel& model,
                                                          const std::vector<LabeledImage>& train,
                                                          std::size_t layer, std::size_t count,
                                                          std::uint64_t seed) {
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(std::min(count, order.size()));
  std::vector<std::vector<double>> out(order.size());
  parallel_for(order.size(), [&](std::size_t i) {
    out[i] = extract_feature(model, train[order[i]].image, layer, FeatureMode::cls).to_vector();
  });
  return out;
}

inline void save_reference(const std::vector<std::vector<double>>& rows, const std::filesystem::path& path) {
  if (rows.empty()) throw DataError("empty LID reference set");
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  if (!path.parent_path().empty()) ptf::make_dirs(path.parent_path());
  ptf::save(Tensor({rows.size(), rows.front().size()}, std::move(flat)), path);
}

inline std::vector<std::vector<double>> load_reference(const std::filesystem::path& path) {
  const Tensor m = ptf::load(path);
  if (m.rank() != 2) throw FormatError(path.string() + ": reference must be a matrix");
  std::vector<std::vector<double>> rows(m.dim(0));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i].assign(m.data() + i * m.dim(1), m.data() + (i + 1) * m.dim(1));
  return rows;
}

struct DetectionOutcome {
  FeatureDataset train, test;
  DetectorTraining detector;
  double protego_auc = std::nan("");
  double lid_auc = std::nan("");
  std::vector<double> test_scores;
};

/// Builds the feature split, trains the linear detector and scores the held
/// out records with it and with LID. AUCs stay NaN when a split lacks a class.
inline DetectionOutcome evaluate_detection(const ViTModel& model, const DetectionPairs& pairs,
                                           const std::string& attack, std::size_t layer, FeatureMode mode,
                                           double split_fraction, const DetectorOptions& options,
                                           const LidConfig& lid, std::uint64_t seed) {
  DetectionOutcome out;
  if (pairs.clean.empty() || pairs.adversarial.empty()) return out;
  std::tie(out.train, out.test) =
      build_feature_dataset(model, pairs.clean, pairs.adversarial, attack, layer, mode, split_fraction, seed);
  if (out.train.count(0) == 0 || out.train.count(1) == 0) return out;
  out.detector = train_detector(out.train, options);
  ScoreSet scores;
  std::vector<std::vector<double>> clean_q, adv_q;
  for (const auto& r : out.test.records) {
    const double s = linear_output(out.detector.detector, r.feature.values());
    out.test_scores.push_back(s);
    (r.label == 1 ? scores.positive : scores.negative).push_back(s);
    (r.label == 1 ? adv_q : clean_q).push_back(r.feature.to_vector());
  }
  if (!scores.positive.empty() && !scores.negative.empty()) {
    out.protego_auc = auc(scores);
    if (mode == FeatureMode::cls) out.lid_auc = lid_auc(clean_q, adv_q, lid);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Results table

struct ResultRow {
  std::string model;
  std::string attack;
  std::string detector;  // protego | lid
  std::size_t layer = 0;
  double clean_acc = 0.0;
  double attacked_acc = 0.0;
  double asr = 0.0;
  double mean_l2 = 0.0;
  double mean_linf = 0.0;
  double auc = 0.0;
  std::size_t train_records = 0;
  std::size_t test_records = 0;
};

inline constexpr const char* kResultsHeader =
    "model,attack,detector,layer,clean_acc,attacked_acc,asr,mean_l2,mean_linf,auc,train_records,test_records";

inline std::string fixed6(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_results_csv(const std::vector<ResultRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << kResultsHeader << '\n';
  for (const auto& r : rows) {
    out << r.model << ',' << r.attack << ',' << r.detector << ',' << r.layer << ',' << fixed6(r.clean_acc) << ','
        << fixed6(r.attacked_acc) << ',' << fixed6(r.asr) << ',' << fixed6(r.mean_l2) << ',' << fixed6(r.mean_linf)
        << ',' << fixed6(r.auc) << ',' << r.train_records << ',' << r.test_records << '\n';
  }
}

inline std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("missing results file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) throw FormatError(path.string() + ": unexpected header");
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) c.push_back(col);
    if (c.size() != 12) throw FormatError(path.string() + ": malformed row '" + line + "'");
    auto num = [&](const std::string& s) { return s == "nan" ? std::nan("") : std::stod(s); };
    rows.push_back({c[0], c[1], c[2], std::stoul(c[3]), num(c[4]), num(c[5]), num(c[6]), num(c[7]), num(c[8]),
                    num(c[9]), std::stoul(c[10]), std::stoul(c[11])});
  }
  return rows;
}

inline constexpr const char* kToyFooter =
    "Toy scale: synthetic 32x32 grayscale shapes and one small ViT trained in-repo stand in for ImageNet and "
    "pretrained ViT-B/16, ViT-B/32 and DeiT-Tiny. Absolute numbers are not comparable to full-scale results.";

/// Text table with one line per (attack, layer); every value is re-read from
/// results.csv.
inline std::string report(const std::filesystem::path& run_dir) {
  const auto rows = read_results_csv(run_dir / "results.csv");
  std::ostringstream out;
  auto cell = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  out << std::left << std::setw(12) << "attack" << std::setw(7) << "layer" << std::right << std::setw(11)
      << "clean acc" << std::setw(14) << "attacked acc" << std::setw(9) << "ASR" << std::setw(9) << "L2"
      << std::setw(9) << "Linf" << std::setw(13) << "Protego AUC" << std::setw(10) << "LID AUC" << '\n';
  std::vector<std::pair<std::string, std::size_t>> keys;
  std::map<std::pair<std::string, std::size_t>, std::map<std::string, ResultRow>> by_key;
  for (const auto& r : rows) {
    const auto key = std::make_pair(r.attack, r.layer);
    if (!by_key.count(key)) keys.push_back(key);
    by_key[key][r.detector] = r;
  }
  for (const auto& key : keys) {
    const auto& group = by_key[key];
    const ResultRow& any = group.begin()->second;
    const double p = group.count("protego") ? group.at("protego").auc : std::nan("");
    const double l = group.count("lid") ? group.at("lid").auc : std::nan("");
    out << std::left << std::setw(12) << key.first << std::setw(7) << key.second << std::right << std::setw(11)
        << cell(any.clean_acc) << std::setw(14) << cell(any.attacked_acc) << std::setw(9) << cell(any.asr)
        << std::setw(9) << cell(any.mean_l2) << std::setw(9) << cell(any.mean_linf) << std::setw(13) << cell(p)
        << std::setw(10) << cell(l) << '\n';
  }
  out << '\n' << kToyFooter << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Adversarial set files: <dir>/manifest.csv plus one PTF1 image per example.

inline constexpr const char* kAdvHeader = "id,label,success,predicted,l2,linf,steps,perturbed_patches,file";

inline void save_attack_run(const AttackRun& run, const std::filesystem::path& dir) {
  ptf::make_dirs(dir / "images");
  std::ofstream m(dir / "manifest.csv", std::ios::trunc | std::ios::binary);
  if (!m) throw IoError("cannot write " + (dir / "manifest.csv").string());
  m << kAdvHeader << '\n';
  m.precision(17);
  for (std::size_t i = 0; i < run.results.size(); ++i) {
    const auto& r = run.results[i];
    std::string file = run.examples[i].id;
    std::replace(file.begin(), file.end(), '/', '_');
    file = "images/" + file + ".ptf";
    ptf::save(r.image, dir / file);
    m << run.examples[i].id << ',' << run.examples[i].label << ',' << (r.success ? 1 : 0) << ',' << r.predicted << ','
      << r.l2 << ',' << r.linf << ',' << r.steps << ',' << r.perturbed_patches << ',' << file << '\n';
  }
}

struct AdvSet {
  std::vector<LabeledImage> images;
  std::vector<bool> success;
};

inline AdvSet load_adv_set(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.csv");
  if (!in) throw IoError("cannot open " + (dir / "manifest.csv").string());
  std::string line;
  if (!std::getline(in, line) || line != kAdvHeader) throw FormatError((dir / "manifest.csv").string() + ": unexpected header");
  AdvSet out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> c;
    std::stringstream ss(line);
    for (std::string col; std::getline(ss, col, ',');) c.push_back(col);
    if (c.size() != 9) throw FormatError("adversarial manifest: malformed row '" + line + "'");
    out.images.push_back({c[0], ptf::load(dir / c[8]), std::stoul(c[1])});
    out.success.push_back(c[2] == "1");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

struct RunSummary {
  std::filesystem::path dir;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<ResultRow> rows;
  std::vector<AttackRun> attacks;
};

inline std::string model_tag(const ViTConfig& c) {
  return "vit-L" + std::to_string(c.num_layers) + "-d" + std::to_string(c.embed_dim);
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

inline nlohmann::json config_json(const ExperimentConfig& e) {
  nlohmann::json j;
  j["seed"] = e.seed;
  j["data"] = {{"kind", e.data.kind == DatasetKind::synthetic_shapes ? "synthetic_shapes" : "image_dir"},
               {"path", e.data.path.string()},
               {"image_size", e.data.image_size},
               {"channels", e.data.channels},
               {"classes", e.data.classes},
               {"per_class", e.data.per_class},
               {"train_fraction", e.data.train_fraction},
               {"val_fraction", e.data.val_fraction}};
  j["model"] = detail::format_config(e.model);
  j["train"] = {{"epochs", e.train.epochs},
                {"lr", e.train.lr},
                {"momentum", e.train.momentum},
                {"optimizer", e.train.optimizer == Optimizer::adam ? "adam" : "sgdm"},
                {"batch_size", e.train.batch_size},
                {"clip_norm", e.train.clip_norm},
                {"cosine_decay", e.train.cosine_decay},
                {"checkpoint", e.checkpoint ? e.checkpoint->string() : ""}};
  nlohmann::json attacks = nlohmann::json::array();
  for (const auto& a : e.attacks) {
    nlohmann::json s = {{"family", attack_name(a.family)}};
    if (a.epsilon) s["epsilon"] = *a.epsilon;
    if (a.steps) s["steps"] = *a.steps;
    if (a.alpha) s["alpha"] = *a.alpha;
    if (a.gamma) s["gamma"] = *a.gamma;
    if (a.c) s["c"] = *a.c;
    if (a.kappa) s["kappa"] = *a.kappa;
    if (a.lr) s["lr"] = *a.lr;
    if (a.num_patch) s["num_patch"] = *a.num_patch;
    if (a.atten_select) s["atten_select"] = *a.atten_select;
    attacks.push_back(s);
  }
  j["attacks"] = {{"split", e.attack_split}, {"examples", e.attack_examples}, {"specs", attacks}};
  j["features"] = {{"mode", mode_name(e.mode)}, {"layers", e.feature_layers()}, {"split_fraction", e.feature_split}};
  j["detector"] = {{"lr", e.detector.lr},
                   {"momentum", e.detector.momentum},
                   {"epochs", e.detector.epochs},
                   {"batch_size", e.detector.batch_size}};
  j["lid"] = {{"k", e.lid_k}, {"reference", e.lid_reference}};
  j["rollout"] = {{"method", method_name(e.rollout.method)},
                  {"fusion", fusion_name(e.rollout.fusion)},
                  {"residual", e.rollout.residual},
                  {"heatmaps", e.rollout.heatmaps}};
  return j;
}

/// Sorted relative paths and FNV-1a hashes of every file under dir except
/// manifest.json.
inline nlohmann::json file_hashes(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") files.push_back(entry.path());
  }
  std::vector<std::string> rel;
  for (const auto& f : files) rel.push_back(fs::relative(f, dir).generic_string());
  std::sort(rel.begin(), rel.end());
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rel) {
    const std::string bytes = ptf::read_file_bytes(dir / r);
    out.push_back({{"path", r}, {"bytes", bytes.size()}, {"fnv1a64", hex64(fnv1a(bytes))}});
  }
  return out;
}

/// Re-hashes the files listed in dir/manifest.json; returns the paths whose
/// size or hash changed (missing files included).
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("missing manifest in " + dir.string());
  const nlohmann::json m = nlohmann::json::parse(in);
  std::vector<std::string> bad;
  for (const auto& f : m.at("files")) {
    const std::string rel = f.at("path");
    if (!std::filesystem::exists(dir / rel)) {
      bad.push_back(rel);
      continue;
    }
    const std::string bytes = ptf::read_file_bytes(dir / rel);
    if (bytes.size() != f.at("bytes").get<std::size_t>() || hex64(fnv1a(bytes)) != f.at("fnv1a64")) bad.push_back(rel);
  }
  return bad;
}

inline std::string file_stem(std::string id) {
  std::replace(id.begin(), id.end(), '/', '_');
  return id;
}

inline RolloutMap saliency_for(const ViTModel& model, const Tensor& x, const RolloutSettings& settings) {
  if (settings.method == RolloutMethod::grad_rollout) {
    return grad_attention_rollout(model, x, predict(model, x), settings.fusion);
  }
  return attention_rollout(forward(model, x), settings.fusion, settings.residual);
}

/// Runs every stage and writes the run directory. Progress lines go to log
/// when given. Failures are rethrown as StageError after FAILED is written.
inline RunSummary run_pipeline(const ExperimentConfig& config, std::ostream* log = nullptr) {
  namespace fs = std::filesystem;
  RunSummary summary;
  summary.dir = config.out;
  std::string stage = "config";
  auto say = [&](const std::string& line) {
    if (log) *log << "[" << stage << "] " << line << std::endl;
  };
  try {
    config.validate();
    ptf::make_dirs(config.out);
    fs::remove(config.out / "FAILED");
    const fs::path dir = config.out;
    std::map<std::string, std::uint64_t> seeds;
    auto seed_for = [&](const std::string& name) {
      const std::uint64_t s = derive_seed(config.seed, name);
      seeds[name] = s;
      return s;
    };

    stage = "ingest";
    const DatasetSplits splits = ingest_dataset(config.data, seed_for("data"));
    save_image_sets(dir / "data", splits);
    say(std::to_string(splits.train.size()) + " train, " + std::to_string(splits.val.size()) + " val, " +
        std::to_string(splits.test.size()) + " test");

    stage = "train";
    ViTModel model;
    if (config.checkpoint) {
      model = load_checkpoint(*config.checkpoint, config.model);
      say("loaded " + config.checkpoint->string());
    } else {
      model = init_vit(config.model, seed_for("init"));
      TrainOptions opts = config.train;
      opts.seed = seed_for("train");
      opts.validation = &splits.val;
      opts.on_epoch = [&](std::size_t epoch, double loss, double acc) {
        say("epoch " + std::to_string(epoch + 1) + " loss " + fixed6(loss) + " acc " + fixed6(acc));
      };
      const TrainReport rep = train_classifier(model, splits.train, opts);
      std::ofstream tl(dir / "train_log.csv", std::ios::trunc | std::ios::binary);
      tl << "epoch,loss,train_acc,val_acc\n";
      for (std::size_t i = 0; i < rep.epoch_loss.size(); ++i) {
        tl << i + 1 << ',' << fixed6(rep.epoch_loss[i]) << ',' << fixed6(rep.epoch_accuracy[i]) << ','
           << fixed6(rep.validation_accuracy[i]) << '\n';
      }
    }
    save_checkpoint(model, dir / "model.ckpt");
    summary.val_accuracy = splits.val.empty() ? std::nan("") : accuracy(model, splits.val);
    summary.test_accuracy = splits.test.empty() ? std::nan("") : accuracy(model, splits.test);
    say("val acc " + fixed6(summary.val_accuracy) + ", test acc " + fixed6(summary.test_accuracy));

    stage = "attack";
    std::vector<LabeledImage> pool = config.attack_split == "train" ? splits.train
                                     : config.attack_split == "val" ? splits.val
                                                                    : splits.test;
    if (config.attack_examples > 0 && pool.size() > config.attack_examples) pool.resize(config.attack_examples);
    for (const auto& spec : config.attacks) {
      const std::string name = attack_name(spec.family);
      AttackRun run = run_attack_set(model, pool, spec, seed_for("attack:" + name));
      save_attack_run(run, dir / "adv" / name);
      say(name + ": ASR " + fixed6(run.asr) + ", attacked acc " + fixed6(run.attacked_accuracy));
      summary.attacks.push_back(std::move(run));
    }

    const std::string tag = model_tag(model.config);
    for (const auto& run : summary.attacks) {
      const std::string name = attack_name(run.spec.family);
      const DetectionPairs pairs = detection_pairs(run);
      for (std::size_t layer : config.feature_layers()) {
        stage = "extract";
        LidConfig lid;
        lid.k = config.lid_k;
        lid.reference = lid_reference_set(model, splits.train, layer, config.lid_reference, seed_for("lid"));
        DetectorOptions dopts = config.detector;
        dopts.seed = seed_for("detector:" + name);
        stage = "detect";
        const DetectionOutcome det = evaluate_detection(model, pairs, name, layer, config.mode, config.feature_split,
                                                        dopts, lid, seed_for("features:" + name));
        const std::string leaf = name + "/L" + std::to_string(layer);
        if (!det.train.records.empty()) save_feature_dataset(det.train, dir / "features" / leaf, "train");
        if (!det.test.records.empty()) save_feature_dataset(det.test, dir / "features" / leaf, "test");
        save_reference(lid.reference, dir / "features" / leaf / "reference.ptf");
        if (!det.detector.detector.weights.empty()) {
          ptf::make_dirs(dir / "detectors");
          save_detector(det.detector.detector, dir / "detectors" / (name + "_L" + std::to_string(layer) + ".det"));
        }
        stage = "evaluate";
        ResultRow row{tag, name, "protego", layer, run.clean_accuracy, run.attacked_accuracy, run.asr, run.mean_l2,
                      run.mean_linf, det.protego_auc, det.train.records.size(), det.test.records.size()};
        summary.rows.push_back(row);
        row.detector = "lid";
        row.auc = det.lid_auc;
        summary.rows.push_back(row);
        say(name + " layer " + std::to_string(layer) + ": Protego AUC " + fixed6(det.protego_auc) + ", LID AUC " +
            fixed6(det.lid_auc));
      }
    }
    write_results_csv(summary.rows, dir / "results.csv");

    stage = "visualize";
    std::ofstream sal(dir / "saliency.csv", std::ios::trunc | std::ios::binary);
    sal << "attack,id,method,iou_clean_adv\n";
    for (const auto& run : summary.attacks) {
      const std::string name = attack_name(run.spec.family);
      std::size_t drawn = 0;
      for (std::size_t i = 0; i < run.results.size() && drawn < config.rollout.heatmaps; ++i) {
        if (!run.results[i].success) continue;
        const auto& ex = run.examples[i];
        const RolloutMap clean = saliency_for(model, ex.image, config.rollout);
        const RolloutMap adv = saliency_for(model, run.results[i].image, config.rollout);
        const fs::path base = dir / "heatmaps" / name / file_stem(ex.id);
        render_heatmap(clean, ex.image, base.string() + "_clean.pgm");
        render_heatmap(adv, run.results[i].image, base.string() + "_adv.pgm");
        sal << name << ',' << ex.id << ',' << method_name(config.rollout.method) << ','
            << fixed6(saliency_iou(clean.cls_saliency, adv.cls_saliency)) << '\n';
        ++drawn;
      }
    }
    sal.close();

    stage = "manifest";
    nlohmann::json manifest;
    manifest["format"] = "protego-run 1";
    manifest["config"] = config_json(config);
    manifest["stage_seeds"] = nlohmann::json::object();
    for (const auto& [name, s] : seeds) manifest["stage_seeds"][name] = hex64(s);
    manifest["val_accuracy"] = fixed6(summary.val_accuracy);
    manifest["test_accuracy"] = fixed6(summary.test_accuracy);
    manifest["note"] = kToyFooter;
    manifest["files"] = file_hashes(dir);
    std::ofstream mf(dir / "manifest.json", std::ios::trunc | std::ios::binary);
    mf << manifest.dump(2) << '\n';
    say("wrote " + (dir / "results.csv").string());
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    std::error_code ec;
    fs::create_directories(config.out, ec);
    std::ofstream failed(config.out / "FAILED", std::ios::trunc);
    failed << stage << '\n' << e.what() << '\n';
    throw StageError(stage, e.what());
  }
  return summary;
}

}  // namespace protego
