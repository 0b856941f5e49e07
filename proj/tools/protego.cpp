// protego command line: one subcommand per pipeline stage plus `run` and `report`.

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "protego/protego.hpp"

namespace fs = std::filesystem;
using namespace protego;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = false) {
  cmd->add_option("--config", c.config, "experiment config file");
  cmd->add_option("--seed", c.seed, "global seed");
  auto* out = cmd->add_option("--out", c.out, "output path");
  if (out_required) out->required();
}

ExperimentConfig load_experiment(const Common& c) {
  ExperimentConfig e = c.config.empty() ? ExperimentConfig::from(Config{}) : ExperimentConfig::from(Config::load(c.config));
  if (c.seed) e.seed = *c.seed;
  return e;
}

Tensor read_image(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm" || ext == ".ppm") return netpbm::to_tensor(netpbm::read(path));
  return ptf::load(path);
}

std::vector<LabeledImage> pick_split(const DatasetSplits& s, const std::string& split) {
  if (split == "train") return s.train;
  if (split == "val") return s.val;
  if (split == "test") return s.test;
  throw ConfigError("unknown split '" + split + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial example detection for toy vision transformers"};
  app.require_subcommand(1);
  std::string stage = "cli";

  // make-data
  Common md;
  auto* make_data = app.add_subcommand("make-data", "generate or ingest the dataset and write its splits");
  add_common(make_data, md, true);

  // train-vit
  Common tv;
  std::string tv_data;
  std::optional<std::size_t> tv_epochs;
  std::optional<double> tv_lr;
  auto* train_vit = app.add_subcommand("train-vit", "train the classifier and write a checkpoint");
  add_common(train_vit, tv, true);
  train_vit->add_option("--data", tv_data, "image set directory from make-data (default: build from config)");
  train_vit->add_option("--epochs", tv_epochs);
  train_vit->add_option("--lr", tv_lr);

  // attack
  Common at;
  std::string at_ckpt, at_data, at_method, at_params, at_split = "test";
  std::size_t at_examples = 0;
  auto* attack = app.add_subcommand("attack", "craft adversarial examples for one attack family");
  add_common(attack, at, true);
  attack->add_option("--ckpt", at_ckpt)->required();
  attack->add_option("--data", at_data)->required();
  attack->add_option("--method", at_method, "pgd|fgsm|bim|mim|cw|patchfool")->required();
  attack->add_option("--params", at_params, "config file whose [attack.<method>] section overrides defaults");
  attack->add_option("--split", at_split);
  attack->add_option("--examples", at_examples, "attack only the first N examples (0: all)");

  // extract
  Common ex;
  std::string ex_ckpt, ex_clean, ex_adv, ex_mode = "cls", ex_split = "test";
  std::optional<std::size_t> ex_layer;
  double ex_fraction = 0.5;
  std::size_t ex_reference = 100;
  auto* extract = app.add_subcommand("extract", "extract CLS features and split them for detector training");
  add_common(extract, ex, true);
  extract->add_option("--ckpt", ex_ckpt)->required();
  extract->add_option("--clean", ex_clean, "image set directory")->required();
  extract->add_option("--adv", ex_adv, "attack output directory")->required();
  extract->add_option("--layer", ex_layer, "encoder layer (default: last)");
  extract->add_option("--mode", ex_mode, "cls|noise_diff");
  extract->add_option("--split", ex_split, "split of --clean that was attacked");
  extract->add_option("--split-fraction", ex_fraction);
  extract->add_option("--reference", ex_reference, "clean training images in the LID reference set");

  // train-detector
  Common td;
  std::string td_features;
  DetectorOptions td_opts;
  auto* train_det = app.add_subcommand("train-detector", "train the linear plugin detector");
  add_common(train_det, td, true);
  train_det->add_option("--features", td_features)->required();
  auto* td_lr = train_det->add_option("--lr", td_opts.lr);
  auto* td_mom = train_det->add_option("--momentum", td_opts.momentum);
  auto* td_ep = train_det->add_option("--epochs", td_opts.epochs);
  auto* td_bs = train_det->add_option("--batch-size", td_opts.batch_size);

  // evaluate
  Common ev;
  std::string ev_features, ev_detector, ev_baseline = "lid", ev_adv;
  std::size_t ev_k = 10;
  auto* evaluate = app.add_subcommand("evaluate", "score held-out features and write results rows");
  add_common(evaluate, ev, true);
  evaluate->add_option("--features", ev_features)->required();
  evaluate->add_option("--detector", ev_detector)->required();
  evaluate->add_option("--baseline", ev_baseline, "lid|none");
  evaluate->add_option("--adv", ev_adv, "attack output directory, for ASR and norm columns");
  evaluate->add_option("--k", ev_k, "LID neighbourhood size");

  // rollout
  Common ro;
  std::string ro_ckpt, ro_image, ro_method = "rollout", ro_fusion = "mean";
  bool ro_residual = false;
  std::optional<std::size_t> ro_class;
  auto* rollout = app.add_subcommand("rollout", "render an attention rollout heatmap");
  add_common(rollout, ro, true);
  rollout->add_option("--ckpt", ro_ckpt)->required();
  rollout->add_option("--image", ro_image, ".ptf, .pgm or .ppm")->required();
  rollout->add_option("--method", ro_method, "rollout|grad (alias grad_rollout)");
  rollout->add_option("--fusion", ro_fusion, "mean|max|min");
  rollout->add_flag("--residual", ro_residual);
  rollout->add_option("--class", ro_class, "target class for grad_rollout (default: predicted)");

  // run
  Common rn;
  auto* run = app.add_subcommand("run", "run the whole pipeline from a config");
  add_common(run, rn);

  // report
  Common rp;
  std::string rp_run;
  auto* rep = app.add_subcommand("report", "print the results table of a finished run");
  add_common(rep, rp);
  rep->add_option("--run", rp_run, "run directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*make_data) {
      stage = "config";
      ExperimentConfig e = load_experiment(md);
      stage = "ingest";
      const DatasetSplits s = ingest_dataset(e.data, derive_seed(e.seed, "data"));
      save_image_sets(md.out, s);
      std::cout << s.train.size() << " train, " << s.val.size() << " val, " << s.test.size() << " test -> " << md.out
                << '\n';
    } else if (*train_vit) {
      stage = "config";
      ExperimentConfig e = load_experiment(tv);
      if (tv_epochs) e.train.epochs = *tv_epochs;
      if (tv_lr) e.train.lr = *tv_lr;
      stage = "ingest";
      const DatasetSplits s =
          tv_data.empty() ? ingest_dataset(e.data, derive_seed(e.seed, "data")) : load_image_sets(tv_data);
      stage = "train";
      ViTModel model = init_vit(e.model, derive_seed(e.seed, "init"));
      TrainOptions opts = e.train;
      opts.seed = derive_seed(e.seed, "train");
      opts.validation = &s.val;
      opts.on_epoch = [](std::size_t epoch, double loss, double acc) {
        std::cout << "epoch " << epoch + 1 << " loss " << fixed6(loss) << " acc " << fixed6(acc) << std::endl;
      };
      train_classifier(model, s.train, opts);
      save_checkpoint(model, tv.out);
      std::cout << "val acc " << fixed6(accuracy(model, s.val)) << " -> " << tv.out << '\n';
    } else if (*attack) {
      stage = "config";
      Common with_params = at;
      if (!at_params.empty()) with_params.config = at_params;
      Config cfg = with_params.config.empty() ? Config{} : Config::load(with_params.config);
      const std::string family = attack_name(parse_attack(at_method));
      cfg.set("attacks", "families", family);
      ExperimentConfig e = ExperimentConfig::from(cfg);
      if (at.seed) e.seed = *at.seed;
      stage = "attack";
      const ViTModel model = load_checkpoint(at_ckpt);
      AttackSpec spec = e.attacks.front();
      if (spec.atten_select && *spec.atten_select >= model.config.num_layers) {
        spec.atten_select = AttackSpec::defaults(spec.family, model.config.num_layers).atten_select;
      }
      std::vector<LabeledImage> pool = pick_split(load_image_sets(at_data), at_split);
      if (at_examples > 0 && pool.size() > at_examples) pool.resize(at_examples);
      const AttackRun r = run_attack_set(model, pool, spec, derive_seed(e.seed, "attack:" + family));
      save_attack_run(r, at.out);
      std::cout << family << ": ASR " << fixed6(r.asr) << ", attacked acc " << fixed6(r.attacked_accuracy)
                << ", mean L2 " << fixed6(r.mean_l2) << " -> " << at.out << '\n';
    } else if (*extract) {
      stage = "config";
      ExperimentConfig e = load_experiment(ex);
      stage = "extract";
      const ViTModel model = load_checkpoint(ex_ckpt);
      const std::size_t layer = ex_layer.value_or(model.config.num_layers - 1);
      const DatasetSplits data = load_image_sets(ex_clean);
      const AdvSet adv = load_adv_set(ex_adv);
      std::vector<LabeledImage> attacked;
      std::set<std::string> ids;
      for (const auto& a : adv.images) ids.insert(a.id);
      std::vector<std::size_t> preds;
      for (const auto& c : pick_split(data, ex_split)) {
        if (!ids.count(c.id)) continue;
        attacked.push_back(c);
        preds.push_back(predict(model, c.image));
      }
      const DetectionPairs pairs = detection_pairs(attacked, preds, adv.images, adv.success);
      const std::string family = fs::path(ex_adv).filename().string();
      auto [train, test] = build_feature_dataset(model, pairs.clean, pairs.adversarial, family, layer,
                                                 parse_mode(ex_mode), ex_fraction,
                                                 derive_seed(e.seed, "features:" + family));
      save_feature_dataset(train, ex.out, "train");
      save_feature_dataset(test, ex.out, "test");
      save_reference(lid_reference_set(model, data.train, layer, ex_reference, derive_seed(e.seed, "lid")),
                     fs::path(ex.out) / "reference.ptf");
      std::cout << train.records.size() << " train, " << test.records.size() << " test records -> " << ex.out << '\n';
    } else if (*train_det) {
      stage = "config";
      ExperimentConfig e = load_experiment(td);
      DetectorOptions opts = e.detector;
      if (*td_lr) opts.lr = td_opts.lr;
      if (*td_mom) opts.momentum = td_opts.momentum;
      if (*td_ep) opts.epochs = td_opts.epochs;
      if (*td_bs) opts.batch_size = td_opts.batch_size;
      stage = "detect";
      const FeatureDataset train = load_feature_dataset(td_features, "train");
      opts.seed = derive_seed(e.seed, "detector:" + train.records.back().attack);
      const DetectorTraining t = train_detector(train, opts);
      save_detector(t.detector, td.out);
      std::cout << "final loss " << fixed6(t.loss_curve.back()) << " -> " << td.out << '\n';
    } else if (*evaluate) {
      stage = "evaluate";
      const FeatureDataset test = load_feature_dataset(ev_features, "test");
      const LinearDetector det = load_detector(ev_detector);
      ScoreSet scores;
      std::vector<std::vector<double>> clean_q, adv_q;
      for (const auto& r : test.records) {
        (r.label == 1 ? scores.positive : scores.negative).push_back(linear_output(det, r.feature.values()));
        (r.label == 1 ? adv_q : clean_q).push_back(r.feature.to_vector());
      }
      ResultRow row;
      row.attack = det.attack;
      row.layer = det.layer;
      row.model = "-";
      row.clean_acc = row.attacked_acc = row.asr = row.mean_l2 = row.mean_linf = std::nan("");
      if (!ev_adv.empty()) {
        const AdvSet adv = load_adv_set(ev_adv);
        std::size_t succ = 0, hits = 0;
        double l2 = 0.0, linf = 0.0;
        std::ifstream m(fs::path(ev_adv) / "manifest.csv");
        std::string line;
        std::getline(m, line);
        while (std::getline(m, line)) {
          std::vector<std::string> c;
          std::stringstream ss(line);
          for (std::string col; std::getline(ss, col, ',');) c.push_back(col);
          if (c.size() != 9) continue;
          hits += c[1] == c[3];
          if (c[2] == "1") {
            ++succ;
            l2 += std::stod(c[4]);
            linf += std::stod(c[5]);
          }
        }
        const std::size_t n = adv.images.size();
        row.attacked_acc = static_cast<double>(hits) / static_cast<double>(n);
        row.asr = asr(succ, n);
        row.mean_l2 = succ ? l2 / static_cast<double>(succ) : 0.0;
        row.mean_linf = succ ? linf / static_cast<double>(succ) : 0.0;
      }
      row.train_records = 0;
      row.test_records = test.records.size();
      std::vector<ResultRow> rows;
      row.detector = "protego";
      row.auc = auc(scores);
      rows.push_back(row);
      if (ev_baseline == "lid") {
        LidConfig lid;
        lid.k = ev_k;
        lid.reference = load_reference(fs::path(ev_features) / "reference.ptf");
        row.detector = "lid";
        row.auc = lid_auc(clean_q, adv_q, lid);
        rows.push_back(row);
      } else if (ev_baseline != "none") {
        throw ConfigError("unknown baseline '" + ev_baseline + "'");
      }
      write_results_csv(rows, ev.out);
      for (const auto& r : rows) std::cout << r.detector << " AUC " << fixed6(r.auc) << '\n';
    } else if (*rollout) {
      stage = "visualize";
      const ViTModel model = load_checkpoint(ro_ckpt);
      const Tensor image = read_image(ro_image);
      const HeadFusion fusion = parse_fusion(ro_fusion);
      RolloutMap map;
      if (ro_method == "grad" || ro_method == "grad_rollout") {
        map = grad_attention_rollout(model, image, ro_class.value_or(predict(model, image)), fusion);
      } else if (ro_method == "rollout") {
        map = attention_rollout(forward(model, image), fusion, ro_residual);
      } else {
        throw ConfigError("unknown rollout method '" + ro_method + "'");
      }
      fs::path target = ro.out;
      if (target.extension() != ".pgm") target = target / (fs::path(ro_image).stem().string() + "_" + ro_method + ".pgm");
      const auto [pgm, ppm] = render_heatmap(map, image, target);
      std::cout << pgm.string() << '\n' << ppm.string() << '\n';
    } else if (*run) {
      stage = "config";
      ExperimentConfig e = load_experiment(rn);
      if (!rn.out.empty()) e.out = rn.out;
      const RunSummary s = run_pipeline(e, &std::cout);
      std::cout << '\n' << report(s.dir);
    } else if (*rep) {
      stage = "report";
      std::cout << report(rp_run);
    }
  } catch (const StageError& e) {
    std::cerr << "protego: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "protego: stage " << stage << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
