// End-to-end checks on the shared toy model (built by the toy_model_* ctest
// fixtures). Usage: test_toy_model <toy dir>, where <toy dir> holds data/ and
// model.ckpt.
#include <gtest/gtest.h>

#include <filesystem>

#include "check.hpp"

using namespace protego;
namespace fs = std::filesystem;

namespace {

fs::path g_toy_dir = "toy";

struct Toy {
  ViTModel model;
  DatasetSplits data;
};

const Toy& toy() {
  static const Toy t{load_checkpoint(g_toy_dir / "model.ckpt"), load_image_sets(g_toy_dir / "data")};
  return t;
}

std::vector<LabeledImage> eval_set(std::size_t n) {
  std::vector<LabeledImage> v = toy().data.test;
  if (v.size() > n) v.resize(n);
  return v;
}

AttackRun attack(AttackFamily f, std::size_t n, std::optional<double> epsilon = std::nullopt) {
  AttackSpec s = AttackSpec::defaults(f, toy().model.config.num_layers);
  if (epsilon) s.epsilon = epsilon;
  return run_attack_set(toy().model, eval_set(n), s, derive_seed(0, "attack:" + attack_name(f)));
}

double distance(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

TEST(ToyModel, ValidationAccuracyAtLeast095) {
  const double acc = accuracy(toy().model, toy().data.val);
  RecordProperty("val_accuracy", std::to_string(acc));
  EXPECT_GE(acc, 0.95);
}

TEST(ToyModel, PatchPermutationChangesLogits) {
  const Tensor x = toy().data.test[0].image;
  const std::size_t g = toy().model.config.image_size / toy().model.config.patch_size, p = toy().model.config.patch_size;
  std::vector<double> swapped = x.to_vector();
  const std::size_t w = toy().model.config.image_size;
  // swap the top-left patch (background) with the centre one (shape)
  const std::size_t m = g / 2;
  for (std::size_t y = 0; y < p; ++y)
    for (std::size_t c = 0; c < p; ++c) std::swap(swapped[y * w + c], swapped[(m * p + y) * w + m * p + c]);
  ASSERT_NE(Tensor(x.shape(), swapped), x);
  const Tensor a = forward(toy().model, x).logits, b = forward(toy().model, Tensor(x.shape(), swapped)).logits;
  EXPECT_NE(a, b);
}

TEST(ToyAttacks, FgsmDropsAccuracyByThirtyPoints) {
  const AttackRun r = attack(AttackFamily::fgsm, 96);
  EXPECT_GE(r.clean_accuracy - r.attacked_accuracy, 0.30) << r.clean_accuracy << " -> " << r.attacked_accuracy;
}

TEST(ToyAttacks, BimSucceedsAtLeastAsOftenAsFgsm) {
  const AttackRun fgsm = attack(AttackFamily::fgsm, 96), bim = attack(AttackFamily::bim, 96);
  EXPECT_GE(bim.asr, fgsm.asr);
}

TEST(ToyAttacks, PgdAccuracyBelowTenPercent) {
  const AttackRun r = attack(AttackFamily::pgd, 96);
  EXPECT_LT(r.attacked_accuracy, 0.10);
  for (const auto& res : r.results) EXPECT_LE(res.linf, 0.0625 + 1e-9);
}

TEST(ToyAttacks, MimAtLeastBimAtEqualEpsilon) {
  const AttackRun bim = attack(AttackFamily::bim, 96), mim = attack(AttackFamily::mim, 96, 0.0625);
  EXPECT_GE(mim.asr, bim.asr);
}

TEST(ToyAttacks, CwL2BelowPgdL2) {
  const AttackRun cw = attack(AttackFamily::cw, 32), pgd = attack(AttackFamily::pgd, 32);
  ASSERT_GT(cw.successes, 0u);
  EXPECT_LT(cw.mean_l2, pgd.mean_l2);
}

// "Far below" is read as under half of PGD's L2.
TEST(ToyAttacks, PatchFoolLinfAbovePgdBudgetWithFarSmallerL2) {
  const AttackRun pf = attack(AttackFamily::patch_fool, 96), pgd = attack(AttackFamily::pgd, 96);
  ASSERT_GT(pf.successes, 0u);
  EXPECT_GT(pf.mean_linf, 0.0625);
  EXPECT_LT(pf.mean_l2, 0.5 * pgd.mean_l2) << pf.mean_l2 << " vs " << pgd.mean_l2;
  for (const auto& res : pf.results) EXPECT_LE(res.perturbed_patches, 1u);
}

TEST(ToyAttacks, EveryFamilyLowersAccuracy) {
  for (AttackFamily f : kAllAttacks) {
    const AttackRun r = attack(f, 32);
    EXPECT_LT(r.attacked_accuracy, r.clean_accuracy) << attack_name(f);
  }
}

TEST(ToyFeatures, PgdShiftExceedsIntraCleanDistance) {
  const AttackRun r = attack(AttackFamily::pgd, 48);
  const DetectionPairs pairs = detection_pairs(r);
  const std::size_t layer = toy().model.config.num_layers - 1;
  std::map<std::string, Tensor> clean;
  for (const auto& ex : pairs.clean) clean[ex.id] = extract_feature(toy().model, ex.image, layer, FeatureMode::cls);
  double shift = 0.0;
  for (const auto& a : pairs.adversarial)
    shift += distance(extract_feature(toy().model, a.image, layer, FeatureMode::cls), clean.at(a.id));
  shift /= static_cast<double>(pairs.adversarial.size());
  double intra = 0.0;
  std::size_t n = 0;
  for (auto i = clean.begin(); i != clean.end(); ++i)
    for (auto j = std::next(i); j != clean.end(); ++j, ++n) intra += distance(i->second, j->second);
  intra /= static_cast<double>(n);
  RecordProperty("pgd_shift", std::to_string(shift));
  RecordProperty("intra_clean", std::to_string(intra));
  EXPECT_GT(shift, intra);
}

TEST(ToyDetector, PgdHeldOutAccuracyAtLeast090) {
  const AttackRun r = attack(AttackFamily::pgd, static_cast<std::size_t>(-1));
  const DetectionPairs pairs = detection_pairs(r);
  const std::size_t layer = toy().model.config.num_layers - 1;
  const auto [train, test] =
      build_feature_dataset(toy().model, pairs.clean, pairs.adversarial, "pgd", layer, FeatureMode::cls, 0.5, 1);
  const LinearDetector det = train_detector(train, {}).detector;
  std::size_t hits = 0;
  for (const auto& rec : test.records) hits += predict(det, rec.feature) == rec.label;
  const double acc = static_cast<double>(hits) / static_cast<double>(test.records.size());
  RecordProperty("detector_accuracy", std::to_string(acc));
  EXPECT_GE(acc, 0.90);
}

TEST(ToyInterpret, PgdShiftsSaliency) {
  const AttackRun r = attack(AttackFamily::pgd, 32);
  double clean_vs_clean = 0.0, clean_vs_adv = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < r.results.size(); ++i) {
    if (!r.results[i].success) continue;
    const auto c1 = attention_rollout(forward(toy().model, r.examples[i].image));
    const auto c2 = attention_rollout(forward(toy().model, r.examples[i].image));
    const auto a = attention_rollout(forward(toy().model, r.results[i].image));
    clean_vs_clean += saliency_iou(c1.cls_saliency, c2.cls_saliency);
    clean_vs_adv += saliency_iou(c1.cls_saliency, a.cls_saliency);
    ++n;
  }
  ASSERT_GT(n, 0u);
  EXPECT_EQ(clean_vs_clean / static_cast<double>(n), 1.0);
  EXPECT_LT(clean_vs_adv / static_cast<double>(n), 1.0);
}

TEST(ToyInterpret, GradRolloutDependsOnClass) {
  const Tensor x = toy().data.test[0].image;
  const auto a = grad_attention_rollout(toy().model, x, 0), b = grad_attention_rollout(toy().model, x, 1);
  EXPECT_NE(a.cls_saliency, b.cls_saliency);
}

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  if (argc > 1) g_toy_dir = argv[1];
  return RUN_ALL_TESTS();
}
