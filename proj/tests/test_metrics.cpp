#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "check.hpp"

using namespace protego;

namespace {

double brute_force_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  return wins / static_cast<double>(pos.size() * neg.size());
}

std::vector<double> gaussian_point(Rng& rng, std::size_t d, double offset = 0.0) {
  std::vector<double> v(d);
  for (double& x : v) x = rng.normal() + offset;
  return v;
}

LidConfig gaussian_reference(std::size_t n, std::size_t d, std::uint64_t seed, std::size_t k = 10) {
  Rng rng(seed);
  LidConfig cfg;
  cfg.k = k;
  for (std::size_t i = 0; i < n; ++i) cfg.reference.push_back(gaussian_point(rng, d));
  return cfg;
}

}  // namespace

TEST(Asr, Ratios) {
  EXPECT_EQ(asr(0, 7), 0.0);
  EXPECT_EQ(asr(7, 7), 1.0);
  EXPECT_EQ(asr(3, 12), 0.25);
  EXPECT_THROW(asr(0, 0), ContractError);
  EXPECT_THROW(asr(5, 4), ContractError);
}

TEST(Auc, PerfectSeparation) { EXPECT_EQ(auc({{0.9, 0.8, 0.7}, {0.1, 0.2}}), 1.0); }

TEST(Auc, HandExample) {
  EXPECT_EQ(auc({{0.9, 0.4}, {0.5, 0.3}}), 0.75);
  EXPECT_EQ(brute_force_auc({0.9, 0.4}, {0.5, 0.3}), 0.75);
}

TEST(Auc, IdenticalMultisetsGiveHalf) {
  EXPECT_EQ(auc({{0.2, 0.5, 0.5, 0.9}, {0.9, 0.5, 0.2, 0.5}}), 0.5);
  EXPECT_EQ(auc({{1.0}, {1.0}}), 0.5);
}

TEST(Auc, EmptyClassIsContractError) {
  EXPECT_THROW(auc({{}, {0.1}}), ContractError);
  EXPECT_THROW(auc({{0.1}, {}}), ContractError);
}

TEST(Auc, MatchesBruteForceOnRandomSets) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t np = 1 + rng.index(50), nn = 1 + rng.index(50);
    std::vector<double> pos(np), neg(nn);
    // coarse grid so ties are common
    for (double& v : pos) v = static_cast<double>(rng.index(8)) / 7.0;
    for (double& v : neg) v = trial % 2 ? static_cast<double>(rng.index(8)) / 7.0 : rng.uniform();
    EXPECT_EQ(auc({pos, neg}), brute_force_auc(pos, neg)) << "trial " << trial;
  }
}

TEST(Auc, SymmetryIsExact) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> a(1 + rng.index(30)), b(1 + rng.index(30));
    for (double& v : a) v = static_cast<double>(rng.index(5));
    for (double& v : b) v = static_cast<double>(rng.index(5));
    EXPECT_EQ(auc({a, b}) + auc({b, a}), 1.0);
  }
}

TEST(Auc, InvariantUnderMonotoneTransforms) {
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> a(1 + rng.index(30)), b(1 + rng.index(30));
    for (double& v : a) v = rng.uniform(-3, 3);
    for (double& v : b) v = rng.uniform(-3, 3);
    auto map = [](std::vector<double> v, double (*f)(double)) {
      for (double& x : v) x = f(x);
      return v;
    };
    const double base = auc({a, b});
    EXPECT_EQ(auc({map(a, [](double x) { return std::exp(x); }), map(b, [](double x) { return std::exp(x); })}), base);
    EXPECT_EQ(auc({map(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }),
                   map(b, [](double x) { return 1.0 / (1.0 + std::exp(-x)); })}),
              base);
    EXPECT_EQ(auc({map(a, [](double x) { return 3.0 * x * x * x + 1.0; }),
                   map(b, [](double x) { return 3.0 * x * x * x + 1.0; })}),
              base);
  }
}

TEST(LpNorms, IdenticalImagesAreZero) {
  Rng rng(4);
  const Tensor x = check::random_tensor({1, 8, 8}, rng, 0, 1);
  const PerturbationNorms n = lp_norms(x, x, 4);
  EXPECT_EQ(n.l2, 0.0);
  EXPECT_EQ(n.linf, 0.0);
  EXPECT_EQ(n.perturbed_patches, 0u);
}

TEST(LpNorms, SinglePixel) {
  std::vector<double> v(64, 0.5);
  const Tensor x({1, 8, 8}, v);
  v[8 * 5 + 6] += 0.1;
  const PerturbationNorms n = lp_norms(x, Tensor({1, 8, 8}, v), 4);
  EXPECT_NEAR(n.l2, 0.1, 1e-15);
  EXPECT_NEAR(n.linf, 0.1, 1e-15);
  EXPECT_EQ(n.perturbed_patches, 1u);
}

TEST(LpNorms, MatchesDirectRecomputation) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor x = check::random_tensor({2, 8, 8}, rng, 0, 1);
    std::vector<double> v = x.to_vector();
    std::set<std::size_t> patches;
    for (int k = 0; k < 5; ++k) {
      const std::size_t i = rng.index(v.size());
      v[i] += rng.uniform(-0.2, 0.2);
      const std::size_t pix = i % 64;
      patches.insert((pix / 8 / 4) * 2 + (pix % 8) / 4);
    }
    const PerturbationNorms n = lp_norms(x, Tensor(x.shape(), v), 4);
    double sq = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      sq += (v[i] - x[i]) * (v[i] - x[i]);
      mx = std::max(mx, std::abs(v[i] - x[i]));
    }
    EXPECT_NEAR(n.l2, std::sqrt(sq), 1e-12);
    EXPECT_EQ(n.linf, mx);
    EXPECT_EQ(n.perturbed_patches, patches.size());
  }
}

TEST(LpNorms, ShapeMismatchIsDimensionError) {
  EXPECT_THROW(lp_norms(Tensor({1, 8, 8}), Tensor({1, 4, 4}), 4), DimensionError);
}

TEST(Lid, HandEvaluatedEstimate) {
  EXPECT_NEAR(lid_from_distances({1.0, std::numbers::e}, 2), 2.0, 1e-12);
  EXPECT_NEAR(lid_from_distances({std::numbers::e, 5.0, 1.0}, 2), 2.0, 1e-12);
}

TEST(Lid, TightClusterFarQueryIsLarge) {
  Rng rng(6);
  LidConfig cfg;
  cfg.k = 5;
  for (int i = 0; i < 20; ++i) cfg.reference.push_back({rng.uniform(-1e-3, 1e-3), rng.uniform(-1e-3, 1e-3)});
  const std::vector<double> far = {100.0, 100.0};
  const std::vector<double> near = {0.0, 0.0};
  EXPECT_GT(lid_score(far, cfg), 1e4);
  EXPECT_GT(lid_score(far, cfg), lid_score(near, cfg));
}

TEST(Lid, DuplicatePointsAreFloored) {
  LidConfig cfg;
  cfg.k = 2;
  cfg.reference = {{0.0}, {0.0}, {0.0}};
  const std::vector<double> q = {0.0};
  const double s = lid_score(q, cfg);
  EXPECT_TRUE(std::isfinite(s));
  EXPECT_GE(s, 0.0);
}

TEST(Lid, InvariantUnderIsometries) {
  const std::size_t d = 3;
  LidConfig cfg = gaussian_reference(60, d, 7);
  Rng rng(8);
  const auto q = gaussian_point(rng, d);
  // rotation about the z axis followed by a rotation about x, then a shift
  const double a = 0.7, b = -1.1;
  auto iso = [&](std::vector<double> p) {
    const double x = std::cos(a) * p[0] - std::sin(a) * p[1], y = std::sin(a) * p[0] + std::cos(a) * p[1];
    const double y2 = std::cos(b) * y - std::sin(b) * p[2], z2 = std::sin(b) * y + std::cos(b) * p[2];
    return std::vector<double>{x + 5.0, y2 - 2.0, z2 + 0.5};
  };
  LidConfig moved = cfg;
  for (auto& r : moved.reference) r = iso(r);
  EXPECT_NEAR(lid_score(iso(q), moved), lid_score(q, cfg), 1e-9);
}

TEST(Lid, NullDistributionAucNearHalf) {
  const std::size_t d = 8;
  const LidConfig cfg = gaussian_reference(100, d, 9);
  Rng rng(10);
  std::vector<std::vector<double>> clean, adv;
  for (int i = 0; i < 200; ++i) clean.push_back(gaussian_point(rng, d));
  for (int i = 0; i < 200; ++i) adv.push_back(gaussian_point(rng, d));
  EXPECT_NEAR(lid_auc(clean, adv, cfg), 0.5, 0.1);
}

TEST(Lid, FarOffsetAucApproachesOne) {
  const std::size_t d = 8;
  const LidConfig cfg = gaussian_reference(100, d, 11);
  Rng rng(12);
  std::vector<std::vector<double>> clean, adv;
  for (int i = 0; i < 100; ++i) clean.push_back(gaussian_point(rng, d));
  for (int i = 0; i < 100; ++i) adv.push_back(gaussian_point(rng, d, 20.0));
  EXPECT_GE(lid_auc(clean, adv, cfg), 0.99);
}

TEST(Lid, ConfigErrors) {
  LidConfig cfg = gaussian_reference(10, 3, 13, 10);
  const std::vector<double> q = {0, 0, 0};
  EXPECT_THROW(lid_score(q, cfg), ConfigError);  // k >= reference size
  cfg.k = 1;
  EXPECT_THROW(lid_score(q, cfg), ConfigError);
  cfg.k = 3;
  const std::vector<double> wrong = {0, 0};
  EXPECT_THROW(lid_score(wrong, cfg), DimensionError);
}
