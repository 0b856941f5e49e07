#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "protego/error.hpp"
#include "protego/parallel.hpp"
#include "protego/tensor.hpp"

namespace protego {

/// Attack success rate: successes / total.
inline double asr(std::size_t successes, std::size_t total) {
  if (total == 0) throw ContractError("asr: total must be positive");
  if (successes > total) throw ContractError("asr: successes exceed total");
  return static_cast<double>(successes) / static_cast<double>(total);
}

struct ScoreSet {
  std::vector<double> positive;  // adversarial
  std::vector<double> negative;  // clean
};

/// Rank-sum ROC AUC:
///   (sum of positive ranks - n_pos (n_pos + 1) / 2) / (n_pos n_neg)
/// with ranks 1..n over the pooled scores and tied scores sharing their mean
/// rank. Equal to P(pos > neg) + 0.5 P(pos == neg).
inline double auc(const ScoreSet& scores) {
  const std::size_t np = scores.positive.size(), nn = scores.negative.size();
  if (np == 0 || nn == 0) throw ContractError("auc: both classes need at least one score");
  struct Item {
    double score;
    bool positive;
  };
  std::vector<Item> pooled;
  pooled.reserve(np + nn);
  for (double s : scores.positive) pooled.push_back({s, true});
  for (double s : scores.negative) pooled.push_back({s, false});
  for (const Item& it : pooled) {
    if (!std::isfinite(it.score)) throw ContractError("auc: non-finite score");
  }
  std::sort(pooled.begin(), pooled.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  // Ranks are multiples of 1/2, so doubling them keeps the sum exact in integers.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j].score == pooled[i].score) ++j;
    const std::uint64_t twice_mid = static_cast<std::uint64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (pooled[k].positive) twice_rank_sum += twice_mid;
    i = j;
  }
  const std::uint64_t twice_offset = static_cast<std::uint64_t>(np) * (np + 1);
  return static_cast<double>(twice_rank_sum - twice_offset) / (2.0 * static_cast<double>(np) * static_cast<double>(nn));
}

struct PerturbationNorms {
  double l2 = 0.0;
  double linf = 0.0;
  std::size_t perturbed_patches = 0;
};

/// L2 and L-infinity of x_adv - x, plus the number of patch_size x patch_size
/// patches (over all channels) containing at least one changed value.
inline PerturbationNorms lp_norms(const Tensor& x, const Tensor& x_adv, std::size_t patch_size) {
  if (x.shape() != x_adv.shape()) {
    throw DimensionError("lp_norms: shape mismatch " + to_string(x.shape()) + " vs " + to_string(x_adv.shape()));
  }
  if (x.rank() != 3 || patch_size == 0 || x.dim(1) % patch_size != 0 || x.dim(2) % patch_size != 0) {
    throw DimensionError("lp_norms: expected [C,H,W] images divisible by the patch size, got " + to_string(x.shape()));
  }
  PerturbationNorms out;
  double sq = 0.0;
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), gw = w / patch_size;
  std::vector<char> touched((h / patch_size) * gw, 0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const std::size_t i = (ch * h + y) * w + xx;
        const double d = x_adv[i] - x[i];
        sq += d * d;
        out.linf = std::max(out.linf, std::abs(d));
        if (d != 0.0) touched[(y / patch_size) * gw + xx / patch_size] = 1;
      }
    }
  }
  out.l2 = std::sqrt(sq);
  out.perturbed_patches = static_cast<std::size_t>(std::count(touched.begin(), touched.end(), 1));
  return out;
}

// ---------------------------------------------------------------------------
// Local intrinsic dimensionality baseline

struct LidConfig {
  std::size_t k = 10;
  /// Clean reference features, one row each; never scored.
  std::vector<std::vector<double>> reference;

  void validate() const {
    if (k < 2) throw ConfigError("LID: k must be at least 2");
    if (reference.size() <= k) {
      throw ConfigError("LID: reference set of " + std::to_string(reference.size()) + " points must exceed k=" +
                        std::to_string(k));
    }
    for (const auto& r : reference) {
      if (r.size() != reference.front().size()) throw DimensionError("LID: ragged reference set");
    }
  }
};

inline constexpr double kLidDistanceFloor = 1e-12;

/// Maximum-likelihood LID from the k smallest distances r_1 <= ... <= r_k:
///   -(1/k sum_i ln(r_i / r_k))^-1.
/// Distances are floored at 1e-12; when all k distances coincide the estimate
/// is capped at 1e12 instead of dividing by zero.
inline double lid_from_distances(std::vector<double> distances, std::size_t k) {
  if (k < 1 || distances.size() < k) throw ContractError("LID: need at least k distances");
  std::partial_sort(distances.begin(), distances.begin() + static_cast<std::ptrdiff_t>(k), distances.end());
  const double rk = std::max(distances[k - 1], kLidDistanceFloor);
  double mean_log = 0.0;
  for (std::size_t i = 0; i < k; ++i) mean_log += std::log(std::max(distances[i], kLidDistanceFloor) / rk);
  mean_log /= static_cast<double>(k);
  return -1.0 / std::min(mean_log, -1e-12);
}

inline double lid_score(std::span<const double> feature, const LidConfig& cfg) {
  cfg.validate();
  if (feature.size() != cfg.reference.front().size()) {
    throw DimensionError("LID: feature of length " + std::to_string(feature.size()) + " vs reference dimension " +
                         std::to_string(cfg.reference.front().size()));
  }
  std::vector<double> dist;
  dist.reserve(cfg.reference.size());
  for (const auto& r : cfg.reference) {
    double s = 0.0;
    for (std::size_t j = 0; j < r.size(); ++j) s += (feature[j] - r[j]) * (feature[j] - r[j]);
    dist.push_back(std::sqrt(s));
  }
  return lid_from_distances(std::move(dist), cfg.k);
}

/// AUC of LID scores: adversarial queries are positives, held-out clean
/// queries negatives. The queries must not be part of cfg.reference.
inline double lid_auc(const std::vector<std::vector<double>>& clean, const std::vector<std::vector<double>>& adv,
                      const LidConfig& cfg) {
  cfg.validate();
  ScoreSet s;
  s.negative.resize(clean.size());
  s.positive.resize(adv.size());
  parallel_for(clean.size(), [&](std::size_t i) { s.negative[i] = lid_score(clean[i], cfg); });
  parallel_for(adv.size(), [&](std::size_t i) { s.positive[i] = lid_score(adv[i], cfg); });
  return auc(s);
}

}  // namespace protego
