#pragma once

// Plugin detector: one linear layer over the flattened feature, with a
// sigmoid on top for the loss and the score. Ranking by score equals ranking
// by the raw linear output, so AUC does not depend on the sigmoid.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/features.hpp"
#include "protego/ptf.hpp"
#include "protego/random.hpp"
#include "protego/tensor.hpp"

namespace protego {

struct DetectorOptions {
  double lr = 0.01;
  double momentum = 0.9;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

struct LinearDetector {
  std::vector<double> weights;  // m*n feature weights followed by the bias
  Shape input_shape;
  DetectorOptions training;
  std::string attack;
  std::size_t layer = 0;

  std::size_t input_size() const { return numel(input_shape); }
};

inline constexpr double kLogClamp = 1e-12;

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// theta . reshape(f, [1, m*n]) + bias.
inline double linear_output(const LinearDetector& det, std::span<const double> feature) {
  if (feature.size() != det.input_size() || det.weights.size() != det.input_size() + 1) {
    throw DimensionError("detector: feature of size " + std::to_string(feature.size()) + " vs input shape " +
                         to_string(det.input_shape));
  }
  double z = det.weights.back();
  for (std::size_t j = 0; j < feature.size(); ++j) z += det.weights[j] * feature[j];
  return z;
}

inline double score(const LinearDetector& det, const Tensor& feature) {
  if (numel(feature.shape()) != det.input_size()) {
    throw DimensionError("detector: feature shape " + to_string(feature.shape()) + " does not match " +
                         to_string(det.input_shape));
  }
  return sigmoid(linear_output(det, feature.values()));
}

/// 1 (adversarial) iff score >= threshold.
inline int predict(const LinearDetector& det, const Tensor& feature, double threshold = 0.5) {
  return score(det, feature) >= threshold ? 1 : 0;
}

/// Mean binary cross-entropy with logs clamped at 1e-12:
///   -1/N sum [y log(p) + (1 - y) log(1 - p)].
inline double bce_loss(std::span<const double> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || predictions.empty()) throw DimensionError("bce_loss: size mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = predictions[i];
    total += labels[i] * std::log(std::max(p, kLogClamp)) + (1 - labels[i]) * std::log(std::max(1.0 - p, kLogClamp));
  }
  return -total / static_cast<double>(predictions.size());
}

inline double dataset_loss(const LinearDetector& det, const std::vector<FeatureRecord>& records) {
  std::vector<double> p;
  std::vector<int> y;
  for (const auto& r : records) {
    p.push_back(score(det, r.feature));
    y.push_back(r.label);
  }
  return bce_loss(p, y);
}

/// Gradient of the mean BCE over records with respect to [weights, bias].
inline std::vector<double> bce_gradient(const LinearDetector& det, const std::vector<const FeatureRecord*>& batch) {
  std::vector<double> g(det.weights.size(), 0.0);
  for (const FeatureRecord* r : batch) {
    const double err = sigmoid(linear_output(det, r->feature.values())) - r->label;
    for (std::size_t j = 0; j + 1 < g.size(); ++j) g[j] += err * r->feature[j];
    g.back() += err;
  }
  for (double& v : g) v /= static_cast<double>(batch.size());
  return g;
}

/// One momentum step: v <- beta v + (1 - beta) grad, theta <- theta - lr v.
inline void sgdm_step(std::vector<double>& theta, std::vector<double>& velocity, std::span<const double> grad,
                      double lr, double beta) {
  for (std::size_t j = 0; j < theta.size(); ++j) {
    velocity[j] = beta * velocity[j] + (1.0 - beta) * grad[j];
    theta[j] -= lr * velocity[j];
  }
}

struct DetectorTraining {
  LinearDetector detector;
  std::vector<double> loss_curve;  // mean training BCE after each epoch
};

/// Zero-initialized weights; mini-batches reshuffled each epoch from the seed.
inline DetectorTraining train_detector(const FeatureDataset& train, const DetectorOptions& options) {
  if (train.count(0) == 0 || train.count(1) == 0) {
    throw DataError("train_detector: training set must contain clean and adversarial records");
  }
  if (options.batch_size == 0 || options.epochs == 0) throw ConfigError("train_detector: batch_size and epochs must be positive");
  DetectorTraining out;
  LinearDetector& det = out.detector;
  det.input_shape = train.records.front().feature.shape();
  for (const auto& r : train.records) {
    if (r.feature.shape() != det.input_shape) throw DimensionError("train_detector: ragged feature shapes");
  }
  det.weights.assign(det.input_size() + 1, 0.0);
  det.training = options;
  det.layer = train.layer;
  for (const auto& r : train.records)
    if (r.label == 1) {
      det.attack = r.attack;
      break;
    }
  std::vector<double> velocity(det.weights.size(), 0.0);
  std::vector<std::size_t> order(train.records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    Rng rng(derive_seed(options.seed, epoch));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      std::vector<const FeatureRecord*> batch;
      for (std::size_t b = start; b < std::min(order.size(), start + options.batch_size); ++b)
        batch.push_back(&train.records[order[b]]);
      const auto grad = bce_gradient(det, batch);
      sgdm_step(det.weights, velocity, grad, options.lr, options.momentum);
    }
    out.loss_curve.push_back(dataset_loss(det, train.records));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detector files: UTF-8 metadata lines up to "end", then one PTF1 blob with
// the [m*n + 1] weight vector.

inline std::string encode_detector(const LinearDetector& det) {
  std::ostringstream meta;
  meta.precision(17);
  meta << "PROTEGO-DETECTOR 1\n";
  meta << "input_shape";
  for (std::size_t d : det.input_shape) meta << ' ' << d;
  meta << "\nlr " << det.training.lr << "\nmomentum " << det.training.momentum << "\nepochs " << det.training.epochs
       << "\nbatch_size " << det.training.batch_size << "\nseed " << det.training.seed << "\nattack "
       << (det.attack.empty() ? "-" : det.attack) << "\nlayer " << det.layer << "\nend\n";
  return meta.str() + ptf::encode(Tensor({det.weights.size()}, det.weights));
}

inline LinearDetector decode_detector(std::string_view bytes) {
  std::size_t pos = 0;
  auto next_line = [&] {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError("detector: truncated metadata");
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return line;
  };
  if (next_line() != "PROTEGO-DETECTOR 1") throw FormatError("detector: bad magic");
  LinearDetector det;
  for (std::string line = next_line(); line != "end"; line = next_line()) {
    std::istringstream in(line);
    std::string key;
    in >> key;
    if (key == "input_shape") {
      for (std::size_t d; in >> d;) det.input_shape.push_back(d);
    } else if (key == "lr") in >> det.training.lr;
    else if (key == "momentum") in >> det.training.momentum;
    else if (key == "epochs") in >> det.training.epochs;
    else if (key == "batch_size") in >> det.training.batch_size;
    else if (key == "seed") in >> det.training.seed;
    else if (key == "attack") {
      in >> det.attack;
      if (det.attack == "-") det.attack.clear();
    } else if (key == "layer") in >> det.layer;
    else throw FormatError("detector: unknown metadata key '" + key + "'");
    if (in.fail() && !in.eof()) throw FormatError("detector: bad value in '" + line + "'");
  }
  const Tensor w = ptf::decode(bytes.substr(pos));
  det.weights = w.to_vector();
  if (det.input_shape.empty() || det.weights.size() != det.input_size() + 1) {
    throw FormatError("detector: weight count does not match input shape");
  }
  return det;
}

inline void save_detector(const LinearDetector& det, const std::filesystem::path& path) {
  ptf::write_file_bytes(path, encode_detector(det));
}

inline LinearDetector load_detector(const std::filesystem::path& path) {
  return decode_detector(ptf::read_file_bytes(path));
}

}  // namespace protego
