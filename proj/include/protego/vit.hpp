#pragma once

// Toy Vision Transformer: patchify -> linear patch embedding -> prepend CLS
// -> add learned 1-D positional embedding -> L pre-norm encoder blocks ->
// linear head on the final CLS row. There is no final LayerNorm: the head reads
// the CLS row of the last block output directly.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/parallel.hpp"
#include "protego/ptf.hpp"
#include "protego/random.hpp"
#include "protego/tensor.hpp"

namespace protego {

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 64;
  std::size_t num_heads = 4;
  std::size_t num_layers = 4;
  std::size_t mlp_hidden = 128;
  std::size_t num_classes = 3;
  double dropout_rate = 0.0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t head_dim() const { return embed_dim / num_heads; }

  void validate() const {
    if (image_size == 0 || channels == 0 || patch_size == 0 || embed_dim == 0 || num_heads == 0 ||
        num_layers == 0 || mlp_hidden == 0 || num_classes == 0) {
      throw ConfigError("ViTConfig: all sizes must be positive");
    }
    if (image_size % patch_size != 0) {
      throw ConfigError("ViTConfig: patch_size " + std::to_string(patch_size) + " does not divide image_size " +
                        std::to_string(image_size));
    }
    if (embed_dim % num_heads != 0) {
      throw ConfigError("ViTConfig: num_heads " + std::to_string(num_heads) + " does not divide embed_dim " +
                        std::to_string(embed_dim));
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("ViTConfig: dropout_rate must be in [0,1)");
  }

  friend bool operator==(const ViTConfig&, const ViTConfig&) = default;
};

struct EncoderLayer {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w1, b1, w2, b2;
};

struct ViTModel {
  ViTConfig config;
  Tensor patch_weight;  // [patch_dim, d]
  Tensor patch_bias;    // [d]
  Tensor cls_token;     // [1, d]
  Tensor pos_embedding; // [tokens, d]
  std::vector<EncoderLayer> layers;
  Tensor head_weight;   // [d, classes]
  Tensor head_bias;     // [classes]

  /// Calls fn(name, tensor) for every parameter in a fixed order.
  template <class Fn>
  void visit(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <class Fn>
  void visit(Fn&& fn) const {
    visit_impl(*this, fn);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
  }

 private:
  template <class Self, class Fn>
  static void visit_impl(Self& m, Fn& fn) {
    fn(std::string("patch.weight"), m.patch_weight);
    fn(std::string("patch.bias"), m.patch_bias);
    fn(std::string("cls_token"), m.cls_token);
    fn(std::string("pos_embedding"), m.pos_embedding);
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
      auto& l = m.layers[i];
      const std::string p = "layer" + std::to_string(i) + ".";
      fn(p + "ln1.gamma", l.ln1_gamma);
      fn(p + "ln1.beta", l.ln1_beta);
      fn(p + "attn.wq", l.wq);
      fn(p + "attn.bq", l.bq);
      fn(p + "attn.wk", l.wk);
      fn(p + "attn.bk", l.bk);
      fn(p + "attn.wv", l.wv);
      fn(p + "attn.bv", l.bv);
      fn(p + "attn.wo", l.wo);
      fn(p + "attn.bo", l.bo);
      fn(p + "ln2.gamma", l.ln2_gamma);
      fn(p + "ln2.beta", l.ln2_beta);
      fn(p + "mlp.w1", l.w1);
      fn(p + "mlp.b1", l.b1);
      fn(p + "mlp.w2", l.w2);
      fn(p + "mlp.b2", l.b2);
    }
    fn(std::string("head.weight"), m.head_weight);
    fn(std::string("head.bias"), m.head_bias);
  }
};

/// Parameter shapes dictated by a config, in visit order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ViTConfig& c) {
  std::vector<std::pair<std::string, Shape>> out;
  const std::size_t d = c.embed_dim;
  out.emplace_back("patch.weight", Shape{c.patch_dim(), d});
  out.emplace_back("patch.bias", Shape{d});
  out.emplace_back("cls_token", Shape{1, d});
  out.emplace_back("pos_embedding", Shape{c.num_tokens(), d});
  for (std::size_t i = 0; i < c.num_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gamma", Shape{d});
    out.emplace_back(p + "ln1.beta", Shape{d});
    for (const char* w : {"q", "k", "v", "o"}) {
      out.emplace_back(p + "attn.w" + w, Shape{d, d});
      out.emplace_back(p + "attn.b" + w, Shape{d});
    }
    out.emplace_back(p + "ln2.gamma", Shape{d});
    out.emplace_back(p + "ln2.beta", Shape{d});
    out.emplace_back(p + "mlp.w1", Shape{d, c.mlp_hidden});
    out.emplace_back(p + "mlp.b1", Shape{c.mlp_hidden});
    out.emplace_back(p + "mlp.w2", Shape{c.mlp_hidden, d});
    out.emplace_back(p + "mlp.b2", Shape{d});
  }
  out.emplace_back("head.weight", Shape{d, c.num_classes});
  out.emplace_back("head.bias", Shape{c.num_classes});
  return out;
}

/// Truncated-normal(0.02) weights and positional embedding; zero biases and
/// CLS token; unit LayerNorm gains.
inline ViTModel init_vit(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  ViTModel m;
  m.config = config;
  m.layers.resize(config.num_layers);
  const auto layout = parameter_layout(config);
  Rng rng(seed);
  std::size_t i = 0;
  m.visit([&](const std::string& name, Tensor& t) {
    const Shape& shape = layout[i++].second;
    const auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with("gamma")) {
      t = Tensor::filled(shape, 1.0);
    } else if (shape.size() == 2 && name != "cls_token") {
      std::vector<double> v(numel(shape));
      for (double& x : v) x = rng.truncated_normal(0.02);
      t = Tensor(shape, std::move(v));
    } else {
      t = Tensor(shape);
    }
  });
  return m;
}

/// Splits a [C, H, W] image into [num_patches, C*p*p] rows. Patches are ordered
/// row-major over the patch grid; inside a patch, values are ordered by
/// channel, then row, then column.
inline std::vector<std::size_t> patch_indices(std::size_t channels, std::size_t size, std::size_t patch) {
  const std::size_t grid = size / patch;
  std::vector<std::size_t> idx;
  idx.reserve(channels * size * size);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            idx.push_back((c * size + gy * patch + y) * size + gx * patch + x);
  return idx;
}

inline Tensor patchify(const Tensor& image, std::size_t patch_size) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    throw DimensionError("patchify: expected a square [C,H,W] image, got " + to_string(image.shape()));
  }
  const std::size_t c = image.dim(0), size = image.dim(1);
  if (patch_size == 0 || size % patch_size != 0) {
    throw ConfigError("patchify: patch_size " + std::to_string(patch_size) + " does not divide " +
                      std::to_string(size));
  }
  const std::size_t grid = size / patch_size;
  return gather(image, patch_indices(c, size, patch_size), {grid * grid, c * patch_size * patch_size});
}

struct ForwardOptions {
  /// Record onto this tape. Track the image by passing tape->leaf(image).
  Tape* tape = nullptr;
  /// Register parameters as leaves (needed for training gradients only).
  bool parameter_leaves = false;
  /// Enables dropout when config.dropout_rate > 0.
  Rng* dropout_rng = nullptr;
};

struct ForwardTrace {
  Tensor logits;                               // [classes]
  std::vector<Tensor> attention;               // per layer, values [heads, T, T]
  std::vector<std::vector<Tensor>> head_maps;  // per layer and head, [T, T] (tape nodes when tracked)
  std::vector<Tensor> tokens;                  // per layer output [T, d]
  Tensor cls;                                  // [d], row 0 of tokens.back()
  std::vector<Tensor> parameters;              // leaves in visit order, when requested
};

namespace detail {

inline Tensor dropout(const Tensor& x, double rate, Rng* rng) {
  if (!rng || rate <= 0.0) return x;
  std::vector<double> mask(x.size());
  const double keep = 1.0 / (1.0 - rate);
  for (double& m : mask) m = rng->uniform() < rate ? 0.0 : keep;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace detail

inline ForwardTrace forward(const ViTModel& model, const Tensor& image, const ForwardOptions& options = {}) {
  const ViTConfig& cfg = model.config;
  if (image.shape() != Shape{cfg.channels, cfg.image_size, cfg.image_size}) {
    throw DimensionError("forward: image shape " + to_string(image.shape()) + " does not match config [" +
                         std::to_string(cfg.channels) + "," + std::to_string(cfg.image_size) + "," +
                         std::to_string(cfg.image_size) + "]");
  }
  ForwardTrace trace;
  ViTModel m = model;  // shallow: tensors share storage
  if (options.tape && options.parameter_leaves) {
    m.visit([&](const std::string&, Tensor& t) {
      t = options.tape->leaf(t);
      trace.parameters.push_back(t);
    });
  }
  const double rate = cfg.dropout_rate;
  const std::size_t d = cfg.embed_dim, heads = cfg.num_heads, dk = cfg.head_dim(), tokens = cfg.num_tokens();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  Tensor patches = patchify(image, cfg.patch_size);
  Tensor embedded = add_rowwise(matmul(patches, m.patch_weight), m.patch_bias);
  Tensor x = add(concat({m.cls_token, embedded}, 0), m.pos_embedding);

  for (const EncoderLayer& layer : m.layers) {
    Tensor h = layer_norm(x, layer.ln1_gamma, layer.ln1_beta);
    Tensor q = add_rowwise(matmul(h, layer.wq), layer.bq);
    Tensor k = add_rowwise(matmul(h, layer.wk), layer.bk);
    Tensor v = add_rowwise(matmul(h, layer.wv), layer.bv);
    std::vector<Tensor> outputs, maps;
    std::vector<double> stacked;
    stacked.reserve(heads * tokens * tokens);
    for (std::size_t hd = 0; hd < heads; ++hd) {
      Tensor qh = slice(q, 1, hd * dk, (hd + 1) * dk);
      Tensor kh = slice(k, 1, hd * dk, (hd + 1) * dk);
      Tensor vh = slice(v, 1, hd * dk, (hd + 1) * dk);
      Tensor a = softmax_lastdim(scale(matmul(qh, transpose(kh)), inv_sqrt_dk));
      stacked.insert(stacked.end(), a.values().begin(), a.values().end());
      maps.push_back(a);
      outputs.push_back(matmul(a, vh));
    }
    Tensor attn = add_rowwise(matmul(concat(outputs, 1), layer.wo), layer.bo);
    x = add(x, detail::dropout(attn, rate, options.dropout_rng));
    Tensor h2 = layer_norm(x, layer.ln2_gamma, layer.ln2_beta);
    Tensor hidden = gelu(add_rowwise(matmul(h2, layer.w1), layer.b1));
    Tensor mlp = add_rowwise(matmul(hidden, layer.w2), layer.b2);
    x = add(x, detail::dropout(mlp, rate, options.dropout_rng));
    trace.attention.emplace_back(Shape{heads, tokens, tokens}, std::move(stacked));
    trace.head_maps.push_back(std::move(maps));
    trace.tokens.push_back(x);
  }
  Tensor cls = slice(x, 0, 0, 1);
  trace.cls = reshape(cls, {d});
  trace.logits = reshape(add_rowwise(matmul(cls, m.head_weight), m.head_bias), {cfg.num_classes});
  return trace;
}

inline std::size_t predict(const ViTModel& model, const Tensor& image) {
  return argmax(forward(model, image).logits);
}

// ---------------------------------------------------------------------------
// Training

struct LabeledImage {
  std::string id;
  Tensor image;
  std::size_t label = 0;
};

inline double accuracy(const ViTModel& model, const std::vector<LabeledImage>& data) {
  if (data.empty()) throw DataError("accuracy: empty dataset");
  std::vector<int> correct(data.size());
  parallel_for(data.size(), [&](std::size_t i) { correct[i] = predict(model, data[i].image) == data[i].label; });
  std::size_t hits = 0;
  for (int c : correct) hits += static_cast<std::size_t>(c);
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

inline void save_checkpoint(const ViTModel& model, const std::filesystem::path& path);

enum class Optimizer { sgdm, adam };

struct TrainOptions {
  std::size_t epochs = 12;
  double lr = 0.002;
  double momentum = 0.9;
  Optimizer optimizer = Optimizer::adam;
  /// Rescale the batch gradient to at most this global L2 norm (0 disables).
  double clip_norm = 0.0;
  /// Anneal lr along a half cosine to zero over all steps.
  bool cosine_decay = true;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  /// Optional held-out set evaluated after every epoch.
  const std::vector<LabeledImage>* validation = nullptr;
  /// Written after the last epoch when set.
  std::optional<std::filesystem::path> checkpoint;
  std::function<void(std::size_t epoch, double loss, double accuracy)> on_epoch;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_accuracy;
  std::vector<double> validation_accuracy;
};

/// Loss and parameter gradients (visit order) for one labelled image.
inline std::pair<double, std::vector<std::vector<double>>> loss_and_gradients(const ViTModel& model,
                                                                              const LabeledImage& ex,
                                                                              Rng* dropout_rng = nullptr,
                                                                              std::size_t* predicted = nullptr) {
  Tape tape;
  ForwardTrace trace = forward(model, ex.image, {&tape, true, dropout_rng});
  Tensor loss = cross_entropy(trace.logits, ex.label);
  if (predicted) *predicted = argmax(trace.logits);
  Gradients grads = tape.backward(loss);
  std::vector<std::vector<double>> out;
  out.reserve(trace.parameters.size());
  for (const Tensor& p : trace.parameters) out.push_back(grads.wrt(p).to_vector());
  return {loss.item(), std::move(out)};
}

/// Mini-batch training on softmax cross-entropy. sgdm:
///   v <- beta v + (1 - beta) g,  theta <- theta - lr v.
/// adam uses the same first moment (beta = momentum), a second moment with
/// 0.999 and bias correction. Batches are shuffled per epoch from the seed;
/// gradients of a batch are computed in parallel and summed in example order.
inline TrainReport train_classifier(ViTModel& model, const std::vector<LabeledImage>& data,
                                    const TrainOptions& options) {
  if (data.empty()) throw DataError("train_classifier: empty dataset");
  for (const auto& ex : data) {
    if (ex.label >= model.config.num_classes) {
      throw DataError("train_classifier: label " + std::to_string(ex.label) + " of " + ex.id +
                      " exceeds num_classes");
    }
  }
  if (options.batch_size == 0) throw ConfigError("train_classifier: batch_size must be positive");
  TrainReport report;
  std::vector<std::vector<double>> velocity;
  model.visit([&](const std::string&, const Tensor& t) { velocity.emplace_back(t.size(), 0.0); });
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<std::vector<double>> second_moment = velocity;
  std::size_t step = 0;
  const std::size_t total_steps = options.epochs * ((data.size() + options.batch_size - 1) / options.batch_size);
  constexpr double kAdamBeta2 = 0.999;
  const bool use_dropout = model.config.dropout_rate > 0.0;

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(options.seed, epoch));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t count = std::min(options.batch_size, order.size() - start);
      std::vector<double> losses(count);
      std::vector<std::size_t> preds(count);
      std::vector<std::vector<std::vector<double>>> grads(count);
      parallel_for(count, [&](std::size_t b) {
        const std::size_t idx = order[start + b];
        Rng drop(derive_seed(derive_seed(options.seed, 0x5eedULL + epoch), idx));
        auto [l, g] = loss_and_gradients(model, data[idx], use_dropout ? &drop : nullptr, &preds[b]);
        losses[b] = l;
        grads[b] = std::move(g);
      });
      for (std::size_t b = 0; b < count; ++b) {
        if (!std::isfinite(losses[b])) {
          throw DivergenceError("train_classifier: non-finite loss at epoch " + std::to_string(epoch) +
                                " on example " + data[order[start + b]].id);
        }
        loss_sum += losses[b];
        hits += preds[b] == data[order[start + b]].label;
      }
      const double inv = 1.0 / static_cast<double>(count);
      std::vector<std::vector<double>> batch_grad(velocity.size());
      double norm_sq = 0.0;
      for (std::size_t pi = 0; pi < velocity.size(); ++pi) {
        batch_grad[pi].assign(velocity[pi].size(), 0.0);
        for (std::size_t b = 0; b < count; ++b)
          for (std::size_t j = 0; j < batch_grad[pi].size(); ++j) batch_grad[pi][j] += grads[b][pi][j];
        for (double& g : batch_grad[pi]) {
          g *= inv;
          norm_sq += g * g;
        }
      }
      const double norm = std::sqrt(norm_sq);
      const double clip = options.clip_norm > 0.0 && norm > options.clip_norm ? options.clip_norm / norm : 1.0;
      ++step;
      double lr = options.lr;
      if (options.cosine_decay) {
        const double progress = static_cast<double>(step - 1) / static_cast<double>(total_steps);
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
      }
      std::size_t pi = 0;
      model.visit([&](const std::string&, Tensor& t) {
        std::vector<double>& v = velocity[pi];
        std::vector<double>& s2 = second_moment[pi];
        std::vector<double> values = t.to_vector();
        for (std::size_t j = 0; j < values.size(); ++j) {
          const double g = batch_grad[pi][j] * clip;
          v[j] = options.momentum * v[j] + (1.0 - options.momentum) * g;
          if (options.optimizer == Optimizer::sgdm) {
            values[j] -= lr * v[j];
          } else {
            s2[j] = kAdamBeta2 * s2[j] + (1.0 - kAdamBeta2) * g * g;
            const double mhat = v[j] / (1.0 - std::pow(options.momentum, static_cast<double>(step)));
            const double vhat = s2[j] / (1.0 - std::pow(kAdamBeta2, static_cast<double>(step)));
            values[j] -= lr * mhat / (std::sqrt(vhat) + 1e-8);
          }
        }
        t = Tensor(t.shape(), std::move(values));
        ++pi;
      });
    }
    const double mean_loss = loss_sum / static_cast<double>(data.size());
    if (!std::isfinite(mean_loss)) throw DivergenceError("train_classifier: loss diverged");
    report.epoch_loss.push_back(mean_loss);
    report.epoch_accuracy.push_back(static_cast<double>(hits) / static_cast<double>(data.size()));
    if (options.validation && !options.validation->empty()) {
      report.validation_accuracy.push_back(accuracy(model, *options.validation));
    }
    if (options.on_epoch) options.on_epoch(epoch, mean_loss, report.epoch_accuracy.back());
  }
  if (options.checkpoint) save_checkpoint(model, *options.checkpoint);
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   PROTEGO-VIT 1
//   config <key>=<value> ...
//   param <name> <d0>x<d1>... <offset> <bytes>
//   ...
//   end
//   <PTF1 blobs, offsets relative to the first byte after "end\n">

namespace detail {

inline std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

inline std::string format_config(const ViTConfig& c) {
  std::ostringstream out;
  out << "image_size=" << c.image_size << " channels=" << c.channels << " patch_size=" << c.patch_size
      << " embed_dim=" << c.embed_dim << " num_heads=" << c.num_heads << " num_layers=" << c.num_layers
      << " mlp_hidden=" << c.mlp_hidden << " num_classes=" << c.num_classes
      << " dropout_rate=" << format_double(c.dropout_rate);
  return out.str();
}

inline ViTConfig parse_config_line(const std::string& line) {
  std::istringstream in(line);
  std::string word;
  in >> word;
  if (word != "config") throw FormatError("checkpoint: expected config line");
  ViTConfig c;
  while (in >> word) {
    const auto eq = word.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint: malformed config entry '" + word + "'");
    const std::string key = word.substr(0, eq), value = word.substr(eq + 1);
    try {
      if (key == "dropout_rate") {
        c.dropout_rate = std::stod(value);
        continue;
      }
      const std::size_t v = std::stoul(value);
      if (key == "image_size") c.image_size = v;
      else if (key == "channels") c.channels = v;
      else if (key == "patch_size") c.patch_size = v;
      else if (key == "embed_dim") c.embed_dim = v;
      else if (key == "num_heads") c.num_heads = v;
      else if (key == "num_layers") c.num_layers = v;
      else if (key == "mlp_hidden") c.mlp_hidden = v;
      else if (key == "num_classes") c.num_classes = v;
      else throw FormatError("checkpoint: unknown config key '" + key + "'");
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: bad value for '" + key + "'");
    }
  }
  return c;
}

inline Shape parse_shape(const std::string& text) {
  Shape s;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto x = text.find('x', pos);
    const std::string part = text.substr(pos, x == std::string::npos ? std::string::npos : x - pos);
    try {
      s.push_back(std::stoul(part));
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: bad shape '" + text + "'");
    }
    if (x == std::string::npos) break;
    pos = x + 1;
  }
  return s;
}

inline std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace detail

inline std::string encode_checkpoint(const ViTModel& model) {
  std::string header = "PROTEGO-VIT 1\nconfig " + detail::format_config(model.config) + "\n";
  std::string blobs;
  model.visit([&](const std::string& name, const Tensor& t) {
    const std::string blob = ptf::encode(t);
    header += "param " + name + " " + detail::shape_text(t.shape()) + " " + std::to_string(blobs.size()) + " " +
              std::to_string(blob.size()) + "\n";
    blobs += blob;
  });
  header += "end\n";
  return header + blobs;
}

inline void save_checkpoint(const ViTModel& model, const std::filesystem::path& path) {
  ptf::write_file_bytes(path, encode_checkpoint(model));
}

/// Decodes a checkpoint. When expected is given, every parameter shape must
/// match the shapes that config dictates.
inline ViTModel decode_checkpoint(std::string_view bytes, const std::optional<ViTConfig>& expected = std::nullopt) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw FormatError("checkpoint: truncated manifest");
    std::string line(bytes.substr(pos, nl - pos));
    pos = nl + 1;
    return line;
  };
  if (next_line() != "PROTEGO-VIT 1") throw FormatError("checkpoint: bad magic");
  ViTConfig config = detail::parse_config_line(next_line());
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  struct Entry {
    std::string name;
    Shape shape;
    std::size_t offset, length;
  };
  std::vector<Entry> entries;
  for (std::string line = next_line(); line != "end"; line = next_line()) {
    std::istringstream in(line);
    std::string tag, name, shape;
    std::size_t offset = 0, length = 0;
    if (!(in >> tag >> name >> shape >> offset >> length) || tag != "param") {
      throw FormatError("checkpoint: malformed manifest line '" + line + "'");
    }
    entries.push_back({name, detail::parse_shape(shape), offset, length});
  }
  const std::string_view blobs = bytes.substr(pos);

  const ViTConfig& target = expected ? *expected : config;
  const auto layout = parameter_layout(target);
  if (expected) {
    for (std::size_t i = 0; i < std::min(layout.size(), entries.size()); ++i) {
      if (entries[i].name == layout[i].first && entries[i].shape != layout[i].second) {
        throw DimensionError("checkpoint: shape mismatch for " + entries[i].name + ": file has " +
                             to_string(entries[i].shape) + ", config expects " + to_string(layout[i].second));
      }
    }
  }
  if (entries.size() != layout.size()) {
    throw DimensionError("checkpoint: " + std::to_string(entries.size()) + " parameters, config expects " +
                         std::to_string(layout.size()));
  }
  ViTModel model;
  model.config = target;
  model.layers.resize(target.num_layers);
  std::size_t i = 0;
  model.visit([&](const std::string& name, Tensor& t) {
    const Entry& e = entries[i];
    if (e.name != name) throw FormatError("checkpoint: expected parameter " + name + ", found " + e.name);
    if (e.shape != layout[i].second) {
      throw DimensionError("checkpoint: shape mismatch for " + name + ": file has " + to_string(e.shape) +
                           ", config expects " + to_string(layout[i].second));
    }
    if (e.offset + e.length > blobs.size()) throw FormatError("checkpoint: blob for " + name + " out of range");
    t = ptf::decode(blobs.substr(e.offset, e.length));
    if (t.shape() != e.shape) throw FormatError("checkpoint: manifest shape disagrees with blob for " + name);
    ++i;
  });
  return model;
}

inline ViTModel load_checkpoint(const std::filesystem::path& path,
                                const std::optional<ViTConfig>& expected = std::nullopt) {
  return decode_checkpoint(ptf::read_file_bytes(path), expected);
}

}  // namespace protego
