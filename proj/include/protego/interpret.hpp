#pragma once

// Attention rollout and gradient attention rollout, plus PGM/PPM heatmaps.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/netpbm.hpp"
#include "protego/tensor.hpp"
#include "protego/vit.hpp"

namespace protego {

enum class HeadFusion { mean, max, min };
enum class RolloutMethod { rollout, grad_rollout };

inline std::string fusion_name(HeadFusion f) {
  switch (f) {
    case HeadFusion::mean: return "mean";
    case HeadFusion::max: return "max";
    default: return "min";
  }
}

inline HeadFusion parse_fusion(const std::string& s) {
  if (s == "mean") return HeadFusion::mean;
  if (s == "max") return HeadFusion::max;
  if (s == "min") return HeadFusion::min;
  throw ConfigError("unknown head fusion '" + s + "'");
}

inline std::string method_name(RolloutMethod m) { return m == RolloutMethod::rollout ? "rollout" : "grad_rollout"; }

struct RolloutMap {
  Tensor relevance;                  // [T, T]
  std::vector<double> cls_saliency;  // [num_patches], CLS row without the CLS column, min-max scaled
  std::size_t grid = 0;              // patches per side
  RolloutMethod method = RolloutMethod::rollout;
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
};

namespace detail {

/// heads x [T, T] row-major blocks -> one [T, T] matrix.
inline std::vector<double> fuse_heads(std::span<const double> stacked, std::size_t heads, std::size_t tt,
                                      HeadFusion fusion) {
  std::vector<double> out(tt);
  for (std::size_t e = 0; e < tt; ++e) {
    double acc = stacked[e];
    for (std::size_t h = 1; h < heads; ++h) {
      const double v = stacked[h * tt + e];
      if (fusion == HeadFusion::mean) acc += v;
      else if (fusion == HeadFusion::max) acc = std::max(acc, v);
      else acc = std::min(acc, v);
    }
    out[e] = fusion == HeadFusion::mean ? acc / static_cast<double>(heads) : acc;
  }
  return out;
}

inline std::vector<double> matmul_square(const std::vector<double>& a, const std::vector<double>& b, std::size_t n) {
  std::vector<double> c(n * n, 0.0);
  gemm(false, false, n, n, n, a.data(), b.data(), c.data());
  return c;
}

inline std::vector<double> minmax(std::vector<double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, range = *hi - *lo;
  for (double& x : v) x = range > 0.0 ? (x - a) / range : 0.0;
  return v;
}

inline RolloutMap finish_map(std::vector<double> relevance, std::size_t tokens, RolloutMethod method,
                             std::size_t layers) {
  RolloutMap map;
  map.cls_saliency.assign(relevance.begin() + 1, relevance.begin() + static_cast<std::ptrdiff_t>(tokens));
  map.cls_saliency = minmax(std::move(map.cls_saliency));
  map.grid = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens - 1))));
  map.relevance = Tensor({tokens, tokens}, std::move(relevance));
  map.method = method;
  map.first_layer = 0;
  map.last_layer = layers - 1;
  return map;
}

}  // namespace detail

/// Fuses the heads of every layer and multiplies recursively,
///   R(l_0) = A(l_0),  R(l_i) = A(l_i) . R(l_{i-1}).
/// With residual set, each fused A is first replaced by 0.5 (A + I) with
/// rows renormalized to sum to one.
inline RolloutMap attention_rollout(const std::vector<Tensor>& attention, HeadFusion fusion = HeadFusion::mean,
                                    bool residual = false) {
  if (attention.empty()) throw ContractError("attention_rollout: no layers");
  const std::size_t heads = attention.front().dim(0), t = attention.front().dim(1);
  std::vector<double> acc;
  for (const Tensor& layer : attention) {
    if (layer.shape() != Shape{heads, t, t}) throw DimensionError("attention_rollout: inconsistent attention shapes");
    std::vector<double> a = detail::fuse_heads(layer.values(), heads, t * t, fusion);
    if (residual) {
      for (std::size_t r = 0; r < t; ++r) {
        double row = 0.0;
        for (std::size_t c = 0; c < t; ++c) {
          double& v = a[r * t + c];
          v = 0.5 * (v + (r == c ? 1.0 : 0.0));
          row += v;
        }
        for (std::size_t c = 0; c < t; ++c) a[r * t + c] /= row;
      }
    }
    acc = acc.empty() ? std::move(a) : detail::matmul_square(a, acc, t);
  }
  return detail::finish_map(std::move(acc), t, RolloutMethod::rollout, attention.size());
}

inline RolloutMap attention_rollout(const ForwardTrace& trace, HeadFusion fusion = HeadFusion::mean,
                                    bool residual = false) {
  return attention_rollout(trace.attention, fusion, residual);
}

/// Per layer  A^i = I + E_h(grad A^i * A^i), negatives clamped to zero after
/// fusion when clamp_negative; Rollout = A^1 . A^2 ... A^L. Gradients are of
/// the target logit.
inline RolloutMap grad_attention_rollout(const ViTModel& model, const Tensor& x, std::size_t target_class,
                                         HeadFusion fusion = HeadFusion::mean, bool clamp_negative = true) {
  if (target_class >= model.config.num_classes) {
    throw ConfigError("grad_attention_rollout: class " + std::to_string(target_class) + " >= num_classes " +
                      std::to_string(model.config.num_classes));
  }
  Tape tape;
  const Tensor input = tape.leaf(x);
  const ForwardTrace trace = forward(model, input, {&tape});
  const Gradients grads = tape.backward(pick(trace.logits, target_class));
  const std::size_t t = model.config.num_tokens(), heads = model.config.num_heads;
  std::vector<double> acc;
  for (std::size_t l = 0; l < trace.head_maps.size(); ++l) {
    std::vector<double> weighted(heads * t * t);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor& a = trace.head_maps[l][h];
      const Tensor g = grads.wrt(a);
      for (std::size_t e = 0; e < t * t; ++e) weighted[h * t * t + e] = g[e] * a[e];
    }
    std::vector<double> fused = detail::fuse_heads(weighted, heads, t * t, fusion);
    for (std::size_t e = 0; e < t * t; ++e) {
      if (clamp_negative) fused[e] = std::max(fused[e], 0.0);
      if (e / t == e % t) fused[e] += 1.0;
    }
    acc = acc.empty() ? std::move(fused) : detail::matmul_square(acc, fused, t);
  }
  return detail::finish_map(std::move(acc), t, RolloutMethod::grad_rollout, trace.head_maps.size());
}

/// Intersection over union of the top ceil(fraction * P) patches of two
/// saliency vectors. Ties rank the lower patch index first.
inline double saliency_iou(std::span<const double> a, std::span<const double> b, double fraction = 0.25) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("saliency_iou: size mismatch");
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(a.size())));
  auto top = [&](std::span<const double> s) {
    std::vector<std::size_t> idx(s.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return s[i] > s[j]; });
    std::vector<bool> in(s.size(), false);
    for (std::size_t i = 0; i < k; ++i) in[idx[i]] = true;
    return in;
  };
  const auto ta = top(a), tb = top(b);
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += ta[i] && tb[i];
    uni += ta[i] || tb[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// ---------------------------------------------------------------------------
// Heatmaps

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Blue -> cyan -> yellow -> red ramp.
inline std::array<double, 3> colormap(double s) {
  auto ramp = [&](double centre) { return std::clamp(1.5 - std::abs(4.0 * s - centre), 0.0, 1.0); };
  return {ramp(3.0), ramp(2.0), ramp(1.0)};
}

struct Heatmap {
  netpbm::Image saliency;  // P5, image resolution
  netpbm::Image overlay;   // P6
};

/// Nearest-neighbour upsampling of the patch saliency to the base image size;
/// overlay = 0.5 grayscale(base) + 0.5 colormap(saliency).
inline Heatmap make_heatmap(const RolloutMap& map, const Tensor& base_image) {
  if (base_image.rank() != 3 || base_image.dim(1) != base_image.dim(2)) {
    throw DimensionError("render_heatmap: base image must be [C,H,W] square, got " + to_string(base_image.shape()));
  }
  const std::size_t c = base_image.dim(0), size = base_image.dim(1);
  if (map.grid == 0 || map.grid * map.grid != map.cls_saliency.size() || size % map.grid != 0) {
    throw DimensionError("render_heatmap: patch grid " + std::to_string(map.grid) + " does not tile a " +
                         std::to_string(size) + "x" + std::to_string(size) + " image");
  }
  if (c != 1 && c != 3) throw DimensionError("render_heatmap: base image needs 1 or 3 channels");
  const std::size_t patch = size / map.grid;
  Heatmap out;
  out.saliency = {size, size, 1, std::vector<std::uint8_t>(size * size)};
  out.overlay = {size, size, 3, std::vector<std::uint8_t>(size * size * 3)};
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double s = map.cls_saliency[(y / patch) * map.grid + x / patch];
      out.saliency.pixels[y * size + x] = to_byte(s);
      double gray = base_image[y * size + x];
      if (c == 3) {
        gray = 0.299 * base_image[y * size + x] + 0.587 * base_image[(size + y) * size + x] +
               0.114 * base_image[(2 * size + y) * size + x];
      }
      const auto rgb = colormap(s);
      for (std::size_t k = 0; k < 3; ++k) out.overlay.pixels[(y * size + x) * 3 + k] = to_byte(0.5 * gray + 0.5 * rgb[k]);
    }
  }
  return out;
}

/// Writes <stem>.pgm and <stem>_overlay.ppm next to out_path; returns both paths.
inline std::pair<std::filesystem::path, std::filesystem::path> render_heatmap(const RolloutMap& map,
                                                                              const Tensor& base_image,
                                                                              const std::filesystem::path& out_path) {
  const Heatmap h = make_heatmap(map, base_image);
  std::filesystem::path pgm = out_path, ppm = out_path;
  pgm.replace_extension(".pgm");
  ppm.replace_filename(out_path.stem().string() + "_overlay.ppm");
  if (!pgm.parent_path().empty()) ptf::make_dirs(pgm.parent_path());
  netpbm::write(h.saliency, pgm);
  netpbm::write(h.overlay, ppm);
  return {pgm, ppm};
}

}  // namespace protego
