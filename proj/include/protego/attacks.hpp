#pragma once

// Untargeted white-box attacks on a ViTModel, in [0,1] pixel space.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "protego/error.hpp"
#include "protego/metrics.hpp"
#include "protego/random.hpp"
#include "protego/tensor.hpp"
#include "protego/vit.hpp"

namespace protego {

enum class AttackFamily { fgsm, bim, pgd, mim, cw, patch_fool };

inline constexpr AttackFamily kAllAttacks[] = {AttackFamily::pgd, AttackFamily::fgsm, AttackFamily::bim,
                                               AttackFamily::cw,  AttackFamily::mim,  AttackFamily::patch_fool};

inline std::string attack_name(AttackFamily f) {
  switch (f) {
    case AttackFamily::fgsm: return "fgsm";
    case AttackFamily::bim: return "bim";
    case AttackFamily::pgd: return "pgd";
    case AttackFamily::mim: return "mim";
    case AttackFamily::cw: return "cw";
    case AttackFamily::patch_fool: return "patchfool";
  }
  return "?";
}

inline AttackFamily parse_attack(const std::string& name) {
  for (AttackFamily f : kAllAttacks)
    if (attack_name(f) == name) return f;
  if (name == "patch_fool" || name == "patch-fool") return AttackFamily::patch_fool;
  throw ConfigError("unknown attack '" + name + "'");
}

/// Hyperparameters of one attack. A field is set exactly when the family uses it:
///   fgsm: epsilon            bim/pgd: epsilon steps alpha     mim: epsilon steps gamma
///   cw: steps c kappa lr     patchfool: steps num_patch atten_select lr
/// pgd additionally draws its random start from seed.
struct AttackSpec {
  AttackFamily family = AttackFamily::pgd;
  std::optional<double> epsilon;
  std::optional<std::size_t> steps;
  std::optional<double> alpha;
  std::optional<double> gamma;
  std::optional<double> c;
  std::optional<double> kappa;
  std::optional<double> lr;
  std::optional<std::size_t> num_patch;
  std::optional<std::size_t> atten_select;
  std::uint64_t seed = 0;

  /// Standard parameter set for a family. Patch-Fool selects attention layer
  /// min(4, L-1) so that it exists in shallow models.
  static AttackSpec defaults(AttackFamily f, std::size_t num_layers = 12) {
    AttackSpec s;
    s.family = f;
    switch (f) {
      case AttackFamily::fgsm:
        s.epsilon = 0.0625;
        break;
      case AttackFamily::bim:
      case AttackFamily::pgd:
        s.epsilon = 0.0625;
        s.steps = 10;
        s.alpha = 2.0 / 255.0;
        break;
      case AttackFamily::mim:
        s.epsilon = 8.0 / 255.0;
        s.steps = 10;
        s.gamma = 1.0;
        break;
      case AttackFamily::cw:
        s.steps = 50;
        s.c = 1.0;
        s.kappa = 0.0;
        s.lr = 0.01;
        break;
      case AttackFamily::patch_fool:
        s.steps = 10;
        s.num_patch = 1;
        s.atten_select = std::min<std::size_t>(4, num_layers == 0 ? 0 : num_layers - 1);
        s.lr = 0.22;
        break;
    }
    return s;
  }

  void validate(const ViTConfig& config) const {
    const bool uses_eps = family != AttackFamily::cw && family != AttackFamily::patch_fool;
    const bool uses_steps = family != AttackFamily::fgsm;
    const bool uses_alpha = family == AttackFamily::bim || family == AttackFamily::pgd;
    const bool uses_gamma = family == AttackFamily::mim;
    const bool uses_cw = family == AttackFamily::cw;
    const bool uses_lr = family == AttackFamily::cw || family == AttackFamily::patch_fool;
    const bool uses_patch = family == AttackFamily::patch_fool;
    const std::string who = attack_name(family) + ": ";
    auto check = [&](bool present, bool used, const char* field) {
      if (used && !present) throw ConfigError(who + "missing required field " + field);
      if (!used && present) throw ConfigError(who + "field " + field + " does not apply");
    };
    check(epsilon.has_value(), uses_eps, "epsilon");
    check(steps.has_value(), uses_steps, "steps");
    check(alpha.has_value(), uses_alpha, "alpha");
    check(gamma.has_value(), uses_gamma, "gamma");
    check(c.has_value(), uses_cw, "c");
    check(kappa.has_value(), uses_cw, "kappa");
    check(lr.has_value(), uses_lr, "lr");
    check(num_patch.has_value(), uses_patch, "num_patch");
    check(atten_select.has_value(), uses_patch, "atten_select");
    if (epsilon && !(*epsilon >= 0.0)) throw ConfigError(who + "epsilon must be >= 0");
    if (steps && *steps < 1) throw ConfigError(who + "steps must be >= 1");
    if (alpha && !(*alpha >= 0.0)) throw ConfigError(who + "alpha must be >= 0");
    if (lr && !(*lr > 0.0)) throw ConfigError(who + "lr must be > 0");
    if (num_patch && (*num_patch < 1 || *num_patch > config.num_patches())) {
      throw ConfigError(who + "num_patch must be in 1..num_patches");
    }
    if (atten_select && *atten_select >= config.num_layers) {
      throw ConfigError(who + "atten_select " + std::to_string(*atten_select) + " >= num_layers " +
                        std::to_string(config.num_layers));
    }
  }
};

struct AdvResult {
  Tensor image;
  bool success = false;        // argmax of a fresh forward pass differs from the true label
  std::size_t predicted = 0;
  std::size_t steps = 0;       // gradient evaluations
  double l2 = 0.0;
  double linf = 0.0;
  std::size_t perturbed_patches = 0;
  std::string note;
};

struct LossGradient {
  double loss = 0.0;
  Tensor gradient;  // same shape as the image
  Tensor logits;
};

/// Cross-entropy loss of f(x) against y and its gradient with respect to x.
inline LossGradient input_gradient(const ViTModel& model, const Tensor& x, std::size_t y) {
  Tape tape;
  Tensor leaf = tape.leaf(x);
  ForwardTrace trace = forward(model, leaf, {&tape});
  Tensor loss = cross_entropy(trace.logits, y);
  Gradients g = tape.backward(loss);
  return {loss.item(), g.wrt(leaf), trace.logits.detached()};
}

namespace detail {

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline bool all_zero(const Tensor& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](double v) { return v == 0.0; });
}

/// Clip into the epsilon ball around origin, then into [0,1].
inline void project(std::vector<double>& x, const Tensor& origin, double eps) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = std::clamp(x[i], origin[i] - eps, origin[i] + eps);
    x[i] = std::clamp(x[i], 0.0, 1.0);
  }
}

inline AdvResult finalize(const ViTModel& model, const Tensor& x, Tensor x_adv, std::size_t y, std::size_t steps,
                          std::string note = {}) {
  AdvResult r;
  r.predicted = predict(model, x_adv);
  r.success = r.predicted != y;
  r.steps = steps;
  const PerturbationNorms n = lp_norms(x, x_adv, model.config.patch_size);
  r.l2 = n.l2;
  r.linf = n.linf;
  r.perturbed_patches = n.perturbed_patches;
  r.image = std::move(x_adv);
  r.note = std::move(note);
  return r;
}

inline void check_input(const ViTModel& model, const Tensor& x, std::size_t y) {
  const auto& c = model.config;
  if (x.shape() != Shape{c.channels, c.image_size, c.image_size}) {
    throw DimensionError("attack: image shape " + to_string(x.shape()) + " does not match the model");
  }
  if (y >= c.num_classes) throw ContractError("attack: label out of range");
}

/// Iterated sign-gradient ascent with projection; shared by BIM and PGD.
inline AdvResult iterative_sign(const ViTModel& model, const Tensor& x, std::size_t y, Tensor start, double eps,
                                double alpha, std::size_t steps) {
  Tensor current = std::move(start);
  bool any_gradient = false;
  for (std::size_t t = 0; t < steps; ++t) {
    const LossGradient lg = input_gradient(model, current, y);
    any_gradient = any_gradient || !all_zero(lg.gradient);
    std::vector<double> next = current.to_vector();
    for (std::size_t i = 0; i < next.size(); ++i) next[i] += alpha * sign(lg.gradient[i]);
    project(next, x, eps);
    current = Tensor(x.shape(), std::move(next));
  }
  return finalize(model, x, current, y, steps, any_gradient ? "" : "null-gradient");
}

}  // namespace detail

/// x_adv = clip(x + eps sign(grad_x CE), 0, 1).
inline AdvResult fgsm(const ViTModel& model, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  spec.validate(model.config);
  detail::check_input(model, x, y);
  const double eps = *spec.epsilon;
  const LossGradient lg = input_gradient(model, x, y);
  if (detail::all_zero(lg.gradient)) return detail::finalize(model, x, x, y, 1, "null-gradient");
  std::vector<double> adv(x.size());
  for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = std::clamp(x[i] + eps * detail::sign(lg.gradient[i]), 0.0, 1.0);
  return detail::finalize(model, x, Tensor(x.shape(), std::move(adv)), y, 1);
}

/// Iterative FGSM from x itself: step alpha, projection every iteration.
inline AdvResult bim(const ViTModel& model, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  spec.validate(model.config);
  detail::check_input(model, x, y);
  return detail::iterative_sign(model, x, y, x, *spec.epsilon, *spec.alpha, *spec.steps);
}

/// BIM from a uniform random start in the epsilon ball (clipped to [0,1]).
inline AdvResult pgd(const ViTModel& model, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  spec.validate(model.config);
  detail::check_input(model, x, y);
  const double eps = *spec.epsilon;
  Rng rng(spec.seed);
  std::vector<double> start = x.to_vector();
  for (double& v : start) v += rng.uniform(-eps, eps);
  detail::project(start, x, eps);
  return detail::iterative_sign(model, x, y, Tensor(x.shape(), std::move(start)), eps, *spec.alpha, *spec.steps);
}

/// Momentum iterative method:
///   g <- gamma g + grad / ||grad||_1,  x <- proj(x + alpha sign(g)),  alpha = eps / steps.
inline AdvResult mim(const ViTModel& model, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  spec.validate(model.config);
  detail::check_input(model, x, y);
  const double eps = *spec.epsilon, gamma = *spec.gamma;
  const std::size_t steps = *spec.steps;
  const double alpha = eps / static_cast<double>(steps);
  std::vector<double> momentum(x.size(), 0.0);
  Tensor current = x;
  bool any_gradient = false;
  for (std::size_t t = 0; t < steps; ++t) {
    const LossGradient lg = input_gradient(model, current, y);
    double l1 = 0.0;
    for (double g : lg.gradient.values()) l1 += std::abs(g);
    any_gradient = any_gradient || l1 > 0.0;
    std::vector<double> next = current.to_vector();
    for (std::size_t i = 0; i < next.size(); ++i) {
      momentum[i] = gamma * momentum[i] + (l1 > 0.0 ? lg.gradient[i] / l1 : 0.0);
      next[i] += alpha * detail::sign(momentum[i]);
    }
    detail::project(next, x, eps);
    current = Tensor(x.shape(), std::move(next));
  }
  return detail::finalize(model, x, current, y, steps, any_gradient ? "" : "null-gradient");
}

/// Carlini-Wagner L2 with the change of variables x(w) = (tanh(w) + 1) / 2.
/// Minimizes ||x(w) - x||^2 + c max(Z_y - max_{j != y} Z_j, -kappa) by plain
/// gradient descent on w and returns the successful iterate with the lowest
/// L2 (iterate 0 is x itself), else the last iterate.
inline AdvResult cw_l2(const ViTModel& model, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  spec.validate(model.config);
  detail::check_input(model, x, y);
  const double c = *spec.c, kappa = *spec.kappa, lr = *spec.lr;
  const std::size_t steps = *spec.steps;
  constexpr double kClip = 1.0 - 1e-6;
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::atanh(std::clamp(2.0 * x[i] - 1.0, -kClip, kClip));

  std::optional<Tensor> best;
  double best_l2 = std::numeric_limits<double>::infinity();
  if (predict(model, x) != y) {
    best = x;
    best_l2 = 0.0;
  }
  Tensor last = x;
  for (std::size_t t = 0; t < steps; ++t) {
    Tape tape;
    Tensor wt = tape.leaf(Tensor(x.shape(), w));
    Tensor xw = scale(add_scalar(protego::tanh(wt), 1.0), 0.5);
    Tensor diff = sub(xw, x);
    Tensor objective = sum(mul(diff, diff));
    ForwardTrace trace = forward(model, xw, {&tape});
    std::size_t other = y == 0 ? 1 : 0;
    for (std::size_t j = 0; j < model.config.num_classes; ++j)
      if (j != y && trace.logits[j] > trace.logits[other]) other = j;
    const double margin = trace.logits[other] - trace.logits[y];
    if (-margin > -kappa) objective = add(objective, scale(sub(pick(trace.logits, y), pick(trace.logits, other)), c));
    const Tensor grad = tape.backward(objective).wrt(wt);
    // The iterate evaluated here is x(w) before this update.
    if (t > 0 && margin > 0.0) {
      const double l2 = std::sqrt(sum(mul(diff, diff)).item());
      if (l2 < best_l2) {
        best_l2 = l2;
        best = xw.detached();
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * grad[i];
  }
  {
    std::vector<double> xv(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) xv[i] = (std::tanh(w[i]) + 1.0) * 0.5;
    last = Tensor(x.shape(), std::move(xv));
    if (predict(model, last) != y) {
      const double l2 = lp_norms(x, last, model.config.patch_size).l2;
      if (l2 < best_l2) best = last;
    }
  }
  AdvResult r = detail::finalize(model, x, best ? *best : last, y, steps);
  return r;
}

/// Patch ranking for Patch-Fool: head-averaged attention of one layer, summed
/// over query rows, CLS column dropped; returns patch indices by decreasing
/// received attention.
inline std::vector<std::size_t> rank_patches_by_attention(const ForwardTrace& trace, std::size_t layer) {
  if (layer >= trace.attention.size()) throw ConfigError("patch ranking: layer out of range");
  const Tensor& a = trace.attention[layer];
  const std::size_t heads = a.dim(0), tokens = a.dim(1);
  std::vector<double> received(tokens - 1, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t q = 0; q < tokens; ++q)
      for (std::size_t k = 1; k < tokens; ++k) received[k - 1] += a[(h * tokens + q) * tokens + k] / static_cast<double>(heads);
  std::vector<std::size_t> order(received.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return received[i] > received[j]; });
  return order;
}

/// Patch-Fool: perturbs only the num_patch patches that receive the most
/// attention at layer atten_select. Each step moves those pixels along the
/// L2-normalized CE gradient restricted to the patch pixels, by lr, then clips
/// to [0,1]. Stops at the first iterate that changes the prediction.
inline AdvResult patch_fool(const ViTModel& model, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  spec.validate(model.config);
  detail::check_input(model, x, y);
  const auto& cfg = model.config;
  const std::size_t steps = *spec.steps;
  const double lr = *spec.lr;
  const ForwardTrace clean = forward(model, x);
  const auto ranked = rank_patches_by_attention(clean, *spec.atten_select);

  std::vector<char> mask(x.size(), 0);
  const std::size_t size = cfg.image_size, p = cfg.patch_size, grid = cfg.grid();
  for (std::size_t k = 0; k < *spec.num_patch; ++k) {
    const std::size_t gy = ranked[k] / grid, gx = ranked[k] % grid;
    for (std::size_t ch = 0; ch < cfg.channels; ++ch)
      for (std::size_t yy = 0; yy < p; ++yy)
        for (std::size_t xx = 0; xx < p; ++xx) mask[(ch * size + gy * p + yy) * size + gx * p + xx] = 1;
  }

  if (argmax(clean.logits) != y) return detail::finalize(model, x, x, y, 0);
  Tensor current = x;
  std::size_t used = 0;
  bool any_gradient = false;
  for (std::size_t t = 0; t < steps; ++t) {
    const LossGradient lg = input_gradient(model, current, y);
    ++used;
    double norm = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (mask[i]) norm += lg.gradient[i] * lg.gradient[i];
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    any_gradient = true;
    std::vector<double> next = current.to_vector();
    for (std::size_t i = 0; i < next.size(); ++i) {
      if (mask[i]) next[i] = std::clamp(next[i] + lr * lg.gradient[i] / norm, 0.0, 1.0);
    }
    current = Tensor(x.shape(), std::move(next));
    if (predict(model, current) != y) break;
  }
  return detail::finalize(model, x, current, y, used, any_gradient ? "" : "null-gradient");
}

inline AdvResult run_attack(const ViTModel& model, const Tensor& x, std::size_t y, const AttackSpec& spec) {
  switch (spec.family) {
    case AttackFamily::fgsm: return fgsm(model, x, y, spec);
    case AttackFamily::bim: return bim(model, x, y, spec);
    case AttackFamily::pgd: return pgd(model, x, y, spec);
    case AttackFamily::mim: return mim(model, x, y, spec);
    case AttackFamily::cw: return cw_l2(model, x, y, spec);
    case AttackFamily::patch_fool: return patch_fool(model, x, y, spec);
  }
  throw ConfigError("unknown attack family");
}

}  // namespace protego
