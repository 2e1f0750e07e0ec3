#pragma once

// Pixel-level objectives over logits [B x C' x P]. Pixels labelled with the
// ignore index are excluded from every sum and from every normaliser.

#include "zeg/data.hpp"
#include "zeg/ops.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace zeg {

enum class LossMode { EL, NELPlain, NELPlus };

inline std::string loss_mode_name(LossMode m) {
  switch (m) {
    case LossMode::EL:
      return "el";
    case LossMode::NELPlain:
      return "nel-plain";
    case LossMode::NELPlus:
      return "nel-plus";
  }
  return "?";
}

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "el") return LossMode::EL;
  if (s == "nel-plain") return LossMode::NELPlain;
  if (s == "nel-plus") return LossMode::NELPlus;
  throw ConfigError("unknown loss '" + s + "' (expected el, nel-plain or nel-plus)");
}

inline bool is_exclusive(LossMode m) { return m == LossMode::EL; }

struct LossConfig {
  LossMode mode = LossMode::NELPlus;
  double gamma = 2.0;
  double alpha = 1.0;
  double beta = 1.0;
  std::uint8_t ignore_index = kIgnoreLabel;
  double dice_eps = 1e-6;

  void validate() const {
    if (gamma < 0) throw ConfigError("gamma must be non-negative");
    if (alpha < 0 || beta < 0) throw ConfigError("alpha and beta must be non-negative");
    if (dice_eps < 0) throw ConfigError("dice epsilon must be non-negative");
  }
};

/// No valid pixel to average over.
class EmptyBatchError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename S>
struct TargetPlanes {
  NDArray<S> onehot;  // [B x C' x P]
  NDArray<S> valid;   // [B x 1 x P], 1 where the label is not ignored
  Index valid_count = 0;

  Index batch() const { return onehot.dim(0); }
  Index classes() const { return onehot.dim(1); }
  Index pixels() const { return onehot.dim(2); }
};

/// One-hot planes over `active` classes for a batch of label maps.
template <typename S>
TargetPlanes<S> build_targets(const std::vector<std::vector<std::uint8_t>>& labels, const std::vector<Index>& active,
                              std::uint8_t ignore_index = kIgnoreLabel) {
  const Index batch = static_cast<Index>(labels.size());
  const Index classes = static_cast<Index>(active.size());
  const Index pixels = batch == 0 ? 0 : static_cast<Index>(labels.front().size());
  std::vector<Index> slot(256, -1);
  for (Index i = 0; i < classes; ++i) slot.at(static_cast<std::size_t>(active[static_cast<std::size_t>(i)])) = i;
  TargetPlanes<S> t{NDArray<S>({batch, classes, pixels}), NDArray<S>({batch, 1, pixels}), 0};
  for (Index b = 0; b < batch; ++b) {
    const auto& map = labels[static_cast<std::size_t>(b)];
    if (static_cast<Index>(map.size()) != pixels) throw ShapeError("build_targets: label maps differ in size");
    for (Index p = 0; p < pixels; ++p) {
      const std::uint8_t l = map[static_cast<std::size_t>(p)];
      if (l == ignore_index) continue;
      const Index k = slot[l];
      if (k < 0) throw ShapeError("build_targets: label " + std::to_string(l) + " is not an active class");
      t.onehot[(b * classes + k) * pixels + p] = S(1);
      t.valid[b * pixels + p] = S(1);
      ++t.valid_count;
    }
  }
  return t;
}

template <typename S>
void check_targets(const Tensor<S>& logits, const TargetPlanes<S>& t, const char* who) {
  if (logits.shape() != t.onehot.shape) {
    throw ShapeError(std::string(who) + ": logits " + shape_string(logits.shape()) + " vs targets " +
                     shape_string(t.onehot.shape));
  }
  if (t.valid_count == 0) throw EmptyBatchError(std::string(who) + ": no valid pixels");
}

/// Mean over valid pixels of -log softmax(logits)[true class].
template <typename S>
Tensor<S> loss_el(const Tensor<S>& logits, const TargetPlanes<S>& t) {
  check_targets(logits, t, "loss_el");
  Graph<S>& g = logits.graph();
  auto p_true = sum(softmax(logits, 1) * g.constant(t.onehot), 1);  // [B x 1 x P]
  auto nll = neg(sum(log(p_true) * g.constant(t.valid)));
  return scale(nll, S(1) / static_cast<S>(t.valid_count));
}

/// Per-class focal terms [1 x C' x 1]: sums over valid pixels divided by the
/// valid pixel count. `probs` are per-class probabilities in (0, 1).
template <typename S>
Tensor<S> focal_per_class(const Tensor<S>& probs, const TargetPlanes<S>& t, S gamma) {
  check_targets(probs, t, "loss_focal");
  Graph<S>& g = probs.graph();
  auto y_hat = g.constant(t.onehot);
  NDArray<S> neg_plane = t.onehot;
  neg_plane.data = (S(1) - t.onehot.data.array()).matrix();
  auto not_y_hat = g.constant(neg_plane) * g.constant(t.valid);
  auto one_minus = add_scalar(neg(probs), S(1));
  auto pos = power(one_minus, gamma) * y_hat * log(probs);
  auto negt = power(probs, gamma) * not_y_hat * log(one_minus);
  auto per_pixel = neg(pos + negt);
  return scale(sum(sum(per_pixel, 2), 0), S(1) / static_cast<S>(t.valid_count));
}

template <typename S>
Tensor<S> loss_focal(const Tensor<S>& probs, const TargetPlanes<S>& t, S gamma) {
  return mean(focal_per_class(probs, t, gamma));
}

/// Per-class dice terms [1 x C' x 1]: 1 - (2 sum y y_hat + eps) / (sum y^2 + sum y_hat^2 + eps).
template <typename S>
Tensor<S> dice_per_class(const Tensor<S>& probs, const TargetPlanes<S>& t, S eps) {
  check_targets(probs, t, "loss_dice");
  Graph<S>& g = probs.graph();
  auto y = probs * g.constant(t.valid);
  auto y_hat = g.constant(t.onehot);
  auto inter = sum(sum(y * y_hat, 2), 0);
  auto denom = sum(sum(y * y, 2), 0) + sum(sum(y_hat * y_hat, 2), 0);
  auto ratio = add_scalar(scale(inter, S(2)), eps) * power(add_scalar(denom, eps), S(-1));
  return add_scalar(neg(ratio), S(1));
}

template <typename S>
Tensor<S> loss_dice(const Tensor<S>& probs, const TargetPlanes<S>& t, S eps) {
  return mean(dice_per_class(probs, t, eps));
}

/// Plain mean binary cross-entropy over valid pixels and classes.
template <typename S>
Tensor<S> loss_bce(const Tensor<S>& probs, const TargetPlanes<S>& t) {
  return loss_focal(probs, t, S(0));
}

/// alpha * focal + beta * dice on sigmoid(logits).
template <typename S>
Tensor<S> loss_combined(const Tensor<S>& logits, const TargetPlanes<S>& t, const LossConfig& cfg) {
  auto probs = sigmoid(logits);
  auto focal = scale(loss_focal(probs, t, static_cast<S>(cfg.gamma)), static_cast<S>(cfg.alpha));
  auto dice = scale(loss_dice(probs, t, static_cast<S>(cfg.dice_eps)), static_cast<S>(cfg.beta));
  return focal + dice;
}

/// Dispatches on the configured mode.
template <typename S>
Tensor<S> compute_loss(const Tensor<S>& logits, const TargetPlanes<S>& t, const LossConfig& cfg) {
  switch (cfg.mode) {
    case LossMode::EL:
      return loss_el(logits, t);
    case LossMode::NELPlain:
      return loss_bce(sigmoid(logits), t);
    case LossMode::NELPlus:
      return loss_combined(logits, t, cfg);
  }
  throw ConfigError("unknown loss mode");
}

}  // namespace zeg
