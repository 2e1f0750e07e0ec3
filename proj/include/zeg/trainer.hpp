#pragma once

// Optimisation loops: encoder pre-training (the frozen backbone stand-in),
// inductive and transductive segmentation training, pseudo-labelling and
// evaluation.

#include "zeg/config.hpp"
#include "zeg/losses.hpp"
#include "zeg/metrics.hpp"
#include "zeg/model.hpp"
#include "zeg/optimizer.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace zeg {

/// Non-finite loss or an inconsistent training setup.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct HistoryRecord {
  Index iter = 0;
  std::string phase;
  double loss = 0;
  double lr = 0;

  bool operator==(const HistoryRecord&) const = default;
};

using History = std::vector<HistoryRecord>;
using LogCallback = std::function<void(const HistoryRecord&)>;

/// Epoch-wise shuffled sample order, deterministic in `seed`.
class BatchSampler {
 public:
  BatchSampler(Index n, std::uint64_t seed) : n_(n), rng_(seed) {
    if (n <= 0) throw TrainingError("cannot sample batches from an empty dataset");
  }

  std::vector<Index> next(Index batch) {
    std::vector<Index> out;
    out.reserve(static_cast<std::size_t>(batch));
    while (static_cast<Index>(out.size()) < batch) {
      if (pos_ == order_.size()) {
        order_.resize(static_cast<std::size_t>(n_));
        std::iota(order_.begin(), order_.end(), Index{0});
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  Index n_;
  std::mt19937_64 rng_;
  std::vector<Index> order_;
  std::size_t pos_ = 0;
};

inline std::vector<std::vector<std::uint8_t>> batch_labels(const Dataset& data, const std::vector<Index>& indices) {
  std::vector<std::vector<std::uint8_t>> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(data.samples.at(static_cast<std::size_t>(i)).labels);
  return out;
}

// ---------------------------------------------------------------------------
// Encoder pre-training

struct PretrainConfig {
  Index iters = 6000;
  Index batch = 16;
  Index samples = 16384;
  double lr = 1e-3;
  double wd = 1e-4;
  double tau = 10.0;
  double dense_weight = 0.0;
  std::uint64_t seed = 0;
  Index log_every = 50;

  KeyValues to_kv() const {
    return {{"pretrain.iters", std::to_string(iters)},         {"pretrain.batch", std::to_string(batch)},
            {"pretrain.samples", std::to_string(samples)},     {"pretrain.lr", format_double(lr)},
            {"pretrain.wd", format_double(wd)},                {"pretrain.tau", format_double(tau)},
            {"pretrain.dense_weight", format_double(dense_weight)}, {"pretrain.seed", std::to_string(seed)}};
  }
};

/// Per-image attribute presence [B x A] and per-patch attribute coverage
/// [B x N x A] (fraction of patch pixels carrying the attribute).
template <typename S>
std::pair<NDArray<S>, NDArray<S>> attribute_targets(const Dataset& data, const std::vector<Index>& indices,
                                                    Index patch_size) {
  const WorldSpec& w = data.world;
  const Index shapes = static_cast<Index>(w.shapes.size());
  const Index attrs = shapes + static_cast<Index>(w.colors.size()) + (w.background_class ? 1 : 0);
  const Index grid = data.width / patch_size, n = grid * grid;
  const Index batch = static_cast<Index>(indices.size());
  NDArray<S> image({batch, attrs}), dense({batch, n, attrs});
  const S area = static_cast<S>(patch_size * patch_size);
  for (Index b = 0; b < batch; ++b) {
    const auto& s = data.samples.at(static_cast<std::size_t>(indices[static_cast<std::size_t>(b)]));
    for (const auto& o : s.objects) {
      image[b * attrs + w.shape_of(o.class_id)] = S(1);
      image[b * attrs + shapes + w.color_of(o.class_id)] = S(1);
    }
    // Pixel classes come from the object list so that hidden labels do not matter.
    std::vector<Index> cls(static_cast<std::size_t>(data.height * data.width), -1);
    for (const auto& o : s.objects) {
      const auto mask = shape_mask(w.shapes[static_cast<std::size_t>(w.shape_of(o.class_id))], o.size);
      for (Index y = 0; y < o.size; ++y)
        for (Index x = 0; x < o.size; ++x)
          if (mask[static_cast<std::size_t>(y * o.size + x)]) {
            cls[static_cast<std::size_t>((o.y + y) * data.width + o.x + x)] = o.class_id;
          }
    }
    for (Index py = 0; py < data.height; ++py) {
      for (Index px = 0; px < data.width; ++px) {
        const Index c = cls[static_cast<std::size_t>(py * data.width + px)];
        const Index patch = (py / patch_size) * grid + px / patch_size;
        S* row = &dense[(b * n + patch) * attrs];
        if (c < 0) {
          if (w.background_class) row[attrs - 1] += S(1) / area;
          continue;
        }
        row[w.shape_of(c)] += S(1) / area;
        row[shapes + w.color_of(c)] += S(1) / area;
      }
    }
    if (w.background_class) image[b * attrs + attrs - 1] = S(1);
  }
  return {image, dense};
}

template <typename S>
Tensor<S> soft_bce(const Tensor<S>& logits, const NDArray<S>& targets) {
  Graph<S>& g = logits.graph();
  auto p = sigmoid(logits);
  auto y = g.constant(targets);
  NDArray<S> inv = targets;
  inv.data = (S(1) - targets.data.array()).matrix();
  return neg(mean(y * log(p) + g.constant(inv) * log(add_scalar(neg(p), S(1)))));
}

/// Trains the encoder to align its [cls] token (and optionally its patch
/// tokens) with the shape and color attribute directions of the text side,
/// through cosine logits tau * cos(x, a_j) + b_j and binary cross-entropy.
template <typename S>
History pretrain_encoder(Encoder<S>& encoder, const Dataset& data, const PretrainConfig& cfg,
                         const LogCallback& on_log = {}) {
  const WorldSpec& w = data.world;
  if (w.embed_dim != encoder.config().width) {
    throw ConfigError("pretrain: embedding width " + std::to_string(w.embed_dim) + " differs from encoder width " +
                      std::to_string(encoder.config().width));
  }
  NDArray<S> attrs = attribute_vectors(w).cast<S>();
  for (Index r = 0; r < attrs.dim(0); ++r) attrs.matrix().row(r).normalize();
  NDArray<S> attrs_t({attrs.dim(1), attrs.dim(0)});
  attrs_t.matrix() = attrs.matrix().transpose();
  const Index a = attrs.dim(0);
  Parameter<S> bias_image("pretrain.bias_image", NDArray<S>({a}));
  Parameter<S> bias_patch("pretrain.bias_patch", NDArray<S>({a}));

  encoder.set_trainable(true);
  ParameterList<S> params = encoder.parameters();
  params.push_back(&bias_image);
  if (cfg.dense_weight > 0) params.push_back(&bias_patch);
  AdamW<S> opt({cfg.lr, cfg.wd});
  BatchSampler sampler(data.size(), mix_seed(cfg.seed, 0x9e7a));
  History history;
  for (Index it = 1; it <= cfg.iters; ++it) {
    const auto idx = sampler.next(cfg.batch);
    const auto [image_t, dense_t] = attribute_targets<S>(data, idx, encoder.config().patch_size);
    Graph<S> g;
    auto enc = encoder.encode(g, batch_images<S>(data, idx), Regime::FT, nullptr);
    auto at = g.constant(attrs_t);
    auto tau = static_cast<S>(cfg.tau);
    auto image_logits = scale(matmul(l2_normalize(enc.cls), at), tau) + g.parameter(bias_image);
    auto loss = soft_bce(image_logits, image_t);
    if (cfg.dense_weight > 0) {
      auto patch_logits = scale(matmul(l2_normalize(enc.patches), at), tau) + g.parameter(bias_patch);
      loss = loss + scale(soft_bce(patch_logits, dense_t), static_cast<S>(cfg.dense_weight));
    }
    if (!std::isfinite(static_cast<double>(loss.item()))) {
      throw TrainingError("pretrain: non-finite loss at iteration " + std::to_string(it));
    }
    g.backward(loss);
    opt.step(params);
    zero_grad(params);
    if (it == 1 || it % cfg.log_every == 0 || it == cfg.iters) {
      history.push_back({it, "pretrain", static_cast<double>(loss.item()), cfg.lr});
      if (on_log) on_log(history.back());
    }
  }
  encoder.set_trainable(false);
  return history;
}

// ---------------------------------------------------------------------------
// Pseudo-labelling

/// Fills ignored pixels of `labels` from all-class logits [C x P] (row = class
/// id). TransductiveAll takes the argmax class; TransductiveUnseenOnly only
/// accepts an argmax in the unseen set. With a threshold, pixels whose best
/// sigmoid probability falls below it stay ignored. Labelled pixels are kept.
template <typename S>
std::vector<std::uint8_t> pseudo_label(const NDArray<S>& logits, const std::vector<std::uint8_t>& labels,
                                       const std::vector<bool>& seen, TrainMode mode, std::optional<double> threshold,
                                       std::uint8_t ignore_index = kIgnoreLabel) {
  if (!is_transductive(mode)) throw ConfigError("pseudo-labelling requires a transductive mode");
  const Index c = logits.dim(0), p = logits.dim(1);
  if (static_cast<Index>(labels.size()) != p || static_cast<Index>(seen.size()) != c) {
    throw ShapeError("pseudo_label: logits " + shape_string(logits.shape) + " do not match " +
                     std::to_string(labels.size()) + " labels and " + std::to_string(seen.size()) + " classes");
  }
  // sigmoid(x) < t  <=>  x < log(t / (1 - t)); t = 1 rejects every pixel.
  double cut = -std::numeric_limits<double>::infinity();
  if (threshold) {
    const double t = *threshold;
    cut = t >= 1.0 ? std::numeric_limits<double>::infinity()
                   : t <= 0.0 ? -std::numeric_limits<double>::infinity() : std::log(t / (1.0 - t));
  }
  std::vector<std::uint8_t> out = labels;
  for (Index i = 0; i < p; ++i) {
    if (labels[static_cast<std::size_t>(i)] != ignore_index) continue;
    Index best = 0;
    for (Index k = 1; k < c; ++k)
      if (logits[k * p + i] > logits[best * p + i]) best = k;
    const double top = static_cast<double>(logits[best * p + i]);
    if (threshold && !(top >= cut)) continue;
    if (mode == TrainMode::TransductiveUnseenOnly && seen[static_cast<std::size_t>(best)]) continue;
    out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// Model-level form: one image [3 x H x W] (or a batch of one) against all classes.
template <typename S>
std::vector<std::uint8_t> pseudo_label(SegModel<S>& model, const NDArray<S>& image,
                                       const std::vector<std::uint8_t>& labels, const ClassEmbeddingBank& bank,
                                       TrainMode mode, std::optional<double> threshold) {
  NDArray<S> batch = image;
  if (batch.rank() == 3) batch.shape.insert(batch.shape.begin(), 1);
  Graph<S> g;
  g.set_grad_enabled(false);
  auto out = model.forward(g, batch, bank, bank.all_classes());
  const Index c = out.logits.dim(1), p = out.logits.dim(2);
  return pseudo_label(NDArray<S>({c, p}, out.logits.value().data), labels, bank.seen_mask(), mode, threshold);
}

// ---------------------------------------------------------------------------
// Segmentation training

inline ModelConfig model_config(const TrainConfig& cfg, const EncoderConfig& encoder, Index embed_dim) {
  ModelConfig m;
  m.encoder = encoder;
  m.decoder = cfg.decoder;
  m.prompts = cfg.prompts;
  m.regime = cfg.regime;
  m.format = cfg.format;
  m.embed_dim = embed_dim;
  return m;
}

inline const char* phase_name(TrainMode mode, bool self_training) {
  if (self_training) return "self-train";
  return mode == TrainMode::Supervised ? "supervised" : "seen";
}

/// Runs `cfg.iters` optimisation steps on `model`. Inductive training queries
/// seen classes only; transductive training does the same for the first
/// iters - self_training_length() steps and then supervises on ground truth
/// merged with online pseudo-labels against all classes.
template <typename S>
History train(SegModel<S>& model, const TrainConfig& cfg, const Dataset& data, const ClassEmbeddingBank& bank,
              const LogCallback& on_log = {}) {
  cfg.validate();
  const LabelRegime want = cfg.mode == TrainMode::Inductive     ? LabelRegime::Inductive
                           : cfg.mode == TrainMode::Supervised ? LabelRegime::Supervised
                                                               : LabelRegime::Transductive;
  if (data.regime != want) {
    throw TrainingError("mode " + train_mode_name(cfg.mode) + " needs a " + label_regime_name(want) +
                        " training set, got " + label_regime_name(data.regime));
  }
  if (bank.num_classes() != data.world.num_classes()) {
    throw TrainingError("embedding bank has " + std::to_string(bank.num_classes()) + " classes, dataset world has " +
                        std::to_string(data.world.num_classes()));
  }
  if (bank.seen_mask() != data.split.seen_mask(data.world.num_classes())) {
    throw TrainingError("embedding bank split differs from the dataset split");
  }
  const std::vector<Index> seen_classes = bank.seen_classes();
  const std::vector<Index> all_classes = bank.all_classes();
  const Index self_iters = is_transductive(cfg.mode) ? cfg.self_training_length() : 0;
  const Index switch_at = cfg.iters - self_iters;  // last iteration of the first phase

  AdamW<S> opt({cfg.lr, cfg.wd});
  BatchSampler sampler(data.size(), mix_seed(cfg.seed, 0xba7c4));
  ParameterList<S> params = model.trainable_parameters();
  History history;
  for (Index it = 1; it <= cfg.iters; ++it) {
    const bool self_training = it > switch_at;
    const auto& active = (cfg.mode == TrainMode::Supervised || self_training) ? all_classes : seen_classes;
    const double lr = cfg.warmup > 0 ? cfg.lr * std::min(1.0, static_cast<double>(it) / static_cast<double>(cfg.warmup))
                                     : cfg.lr;
    opt.set_lr(lr);

    const auto idx = sampler.next(cfg.batch);
    auto labels = batch_labels(data, idx);
    Graph<S> g;
    auto out = model.forward(g, batch_images<S>(data, idx), bank, active);
    if (self_training) {
      const Index c = out.logits.dim(1), p = out.logits.dim(2);
      for (std::size_t b = 0; b < labels.size(); ++b) {
        NDArray<S> plane({c, p}, out.logits.value().data.segment(static_cast<Index>(b) * c * p, c * p));
        labels[b] = pseudo_label(plane, labels[b], bank.seen_mask(), cfg.mode, cfg.threshold);
      }
    }
    const auto targets = build_targets<S>(labels, active);
    double loss_value = 0;
    if (targets.valid_count > 0) {
      auto loss = compute_loss(out.logits, targets, cfg.loss);
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite loss at iteration " + std::to_string(it));
      }
      g.backward(loss);
      if (!params.empty()) opt.step(params);
      zero_grad(params);
    }
    const bool boundary = it == switch_at || it == switch_at + 1;
    if (it == 1 || it % cfg.log_every == 0 || it == cfg.iters || boundary) {
      history.push_back({it, phase_name(cfg.mode, self_training), loss_value, lr});
      if (on_log) on_log(history.back());
    }
  }
  return history;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Evaluation {
  ConfusionMatrix cm;
  EvalReport report;
};

/// Scores every sample against all classes.
template <typename S>
Evaluation evaluate(SegModel<S>& model, const Dataset& data, const ClassEmbeddingBank& bank, Index batch = 32) {
  if (data.size() == 0) throw EmptyEvaluation("evaluate: empty dataset");
  if (bank.num_classes() != data.world.num_classes()) {
    throw ConfigError("evaluate: embedding bank has " + std::to_string(bank.num_classes()) +
                      " classes, dataset world has " + std::to_string(data.world.num_classes()));
  }
  const auto classes = bank.all_classes();
  Evaluation ev{ConfusionMatrix(bank.num_classes()), {}};
  for (Index start = 0; start < data.size(); start += batch) {
    std::vector<Index> idx;
    for (Index i = start; i < std::min(start + batch, data.size()); ++i) idx.push_back(i);
    Graph<S> g;
    g.set_grad_enabled(false);
    auto out = model.forward(g, batch_images<S>(data, idx), bank, classes);
    const Index c = out.logits.dim(1), p = out.logits.dim(2);
    for (std::size_t b = 0; b < idx.size(); ++b) {
      NDArray<S> plane({c, p}, out.logits.value().data.segment(static_cast<Index>(b) * c * p, c * p));
      ev.cm.accumulate(predict(plane, classes), data.samples[static_cast<std::size_t>(idx[b])].labels);
    }
  }
  ev.report = compute(ev.cm, bank.seen_mask());
  return ev;
}

}  // namespace zeg
