#pragma once

// Training configuration. Keys mirror the command-line flags without the
// leading dashes, e.g. "query-format=cat-tg-t".

#include "zeg/decoder.hpp"
#include "zeg/kv.hpp"
#include "zeg/losses.hpp"
#include "zeg/text_query.hpp"
#include "zeg/vit.hpp"

#include <optional>
#include <string>
#include <vector>

namespace zeg {

enum class TrainMode { Inductive, TransductiveAll, TransductiveUnseenOnly, Supervised };

std::string train_mode_name(TrainMode m);
TrainMode parse_train_mode(const std::string& s);
inline bool is_transductive(TrainMode m) {
  return m == TrainMode::TransductiveAll || m == TrainMode::TransductiveUnseenOnly;
}

enum class Precision { Float, Double };
std::string precision_name(Precision p);
Precision parse_precision(const std::string& s);

struct TrainConfig {
  Index iters = 2000;
  Index batch = 8;
  double lr = 1e-3;
  double wd = 1e-4;
  Index warmup = 0;
  Regime regime = Regime::DPT;
  LossConfig loss;
  QueryFormat format = QueryFormat::CAT_TG_T;
  PromptConfig prompts;
  DecoderConfig decoder;
  TrainMode mode = TrainMode::Inductive;
  std::optional<double> threshold;
  /// Length of the self-training phase; unset means half of `iters`.
  std::optional<Index> self_training_iters;
  std::uint64_t seed = 0;
  Index log_every = 10;
  Precision precision = Precision::Float;

  Index self_training_length() const { return self_training_iters.value_or(iters - iters / 2); }

  /// Collects every problem before throwing a single ConfigError.
  void validate() const;

  KeyValues to_kv() const;
  /// Applies recognised keys on top of the current values; unknown keys are
  /// reported as errors.
  void apply(const KeyValues& kv);
  static TrainConfig from_kv(const KeyValues& kv);
};

/// "a..b" with 1-based inclusive layers; "a.." or "a..0" runs through the top.
std::pair<Index, Index> parse_layer_range(const std::string& s);
std::string format_layer_range(const PromptConfig& p);

}  // namespace zeg
