#include "zeg/config.hpp"

#include <cmath>
#include <set>

namespace zeg {

std::string train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Inductive:
      return "inductive";
    case TrainMode::TransductiveAll:
      return "transductive-all";
    case TrainMode::TransductiveUnseenOnly:
      return "transductive-unseen-only";
    case TrainMode::Supervised:
      return "supervised";
  }
  return "?";
}

TrainMode parse_train_mode(const std::string& s) {
  for (auto m : {TrainMode::Inductive, TrainMode::TransductiveAll, TrainMode::TransductiveUnseenOnly,
                 TrainMode::Supervised}) {
    if (train_mode_name(m) == s) return m;
  }
  throw ConfigError("unknown mode '" + s +
                    "' (expected inductive, transductive-all, transductive-unseen-only or supervised)");
}

std::string precision_name(Precision p) { return p == Precision::Float ? "float" : "double"; }

Precision parse_precision(const std::string& s) {
  if (s == "float") return Precision::Float;
  if (s == "double") return Precision::Double;
  throw ConfigError("unknown precision '" + s + "' (expected float or double)");
}

std::pair<Index, Index> parse_layer_range(const std::string& s) {
  const auto dots = s.find("..");
  if (dots == std::string::npos) {
    const Index l = parse_int("prompt-layers", s);
    return {l, l};
  }
  const Index first = parse_int("prompt-layers", s.substr(0, dots));
  const std::string rest = s.substr(dots + 2);
  return {first, rest.empty() ? 0 : parse_int("prompt-layers", rest)};
}

std::string format_layer_range(const PromptConfig& p) {
  return std::to_string(p.first_layer) + ".." + (p.last_layer == 0 ? std::string() : std::to_string(p.last_layer));
}

void TrainConfig::validate() const {
  std::vector<std::string> errors;
  if (iters < 0) errors.push_back("iters must be non-negative");
  if (batch < 1) errors.push_back("batch must be at least 1");
  if (!(lr >= 0) || !std::isfinite(lr)) errors.push_back("lr must be a non-negative number");
  if (!(wd >= 0) || !std::isfinite(wd)) errors.push_back("wd must be a non-negative number");
  if (warmup < 0) errors.push_back("warmup must be non-negative");
  if (log_every < 1) errors.push_back("log-every must be at least 1");
  if (loss.gamma < 0) errors.push_back("gamma must be non-negative");
  if (loss.alpha < 0 || loss.beta < 0) errors.push_back("alpha and beta must be non-negative");
  if (prompts.tokens < 0) errors.push_back("prompt-tokens must be non-negative");
  if (prompts.first_layer < 1 || (prompts.last_layer != 0 && prompts.last_layer < prompts.first_layer)) {
    errors.push_back("prompt-layers range is empty or starts below 1");
  }
  try {
    decoder.validate();
  } catch (const ConfigError& e) {
    errors.push_back(e.what());
  }
  if (threshold && (!(*threshold >= 0) || *threshold > 1)) errors.push_back("threshold must lie in [0, 1]");
  if (self_training_iters) {
    if (!is_transductive(mode)) errors.push_back("self-training-iters only applies to transductive modes");
    if (*self_training_iters < 0 || *self_training_iters > iters) {
      errors.push_back("self-training-iters must lie in 0..iters");
    }
  }
  if (threshold && !is_transductive(mode)) errors.push_back("threshold only applies to transductive modes");
  if (!errors.empty()) {
    std::string msg = "invalid training configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

KeyValues TrainConfig::to_kv() const {
  KeyValues kv;
  kv["iters"] = std::to_string(iters);
  kv["batch"] = std::to_string(batch);
  kv["lr"] = format_double(lr);
  kv["wd"] = format_double(wd);
  kv["warmup"] = std::to_string(warmup);
  kv["regime"] = regime_name(regime);
  kv["loss"] = loss_mode_name(loss.mode);
  kv["alpha"] = format_double(loss.alpha);
  kv["beta"] = format_double(loss.beta);
  kv["gamma"] = format_double(loss.gamma);
  kv["query-format"] = query_format_name(format);
  kv["prompt-tokens"] = std::to_string(prompts.tokens);
  kv["prompt-layers"] = format_layer_range(prompts);
  kv["decoder-layers"] = std::to_string(decoder.layers);
  kv["decoder-width"] = std::to_string(decoder.width);
  kv["decoder-heads"] = std::to_string(decoder.heads);
  kv["decoder-self-attention"] = decoder.query_self_attention ? "1" : "0";
  kv["mode"] = train_mode_name(mode);
  kv["threshold"] = threshold ? format_double(*threshold) : "none";
  kv["self-training-iters"] = self_training_iters ? std::to_string(*self_training_iters) : "auto";
  kv["seed"] = std::to_string(seed);
  kv["log-every"] = std::to_string(log_every);
  kv["precision"] = precision_name(precision);
  return kv;
}

void TrainConfig::apply(const KeyValues& kv) {
  std::vector<std::string> errors;
  for (const auto& [key, value] : kv) {
    try {
      if (key == "iters") {
        iters = parse_int(key, value);
      } else if (key == "batch") {
        batch = parse_int(key, value);
      } else if (key == "lr") {
        lr = parse_double(key, value);
      } else if (key == "wd") {
        wd = parse_double(key, value);
      } else if (key == "warmup") {
        warmup = parse_int(key, value);
      } else if (key == "regime") {
        regime = parse_regime(value);
      } else if (key == "loss") {
        loss.mode = parse_loss_mode(value);
      } else if (key == "alpha") {
        loss.alpha = parse_double(key, value);
      } else if (key == "beta") {
        loss.beta = parse_double(key, value);
      } else if (key == "gamma") {
        loss.gamma = parse_double(key, value);
      } else if (key == "query-format") {
        format = parse_query_format(value);
      } else if (key == "prompt-tokens") {
        prompts.tokens = parse_int(key, value);
      } else if (key == "prompt-layers") {
        std::tie(prompts.first_layer, prompts.last_layer) = parse_layer_range(value);
      } else if (key == "decoder-layers") {
        decoder.layers = parse_int(key, value);
      } else if (key == "decoder-width") {
        decoder.width = parse_int(key, value);
      } else if (key == "decoder-heads") {
        decoder.heads = parse_int(key, value);
      } else if (key == "decoder-self-attention") {
        decoder.query_self_attention = parse_bool(key, value);
      } else if (key == "mode") {
        mode = parse_train_mode(value);
      } else if (key == "threshold") {
        threshold = value == "none" ? std::nullopt : std::optional<double>(parse_double(key, value));
      } else if (key == "self-training-iters") {
        self_training_iters = value == "auto" ? std::nullopt : std::optional<Index>(parse_int(key, value));
      } else if (key == "seed") {
        seed = parse_uint(key, value);
      } else if (key == "log-every") {
        log_every = parse_int(key, value);
      } else if (key == "precision") {
        precision = parse_precision(value);
      } else {
        errors.push_back("unknown key '" + key + "'");
      }
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid training configuration:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
}

TrainConfig TrainConfig::from_kv(const KeyValues& kv) {
  TrainConfig cfg;
  cfg.apply(kv);
  return cfg;
}

}  // namespace zeg
