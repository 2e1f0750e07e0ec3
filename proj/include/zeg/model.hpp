#pragma once

// The full one-stage segmenter: image encoder (under one of three update
// regimes), image-specific class queries and the mask decoder.

#include "zeg/decoder.hpp"
#include "zeg/text_query.hpp"
#include "zeg/vit.hpp"

#include <optional>
#include <vector>

namespace zeg {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  PromptConfig prompts;
  Regime regime = Regime::DPT;
  QueryFormat format = QueryFormat::CAT_TG_T;
  Index embed_dim = 64;

  void validate() const {
    encoder.validate();
    decoder.validate();
    if (regime == Regime::DPT) prompts.validate(encoder.depth);
    if (embed_dim != encoder.width) {
      throw ConfigError("model: text embedding width " + std::to_string(embed_dim) + " differs from encoder width " +
                        std::to_string(encoder.width));
    }
  }
};

template <typename S>
struct ForwardOutput {
  Tensor<S> image_embedding;  // normalised g [B x d]
  Tensor<S> patches;          // H [B x N x d]
  Tensor<S> queries;          // [B x C' x dim]
  Tensor<S> masks;            // [B x C' x N]
  Tensor<S> logits;           // [B x C' x H*W]
};

template <typename S>
class SegModel {
 public:
  SegModel() = default;

  /// Takes the (pre-trained) encoder by value and builds the trainable parts
  /// from `seed`.
  SegModel(ModelConfig cfg, Encoder<S> encoder, std::uint64_t seed) : cfg_(std::move(cfg)), encoder_(std::move(encoder)) {
    cfg_.encoder = encoder_.config();
    cfg_.validate();
    decoder_ = Decoder<S>(cfg_.decoder, query_dim(cfg_.format, cfg_.embed_dim), cfg_.encoder.width, seed);
    apply_regime(seed);
  }

  const ModelConfig& config() const { return cfg_; }
  Encoder<S>& encoder() { return encoder_; }
  Decoder<S>& decoder() { return decoder_; }
  PromptBank<S>* prompts() { return prompts_ ? &*prompts_ : nullptr; }

  ForwardOutput<S> forward(Graph<S>& g, const NDArray<S>& images, const ClassEmbeddingBank& bank,
                           const std::vector<Index>& active, const EncoderHooks& enc_hooks = {},
                           const DecoderHooks& dec_hooks = {}) {
    if (bank.dim() != cfg_.embed_dim) {
      throw ConfigError("model: embedding bank width " + std::to_string(bank.dim()) + " differs from model width " +
                        std::to_string(cfg_.embed_dim));
    }
    auto enc = encoder_.encode(g, images, cfg_.regime, prompts(), enc_hooks);
    ForwardOutput<S> out;
    out.image_embedding = l2_normalize(enc.cls);
    out.patches = enc.patches;
    out.queries = build_queries(g.constant(bank.rows<S>(active)), out.image_embedding, cfg_.format);
    out.masks = decoder_.decode(g, out.queries, out.patches, dec_hooks).masks;
    out.logits = upsample(out.masks, images.dim(2), images.dim(3));
    return out;
  }

  /// Every parameter, encoder first; prompts (if any) follow the encoder.
  ParameterList<S> parameters() {
    ParameterList<S> list = encoder_.parameters();
    if (prompts_) prompts_->collect(list);
    for (auto* p : decoder_.parameters()) list.push_back(p);
    return list;
  }

  ParameterList<S> trainable_parameters() {
    ParameterList<S> list;
    for (auto* p : parameters())
      if (p->trainable) list.push_back(p);
    return list;
  }

  ParameterList<S> frozen_parameters() {
    ParameterList<S> list;
    for (auto* p : parameters())
      if (!p->trainable) list.push_back(p);
    return list;
  }

  /// Trainable encoder-side parameters (empty under Fix, all encoder weights
  /// under FT, the prompt bank under DPT).
  ParameterList<S> encoder_trainable() {
    ParameterList<S> list;
    for (auto* p : encoder_.parameters())
      if (p->trainable) list.push_back(p);
    if (prompts_) prompts_->collect(list);
    return list;
  }

 private:
  void apply_regime(std::uint64_t seed) {
    encoder_.set_trainable(cfg_.regime == Regime::FT);
    prompts_.reset();
    if (cfg_.regime == Regime::DPT) {
      std::mt19937_64 rng(mix_seed(seed, 0x9e0b7));
      prompts_.emplace(cfg_.encoder, cfg_.prompts, rng);
    }
  }

  ModelConfig cfg_;
  Encoder<S> encoder_;
  std::optional<PromptBank<S>> prompts_;
  Decoder<S> decoder_;
};

}  // namespace zeg
