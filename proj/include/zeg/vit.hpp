#pragma once

// Small ViT image encoder with three update regimes: frozen (Fix), fully
// fine-tuned (FT) and deep prompt tuning (DPT). Under DPT each covered layer
// sees [cls] ++ prompts ++ patches; the outputs at prompt positions are dropped
// before the next layer, which receives fresh prompts of its own (if any).

#include "zeg/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace zeg {

enum class Regime { Fix, FT, DPT };

inline std::string regime_name(Regime r) {
  switch (r) {
    case Regime::Fix:
      return "fix";
    case Regime::FT:
      return "ft";
    case Regime::DPT:
      return "dpt";
  }
  return "?";
}

inline Regime parse_regime(const std::string& s) {
  if (s == "fix") return Regime::Fix;
  if (s == "ft") return Regime::FT;
  if (s == "dpt") return Regime::DPT;
  throw ConfigError("unknown regime '" + s + "' (expected fix, ft or dpt)");
}

struct EncoderConfig {
  Index image_size = 32;
  Index patch_size = 8;
  Index channels = 3;
  Index depth = 6;
  Index width = 64;
  Index heads = 4;
  Index mlp_ratio = 4;

  Index grid() const { return image_size / patch_size; }
  Index num_patches() const { return grid() * grid(); }
  Index patch_dim() const { return channels * patch_size * patch_size; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
      throw ConfigError("encoder: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                        std::to_string(patch_size));
    }
    if (depth < 1 || width < 1 || channels < 1 || mlp_ratio < 1) throw ConfigError("encoder: non-positive extent");
    if (heads < 1 || width % heads != 0) {
      throw ConfigError("encoder: width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    }
  }
};

/// Prompt placement. Layers are numbered 1..depth from the input side;
/// last_layer == 0 means "through the top layer".
struct PromptConfig {
  Index tokens = 10;
  Index first_layer = 1;
  Index last_layer = 0;

  Index resolved_last(Index depth) const { return last_layer == 0 ? depth : last_layer; }

  void validate(Index depth) const {
    const Index last = resolved_last(depth);
    if (tokens < 0) throw ConfigError("prompts: negative token count");
    if (first_layer < 1 || first_layer > last || last > depth) {
      throw ConfigError("prompts: layer range " + std::to_string(first_layer) + ".." + std::to_string(last) +
                        " outside 1.." + std::to_string(depth));
    }
  }
};

/// Learnable per-layer prompt tokens P^l, each [M, d].
template <typename S>
class PromptBank {
 public:
  PromptBank() = default;
  PromptBank(const EncoderConfig& enc, PromptConfig cfg, std::mt19937_64& rng) : cfg_(cfg), depth_(enc.depth) {
    cfg_.validate(enc.depth);
    for (Index l = cfg_.first_layer; l <= cfg_.resolved_last(depth_); ++l) {
      tokens_.emplace_back("prompts.layer" + std::to_string(l), NDArray<S>::normal({cfg_.tokens, enc.width}, rng, 0.02));
    }
  }

  const PromptConfig& config() const { return cfg_; }
  Index count() const { return cfg_.tokens; }

  /// `layer` is zero-based.
  bool covers(Index layer) const { return layer + 1 >= cfg_.first_layer && layer + 1 <= cfg_.resolved_last(depth_); }
  Parameter<S>& tokens(Index layer) { return tokens_.at(static_cast<std::size_t>(layer + 1 - cfg_.first_layer)); }

  void collect(ParameterList<S>& out) {
    for (auto& p : tokens_) out.push_back(&p);
  }

 private:
  PromptConfig cfg_;
  Index depth_ = 0;
  std::vector<Parameter<S>> tokens_;
};

/// Test hooks. `identity_attention` replaces each attention sub-block with the
/// identity on its (normalised) input, removing all token mixing.
struct EncoderHooks {
  bool identity_attention = false;
  std::vector<Index>* sequence_lengths = nullptr;
};

template <typename S>
struct EncoderOutput {
  Tensor<S> cls;      // g: [B, d]
  Tensor<S> patches;  // H: [B, N, d], raster patch order
};

template <typename S>
struct EncoderLayer {
  LayerNorm<S> ln1;
  Linear<S> qkv;
  Linear<S> proj;
  LayerNorm<S> ln2;
  Linear<S> fc1;
  Linear<S> fc2;

  EncoderLayer() = default;
  EncoderLayer(const std::string& name, const EncoderConfig& cfg, std::mt19937_64& rng)
      : ln1(name + ".ln1", cfg.width),
        qkv(name + ".qkv", cfg.width, 3 * cfg.width, rng),
        proj(name + ".proj", cfg.width, cfg.width, rng),
        ln2(name + ".ln2", cfg.width),
        fc1(name + ".fc1", cfg.width, cfg.mlp_ratio * cfg.width, rng),
        fc2(name + ".fc2", cfg.mlp_ratio * cfg.width, cfg.width, rng) {}

  Tensor<S> forward(Graph<S>& g, const Tensor<S>& x, Index heads, const EncoderHooks& hooks) {
    const Index d = x.shape().back();
    auto h = ln1(g, x);
    Tensor<S> mixed;
    if (hooks.identity_attention) {
      mixed = h;
    } else {
      auto t = qkv(g, h);
      mixed = proj(g, multi_head_attention(slice(t, 2, 0, d), slice(t, 2, d, 2 * d), slice(t, 2, 2 * d, 3 * d), heads));
    }
    auto y = x + mixed;
    return y + fc2(g, gelu(fc1(g, ln2(g, y))));
  }

  void collect(ParameterList<S>& out) {
    ln1.collect(out);
    qkv.collect(out);
    proj.collect(out);
    ln2.collect(out);
    fc1.collect(out);
    fc2.collect(out);
  }
};

template <typename S>
class Encoder {
 public:
  Encoder() = default;
  Encoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(mix_seed(seed, 0xe1c0de));
    patch_embed_ = Linear<S>("encoder.patch_embed", cfg_.patch_dim(), cfg_.width, rng);
    cls_ = Parameter<S>("encoder.cls", NDArray<S>::normal({cfg_.width}, rng, 0.02));
    pos_ = Parameter<S>("encoder.pos", NDArray<S>::normal({cfg_.num_patches() + 1, cfg_.width}, rng, 0.02));
    ln_pre_ = LayerNorm<S>("encoder.ln_pre", cfg_.width);
    for (Index l = 0; l < cfg_.depth; ++l) layers_.emplace_back("encoder.layers." + std::to_string(l), cfg_, rng);
    ln_post_ = LayerNorm<S>("encoder.ln_post", cfg_.width);
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Rearranges [B, C, H, W] images into [B, N, C*p*p] raster-ordered patches.
  static NDArray<S> extract_patches(const EncoderConfig& cfg, const NDArray<S>& images) {
    if (images.rank() != 4 || images.dim(1) != cfg.channels || images.dim(2) != cfg.image_size ||
        images.dim(3) != cfg.image_size) {
      throw ShapeError("encoder: expected images [B x " + std::to_string(cfg.channels) + " x " +
                       std::to_string(cfg.image_size) + " x " + std::to_string(cfg.image_size) + "], got " +
                       shape_string(images.shape));
    }
    const Index batch = images.dim(0), p = cfg.patch_size, grid = cfg.grid(), size = cfg.image_size;
    NDArray<S> out({batch, cfg.num_patches(), cfg.patch_dim()});
    Index w = 0;
    for (Index b = 0; b < batch; ++b)
      for (Index py = 0; py < grid; ++py)
        for (Index px = 0; px < grid; ++px)
          for (Index c = 0; c < cfg.channels; ++c)
            for (Index dy = 0; dy < p; ++dy)
              for (Index dx = 0; dx < p; ++dx)
                out[w++] = images[((b * cfg.channels + c) * size + py * p + dy) * size + px * p + dx];
    return out;
  }

  /// Linear patch embedding without positions: [B, N, d].
  Tensor<S> embed_patches(Graph<S>& g, const NDArray<S>& images) {
    return patch_embed_(g, g.constant(extract_patches(cfg_, images)));
  }

  /// [cls] ++ patch tokens with learned positional embeddings: [B, 1+N, d].
  Tensor<S> embed(Graph<S>& g, const NDArray<S>& images) {
    auto patches = embed_patches(g, images);
    const Index batch = patches.dim(0);
    auto cls = broadcast_to(reshape(g.parameter(cls_), {1, 1, cfg_.width}), {batch, 1, cfg_.width});
    auto tokens = concat<S>({cls, patches}, 1);
    return tokens + reshape(g.parameter(pos_), {1, cfg_.num_patches() + 1, cfg_.width});
  }

  EncoderOutput<S> encode(Graph<S>& g, const NDArray<S>& images, Regime regime, PromptBank<S>* prompts,
                          const EncoderHooks& hooks = {}) {
    if (regime == Regime::DPT && prompts == nullptr) throw ConfigError("encoder: DPT regime requires a prompt bank");
    if (regime != Regime::DPT && prompts != nullptr) {
      throw ConfigError("encoder: " + regime_name(regime) + " regime does not take a prompt bank");
    }
    const Index n = cfg_.num_patches();
    auto x = ln_pre_(g, embed(g, images));
    const Index batch = x.dim(0);
    for (Index l = 0; l < cfg_.depth; ++l) {
      const bool prompted = prompts != nullptr && prompts->covers(l);
      Tensor<S> input = x;
      Index m = 0;
      if (prompted) {
        m = prompts->count();
        auto p = broadcast_to(reshape(g.parameter(prompts->tokens(l)), {1, m, cfg_.width}), {batch, m, cfg_.width});
        input = concat<S>({slice(x, 1, 0, 1), p, slice(x, 1, 1, 1 + n)}, 1);
      }
      if (hooks.sequence_lengths != nullptr) hooks.sequence_lengths->push_back(input.dim(1));
      auto y = layers_[static_cast<std::size_t>(l)].forward(g, input, cfg_.heads, hooks);
      x = prompted ? concat<S>({slice(y, 1, 0, 1), slice(y, 1, 1 + m, 1 + m + n)}, 1) : y;
    }
    x = ln_post_(g, x);
    return {reshape(slice(x, 1, 0, 1), {batch, cfg_.width}), slice(x, 1, 1, 1 + n)};
  }

  ParameterList<S> parameters() {
    ParameterList<S> out;
    patch_embed_.collect(out);
    out.push_back(&cls_);
    out.push_back(&pos_);
    ln_pre_.collect(out);
    for (auto& layer : layers_) layer.collect(out);
    ln_post_.collect(out);
    return out;
  }

  void set_trainable(bool trainable) {
    for (auto* p : parameters()) p->trainable = trainable;
  }

 private:
  EncoderConfig cfg_;
  Linear<S> patch_embed_;
  Parameter<S> cls_;
  Parameter<S> pos_;
  LayerNorm<S> ln_pre_;
  std::vector<EncoderLayer<S>> layers_;
  LayerNorm<S> ln_post_;
};

}  // namespace zeg
