#pragma once

// Query-to-patch transformer decoder. Intermediate layers update the class
// queries by cross-attention over the patch tokens; the final layer returns its
// single-head pre-softmax score matrix Q K^T / sqrt(d_k) as the mask logits.

#include "zeg/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace zeg {

struct DecoderConfig {
  Index layers = 3;
  Index width = 64;  // d_k
  Index heads = 4;
  Index mlp_ratio = 4;
  bool query_self_attention = false;

  void validate() const {
    if (layers < 1) throw ConfigError("decoder: layers must be at least 1");
    if (width < 1 || mlp_ratio < 1) throw ConfigError("decoder: non-positive width");
    if (heads < 1 || width % heads != 0) {
      throw ConfigError("decoder: width " + std::to_string(width) + " not divisible by heads " + std::to_string(heads));
    }
  }
};

/// Test hooks for the reduced configuration.
struct DecoderHooks {
  bool disable_residual = false;
  bool disable_mlp = false;
  bool disable_norm = false;
};

/// Q K^T / sqrt(d_k) for Q [.. x C' x d_k] and K [.. x N x d_k].
template <typename S>
Tensor<S> scaled_scores(const Tensor<S>& q, const Tensor<S>& k) {
  if (q.shape().back() != k.shape().back()) {
    throw ShapeError("decoder: query width " + shape_string(q.shape()) + " differs from key width " +
                     shape_string(k.shape()));
  }
  const S inv = S(1) / std::sqrt(static_cast<S>(q.shape().back()));
  return scale(matmul(q, transpose(k)), inv);
}

template <typename S>
struct DecoderLayer {
  LayerNorm<S> ln_self;
  Linear<S> self_qkv;
  Linear<S> self_out;
  LayerNorm<S> ln_q;
  LayerNorm<S> ln_p;
  Linear<S> wq;
  Linear<S> wk;
  Linear<S> wv;
  Linear<S> out;
  LayerNorm<S> ln_mlp;
  Linear<S> fc1;
  Linear<S> fc2;
  bool self_attention = false;

  DecoderLayer() = default;
  DecoderLayer(const std::string& name, const DecoderConfig& cfg, std::mt19937_64& rng)
      : ln_q(name + ".ln_q", cfg.width),
        ln_p(name + ".ln_p", cfg.width),
        wq(name + ".wq", cfg.width, cfg.width, rng),
        wk(name + ".wk", cfg.width, cfg.width, rng),
        wv(name + ".wv", cfg.width, cfg.width, rng),
        out(name + ".out", cfg.width, cfg.width, rng),
        ln_mlp(name + ".ln_mlp", cfg.width),
        fc1(name + ".fc1", cfg.width, cfg.mlp_ratio * cfg.width, rng),
        fc2(name + ".fc2", cfg.mlp_ratio * cfg.width, cfg.width, rng),
        self_attention(cfg.query_self_attention) {
    if (self_attention) {
      ln_self = LayerNorm<S>(name + ".ln_self", cfg.width);
      self_qkv = Linear<S>(name + ".self_qkv", cfg.width, 3 * cfg.width, rng);
      self_out = Linear<S>(name + ".self_out", cfg.width, cfg.width, rng);
    }
  }

  Tensor<S> forward(Graph<S>& g, Tensor<S> q, const Tensor<S>& p, Index heads, const DecoderHooks& hooks) {
    auto norm = [&](LayerNorm<S>& ln, const Tensor<S>& x) { return hooks.disable_norm ? x : ln(g, x); };
    const Index d = q.shape().back();
    if (self_attention) {
      auto t = self_qkv(g, norm(ln_self, q));
      auto a = self_out(g, multi_head_attention(slice(t, 2, 0, d), slice(t, 2, d, 2 * d), slice(t, 2, 2 * d, 3 * d), heads));
      q = hooks.disable_residual ? a : q + a;
    }
    auto pn = norm(ln_p, p);
    auto a = out(g, multi_head_attention(wq(g, norm(ln_q, q)), wk(g, pn), wv(g, pn), heads));
    q = hooks.disable_residual ? a : q + a;
    if (hooks.disable_mlp) return q;
    auto m = fc2(g, gelu(fc1(g, norm(ln_mlp, q))));
    return hooks.disable_residual ? m : q + m;
  }

  void collect(ParameterList<S>& list) {
    if (self_attention) {
      ln_self.collect(list);
      self_qkv.collect(list);
      self_out.collect(list);
    }
    ln_q.collect(list);
    ln_p.collect(list);
    wq.collect(list);
    wk.collect(list);
    wv.collect(list);
    out.collect(list);
    ln_mlp.collect(list);
    fc1.collect(list);
    fc2.collect(list);
  }
};

template <typename S>
struct DecoderOutput {
  Tensor<S> masks;    // [B x C' x N]
  Tensor<S> queries;  // final-layer Q [B x C' x d_k]
  Tensor<S> keys;     // final-layer K [B x N x d_k]
};

template <typename S>
class Decoder {
 public:
  Decoder() = default;
  Decoder(DecoderConfig cfg, Index query_dim, Index patch_dim, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(mix_seed(seed, 0xdec0de));
    proj_query_ = Linear<S>("decoder.proj_query", query_dim, cfg_.width, rng);
    proj_patch_ = Linear<S>("decoder.proj_patch", patch_dim, cfg_.width, rng);
    for (Index l = 0; l + 1 < cfg_.layers; ++l) {
      layers_.emplace_back("decoder.layers." + std::to_string(l), cfg_, rng);
    }
    final_ln_q_ = LayerNorm<S>("decoder.final.ln_q", cfg_.width);
    final_ln_p_ = LayerNorm<S>("decoder.final.ln_p", cfg_.width);
    final_wq_ = Linear<S>("decoder.final.wq", cfg_.width, cfg_.width, rng);
    final_wk_ = Linear<S>("decoder.final.wk", cfg_.width, cfg_.width, rng);
  }

  const DecoderConfig& config() const { return cfg_; }
  Index query_dim() const { return proj_query_.in_features(); }
  Index patch_dim() const { return proj_patch_.in_features(); }

  Linear<S>& proj_query() { return proj_query_; }
  Linear<S>& proj_patch() { return proj_patch_; }
  Linear<S>& final_wq() { return final_wq_; }
  Linear<S>& final_wk() { return final_wk_; }

  /// Maps queries [B x C' x dim] and patches [B x N x d] to the common width d_k.
  std::pair<Tensor<S>, Tensor<S>> project_inputs(Graph<S>& g, const Tensor<S>& queries, const Tensor<S>& patches) {
    return {proj_query_(g, queries), proj_patch_(g, patches)};
  }

  DecoderOutput<S> decode(Graph<S>& g, const Tensor<S>& queries, const Tensor<S>& patches, const DecoderHooks& hooks = {}) {
    if (queries.shape().back() != query_dim()) {
      throw ShapeError("decoder: queries " + shape_string(queries.shape()) + " do not have width " +
                       std::to_string(query_dim()));
    }
    if (patches.shape().back() != patch_dim()) {
      throw ShapeError("decoder: patches " + shape_string(patches.shape()) + " do not have width " +
                       std::to_string(patch_dim()));
    }
    auto [q, p] = project_inputs(g, queries, patches);
    for (auto& layer : layers_) q = layer.forward(g, q, p, cfg_.heads, hooks);
    auto fq = final_wq_(g, hooks.disable_norm ? q : final_ln_q_(g, q));
    auto fk = final_wk_(g, hooks.disable_norm ? p : final_ln_p_(g, p));
    return {scaled_scores(fq, fk), fq, fk};
  }

  ParameterList<S> parameters() {
    ParameterList<S> list;
    proj_query_.collect(list);
    proj_patch_.collect(list);
    for (auto& layer : layers_) layer.collect(list);
    final_ln_q_.collect(list);
    final_ln_p_.collect(list);
    final_wq_.collect(list);
    final_wk_.collect(list);
    return list;
  }

 private:
  DecoderConfig cfg_;
  Linear<S> proj_query_;
  Linear<S> proj_patch_;
  std::vector<DecoderLayer<S>> layers_;
  LayerNorm<S> final_ln_q_;
  LayerNorm<S> final_ln_p_;
  Linear<S> final_wq_;
  Linear<S> final_wk_;
};

/// Bilinear resampling matrix [gh*gw x H*W] with half-pixel centres
/// (align_corners = false): source coordinate (i + 0.5) * in / out - 0.5,
/// clamped to [0, in - 1].
template <typename S>
NDArray<S> bilinear_weights(Index grid_h, Index grid_w, Index out_h, Index out_w) {
  auto axis = [](Index in, Index out) {
    std::vector<std::array<std::pair<Index, double>, 2>> taps(static_cast<std::size_t>(out));
    const double ratio = static_cast<double>(in) / static_cast<double>(out);
    for (Index o = 0; o < out; ++o) {
      const double src = std::clamp((static_cast<double>(o) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(in - 1));
      const Index i0 = static_cast<Index>(std::floor(src));
      const Index i1 = std::min(i0 + 1, in - 1);
      const double frac = src - static_cast<double>(i0);
      taps[static_cast<std::size_t>(o)] = {std::pair{i0, 1.0 - frac}, std::pair{i1, frac}};
    }
    return taps;
  };
  const auto ty = axis(grid_h, out_h), tx = axis(grid_w, out_w);
  NDArray<S> w({grid_h * grid_w, out_h * out_w});
  for (Index y = 0; y < out_h; ++y) {
    for (Index x = 0; x < out_w; ++x) {
      for (const auto& [iy, wy] : ty[static_cast<std::size_t>(y)]) {
        for (const auto& [ix, wx] : tx[static_cast<std::size_t>(x)]) {
          w[(iy * grid_w + ix) * out_h * out_w + y * out_w + x] += static_cast<S>(wy * wx);
        }
      }
    }
  }
  return w;
}

inline Index square_grid(Index n) {
  const Index side = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(n))));
  if (side * side != n) throw ShapeError("upsample: " + std::to_string(n) + " patches do not form a square grid");
  return side;
}

/// [.. x N] mask logits -> [.. x H*W] pixel logits.
template <typename S>
Tensor<S> upsample(const Tensor<S>& masks, Index out_h, Index out_w) {
  const Index grid = square_grid(masks.shape().back());
  return matmul(masks, masks.graph().constant(bilinear_weights<S>(grid, grid, out_h, out_w)));
}

/// Per-pixel argmax over the class axis of [C' x P] logits; ties go to the
/// lowest row. Returns indices into `classes` mapped to class ids.
template <typename S>
std::vector<Index> predict(const NDArray<S>& logits, const std::vector<Index>& classes) {
  if (logits.rank() != 2 || logits.dim(0) < 1) throw ShapeError("predict: expected [C' x P] logits");
  if (static_cast<Index>(classes.size()) != logits.dim(0)) throw ShapeError("predict: class list length mismatch");
  const Index c = logits.dim(0), p = logits.dim(1);
  std::vector<Index> out(static_cast<std::size_t>(p));
  for (Index i = 0; i < p; ++i) {
    Index best = 0;
    for (Index k = 1; k < c; ++k)
      if (logits[k * p + i] > logits[best * p + i]) best = k;
    out[static_cast<std::size_t>(i)] = classes[static_cast<std::size_t>(best)];
  }
  return out;
}

}  // namespace zeg
