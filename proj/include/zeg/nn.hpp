#pragma once

#include "zeg/ops.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace zeg {

/// Thrown for invalid configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename S>
using ParameterList = std::vector<Parameter<S>*>;

/// splitmix64 finaliser; used to derive independent seeds from one root seed.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(mix_seed(a) ^ (b + 0x632be59bd9b4e019ULL)); }

/// Affine map y = x W + b over the last axis. W is [in, out].
template <typename S>
struct Linear {
  Parameter<S> weight;
  Parameter<S> bias;

  Linear() = default;
  Linear(const std::string& name, Index in, Index out, std::mt19937_64& rng)
      : weight(name + ".weight", NDArray<S>::normal({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)))),
        bias(name + ".bias", NDArray<S>({out})) {}

  Index in_features() const { return weight.value.dim(0); }
  Index out_features() const { return weight.value.dim(1); }

  Tensor<S> operator()(Graph<S>& g, const Tensor<S>& x) { return add(matmul(x, g.parameter(weight)), g.parameter(bias)); }

  void collect(ParameterList<S>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
};

template <typename S>
struct LayerNorm {
  Parameter<S> gain;
  Parameter<S> bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Index dim)
      : gain(name + ".gain", NDArray<S>::filled({dim}, S(1))), bias(name + ".bias", NDArray<S>({dim})) {}

  Tensor<S> operator()(Graph<S>& g, const Tensor<S>& x) { return layer_norm(x, g.parameter(gain), g.parameter(bias)); }

  void collect(ParameterList<S>& out) {
    out.push_back(&gain);
    out.push_back(&bias);
  }
};

/// Scaled dot-product attention split over `heads` column groups.
/// q: [B, Sq, D]; k, v: [B, Sk, D]. Returns [B, Sq, D].
template <typename S>
Tensor<S> multi_head_attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v, Index heads) {
  const Index width = q.shape().back();
  if (heads <= 0 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const Index dh = width / heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  if (heads == 1) return matmul(softmax(scale(matmul(q, transpose(k)), inv_sqrt), 2), v);
  std::vector<Tensor<S>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    auto qh = slice(q, 2, h * dh, (h + 1) * dh);
    auto kh = slice(k, 2, h * dh, (h + 1) * dh);
    auto vh = slice(v, 2, h * dh, (h + 1) * dh);
    outs.push_back(matmul(softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 2), vh));
  }
  return concat(outs, 2);
}

/// Rescales every vector along the last axis to unit L2 norm.
template <typename S>
Tensor<S> l2_normalize(const Tensor<S>& x, S floor = S(1e-12)) {
  return x * power(add_scalar(sum(x * x, x.rank() - 1), floor), S(-0.5));
}

/// Order-sensitive checksum over parameter bytes (FNV-1a).
template <typename S>
std::uint64_t checksum(const ParameterList<S>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto* p : params) {
    feed(p->name.data(), p->name.size());
    feed(p->value.data.data(), static_cast<std::size_t>(p->value.size()) * sizeof(S));
  }
  return h;
}

}  // namespace zeg
