#pragma once

// Synthetic compositional world: every class is a (shape, color) pair, and a
// split withholds some pairs whose shape and color both still occur among the
// seen classes.

#include "zeg/nn.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace zeg {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Malformed or incompatible file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { Square, Circle, Triangle, Cross };

std::string shape_kind_name(ShapeKind k);
ShapeKind parse_shape_kind(const std::string& s);

struct ColorSpec {
  std::string name;
  std::array<float, 3> rgb{};
};

struct WorldSpec {
  std::vector<ShapeKind> shapes{ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Cross};
  std::vector<ColorSpec> colors{{"red", {0.9f, 0.15f, 0.1f}}, {"green", {0.15f, 0.85f, 0.2f}}, {"blue", {0.15f, 0.25f, 0.95f}}};
  Index n_unseen = 3;
  std::uint64_t seed = 0;
  Index image_size = 32;
  Index embed_dim = 64;
  bool background_class = false;
  Index min_objects = 1;
  Index max_objects = 4;
  Index min_size = 6;
  Index max_size = 14;
  double noise_std = 0.02;

  Index num_object_classes() const { return static_cast<Index>(shapes.size() * colors.size()); }
  Index num_classes() const { return num_object_classes() + (background_class ? 1 : 0); }
  /// Class id of the background class, or -1 when background is ignored.
  Index background_id() const { return background_class ? num_object_classes() : -1; }
  Index shape_of(Index cls) const { return cls / static_cast<Index>(colors.size()); }
  Index color_of(Index cls) const { return cls % static_cast<Index>(colors.size()); }
  std::string class_name(Index cls) const;

  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  static WorldSpec from_kv(const std::map<std::string, std::string>& kv);
};

struct SplitSpec {
  std::vector<Index> seen;
  std::vector<Index> unseen;

  std::vector<bool> seen_mask(Index num_classes) const;
};

/// Deterministic split honouring compositional transferability.
SplitSpec make_split(const WorldSpec& world);

/// How training labels are produced. Test sets label every class.
enum class LabelRegime { Inductive, Transductive, Supervised, Test };

std::string label_regime_name(LabelRegime r);
LabelRegime parse_label_regime(const std::string& s);

struct PlacedObject {
  Index class_id = 0;
  Index x = 0;
  Index y = 0;
  Index size = 0;

  bool operator==(const PlacedObject&) const = default;
};

struct SampleRecord {
  std::vector<float> image;           // [3, H, W] in [0, 1]
  std::vector<std::uint8_t> labels;   // [H, W]
  std::vector<PlacedObject> objects;  // placement provenance

  bool operator==(const SampleRecord&) const = default;
};

struct Dataset {
  WorldSpec world;
  SplitSpec split;
  LabelRegime regime = LabelRegime::Test;
  std::uint64_t seed = 0;
  Index height = 0;
  Index width = 0;
  std::vector<SampleRecord> samples;

  Index size() const { return static_cast<Index>(samples.size()); }
};

/// Draws `n` images. Inductive sets place seen classes only; transductive sets
/// place every class but relabel unseen pixels to ignore.
Dataset generate(const WorldSpec& world, const SplitSpec& split, Index n, std::uint64_t seed, LabelRegime regime);

/// Rasterised shape mask of a `size` x `size` box, row-major.
std::vector<bool> shape_mask(ShapeKind kind, Index size);

inline constexpr std::uint32_t kDatasetVersion = 1;

void save_dataset(const Dataset& data, const std::string& path);
Dataset load_dataset(const std::string& path);

/// Gathers samples into a [B, 3, H, W] batch.
template <typename S>
NDArray<S> batch_images(const Dataset& data, const std::vector<Index>& indices) {
  const Index plane = 3 * data.height * data.width;
  NDArray<S> out({static_cast<Index>(indices.size()), 3, data.height, data.width});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = data.samples.at(static_cast<std::size_t>(indices[b])).image;
    for (Index i = 0; i < plane; ++i) out[static_cast<Index>(b) * plane + i] = static_cast<S>(img[static_cast<std::size_t>(i)]);
  }
  return out;
}

}  // namespace zeg
