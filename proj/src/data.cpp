#include "zeg/data.hpp"

#include "zeg/io.hpp"
#include "zeg/kv.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace zeg {

namespace {

constexpr int kPlacementTries = 200;
constexpr int kImageTries = 100;
constexpr int kSplitTries = 1000;
constexpr double kColorJitter = 0.05;

std::string format_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

std::string join_ids(const std::vector<Index>& ids) {
  std::vector<std::string> parts;
  for (Index id : ids) parts.push_back(std::to_string(id));
  return join(parts, ',');
}

std::vector<Index> parse_ids(const std::string& key, const std::string& value) {
  std::vector<Index> ids;
  for (const auto& p : split(value, ',')) ids.push_back(parse_int(key, trim(p)));
  return ids;
}

bool transferable(const WorldSpec& world, const std::vector<bool>& seen) {
  const Index shapes = static_cast<Index>(world.shapes.size());
  const Index colors = static_cast<Index>(world.colors.size());
  std::vector<bool> shape_seen(static_cast<std::size_t>(shapes)), color_seen(static_cast<std::size_t>(colors));
  for (Index c = 0; c < world.num_object_classes(); ++c) {
    if (!seen[static_cast<std::size_t>(c)]) continue;
    shape_seen[static_cast<std::size_t>(world.shape_of(c))] = true;
    color_seen[static_cast<std::size_t>(world.color_of(c))] = true;
  }
  for (Index c = 0; c < world.num_object_classes(); ++c) {
    if (seen[static_cast<std::size_t>(c)]) continue;
    if (!shape_seen[static_cast<std::size_t>(world.shape_of(c))] ||
        !color_seen[static_cast<std::size_t>(world.color_of(c))]) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::string shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::Square:
      return "square";
    case ShapeKind::Circle:
      return "circle";
    case ShapeKind::Triangle:
      return "triangle";
    case ShapeKind::Cross:
      return "cross";
  }
  return "?";
}

ShapeKind parse_shape_kind(const std::string& s) {
  for (auto k : {ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle, ShapeKind::Cross}) {
    if (shape_kind_name(k) == s) return k;
  }
  throw ConfigError("unknown shape '" + s + "' (expected square, circle, triangle or cross)");
}

std::string WorldSpec::class_name(Index cls) const {
  if (cls == background_id()) return "background";
  if (cls < 0 || cls >= num_object_classes()) throw ConfigError("class id " + std::to_string(cls) + " out of range");
  return colors[static_cast<std::size_t>(color_of(cls))].name + "-" +
         shape_kind_name(shapes[static_cast<std::size_t>(shape_of(cls))]);
}

void WorldSpec::validate() const {
  std::vector<std::string> errors;
  if (shapes.empty()) errors.push_back("world needs at least one shape");
  if (colors.empty()) errors.push_back("world needs at least one color");
  if (std::set<ShapeKind>(shapes.begin(), shapes.end()).size() != shapes.size()) errors.push_back("duplicate shapes");
  std::set<std::string> names;
  for (const auto& c : colors) names.insert(c.name);
  if (names.size() != colors.size()) errors.push_back("duplicate color names");
  if (num_classes() < 2) errors.push_back("world needs at least 2 classes");
  if (num_classes() > 255) errors.push_back("at most 255 classes fit the label encoding");
  if (n_unseen < 1 || n_unseen >= num_object_classes()) {
    errors.push_back("unseen count " + std::to_string(n_unseen) + " must lie in 1.." +
                     std::to_string(num_object_classes() - 1));
  }
  if (image_size < 4) errors.push_back("image_size must be at least 4");
  if (embed_dim < 2) errors.push_back("embed_dim must be at least 2");
  if (min_objects < 0 || max_objects < min_objects) errors.push_back("bad object count range");
  if (min_size < 2 || max_size < min_size || max_size > image_size) errors.push_back("bad object size range");
  if (noise_std < 0) errors.push_back("noise_std must be non-negative");
  if (!errors.empty()) throw ConfigError("invalid world: " + join(errors, ';'));
}

std::map<std::string, std::string> WorldSpec::to_kv() const {
  KeyValues kv;
  std::vector<std::string> shape_names, color_entries;
  for (auto s : shapes) shape_names.push_back(shape_kind_name(s));
  for (const auto& c : colors) {
    color_entries.push_back(c.name + ":" + format_float(c.rgb[0]) + ":" + format_float(c.rgb[1]) + ":" +
                            format_float(c.rgb[2]));
  }
  kv["world.shapes"] = join(shape_names, ',');
  kv["world.colors"] = join(color_entries, ',');
  kv["world.unseen"] = std::to_string(n_unseen);
  kv["world.seed"] = std::to_string(seed);
  kv["world.image_size"] = std::to_string(image_size);
  kv["world.embed_dim"] = std::to_string(embed_dim);
  kv["world.background_class"] = background_class ? "1" : "0";
  kv["world.min_objects"] = std::to_string(min_objects);
  kv["world.max_objects"] = std::to_string(max_objects);
  kv["world.min_size"] = std::to_string(min_size);
  kv["world.max_size"] = std::to_string(max_size);
  kv["world.noise_std"] = format_double(noise_std);
  return kv;
}

WorldSpec WorldSpec::from_kv(const std::map<std::string, std::string>& kv) {
  WorldSpec w;
  auto get = [&kv](const std::string& key) -> const std::string* {
    const auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };
  if (const auto* v = get("world.shapes")) {
    w.shapes.clear();
    for (const auto& s : split(*v, ',')) w.shapes.push_back(parse_shape_kind(trim(s)));
  }
  if (const auto* v = get("world.colors")) {
    w.colors.clear();
    for (const auto& entry : split(*v, ',')) {
      const auto parts = split(trim(entry), ':');
      if (parts.size() != 4) throw ConfigError("world.colors: expected name:r:g:b, got '" + entry + "'");
      ColorSpec c{parts[0], {}};
      for (int i = 0; i < 3; ++i) c.rgb[static_cast<std::size_t>(i)] = static_cast<float>(parse_double("world.colors", parts[i + 1]));
      w.colors.push_back(c);
    }
  }
  if (const auto* v = get("world.unseen")) w.n_unseen = parse_int("world.unseen", *v);
  if (const auto* v = get("world.seed")) w.seed = parse_uint("world.seed", *v);
  if (const auto* v = get("world.image_size")) w.image_size = parse_int("world.image_size", *v);
  if (const auto* v = get("world.embed_dim")) w.embed_dim = parse_int("world.embed_dim", *v);
  if (const auto* v = get("world.background_class")) w.background_class = parse_bool("world.background_class", *v);
  if (const auto* v = get("world.min_objects")) w.min_objects = parse_int("world.min_objects", *v);
  if (const auto* v = get("world.max_objects")) w.max_objects = parse_int("world.max_objects", *v);
  if (const auto* v = get("world.min_size")) w.min_size = parse_int("world.min_size", *v);
  if (const auto* v = get("world.max_size")) w.max_size = parse_int("world.max_size", *v);
  if (const auto* v = get("world.noise_std")) w.noise_std = parse_double("world.noise_std", *v);
  return w;
}

std::vector<bool> SplitSpec::seen_mask(Index num_classes) const {
  std::vector<bool> mask(static_cast<std::size_t>(num_classes), false);
  for (Index c : seen) mask.at(static_cast<std::size_t>(c)) = true;
  return mask;
}

SplitSpec make_split(const WorldSpec& world) {
  world.validate();
  const Index objects = world.num_object_classes();
  std::mt19937_64 rng(mix_seed(world.seed, 0x5e1175));
  std::vector<Index> order(static_cast<std::size_t>(objects));
  for (Index c = 0; c < objects; ++c) order[static_cast<std::size_t>(c)] = c;
  for (int attempt = 0; attempt < kSplitTries; ++attempt) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> seen(static_cast<std::size_t>(objects), true);
    Index taken = 0;
    for (Index c : order) {
      if (taken == world.n_unseen) break;
      seen[static_cast<std::size_t>(c)] = false;
      if (transferable(world, seen)) {
        ++taken;
      } else {
        seen[static_cast<std::size_t>(c)] = true;
      }
    }
    if (taken < world.n_unseen) continue;
    SplitSpec split;
    for (Index c = 0; c < objects; ++c) (seen[static_cast<std::size_t>(c)] ? split.seen : split.unseen).push_back(c);
    if (world.background_class) split.seen.push_back(world.background_id());
    return split;
  }
  throw ConfigError("cannot withhold " + std::to_string(world.n_unseen) + " of " + std::to_string(objects) +
                    " classes while keeping every unseen shape and color among the seen classes");
}

std::string label_regime_name(LabelRegime r) {
  switch (r) {
    case LabelRegime::Inductive:
      return "inductive";
    case LabelRegime::Transductive:
      return "transductive";
    case LabelRegime::Supervised:
      return "supervised";
    case LabelRegime::Test:
      return "test";
  }
  return "?";
}

LabelRegime parse_label_regime(const std::string& s) {
  for (auto r : {LabelRegime::Inductive, LabelRegime::Transductive, LabelRegime::Supervised, LabelRegime::Test}) {
    if (label_regime_name(r) == s) return r;
  }
  throw ConfigError("unknown label regime '" + s + "'");
}

std::vector<bool> shape_mask(ShapeKind kind, Index size) {
  std::vector<bool> mask(static_cast<std::size_t>(size * size), false);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  const double r = static_cast<double>(size) / 2.0;
  const double arm = std::max(2.0, static_cast<double>(size) / 3.0) / 2.0;
  for (Index y = 0; y < size; ++y) {
    for (Index x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) - c, dy = static_cast<double>(y) - c;
      bool on = false;
      switch (kind) {
        case ShapeKind::Square:
          on = true;
          break;
        case ShapeKind::Circle:
          on = dx * dx + dy * dy <= r * r;
          break;
        case ShapeKind::Triangle:
          on = std::abs(dx) <= (static_cast<double>(y) + 0.5) / 2.0;
          break;
        case ShapeKind::Cross:
          on = std::abs(dx) < arm || std::abs(dy) < arm;
          break;
      }
      mask[static_cast<std::size_t>(y * size + x)] = on;
    }
  }
  return mask;
}

namespace {

SampleRecord draw_sample(const WorldSpec& world, const SplitSpec& split, LabelRegime regime, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index hw = world.image_size;
  const std::vector<bool> seen = split.seen_mask(world.num_classes());
  std::vector<Index> pool;
  for (Index c = 0; c < world.num_object_classes(); ++c) {
    if (regime != LabelRegime::Inductive || seen[static_cast<std::size_t>(c)]) pool.push_back(c);
  }
  if (pool.empty()) throw ConfigError("no classes available for placement");

  std::uniform_int_distribution<Index> count_dist(world.min_objects, world.max_objects);
  std::uniform_int_distribution<Index> size_dist(world.min_size, world.max_size);
  std::uniform_int_distribution<std::size_t> class_dist(0, pool.size() - 1);

  std::vector<PlacedObject> objects;
  bool placed_all = false;
  for (int attempt = 0; attempt < kImageTries && !placed_all; ++attempt) {
    objects.clear();
    const Index count = count_dist(rng);
    placed_all = true;
    for (Index k = 0; k < count && placed_all; ++k) {
      PlacedObject obj{pool[class_dist(rng)], 0, 0, size_dist(rng)};
      std::uniform_int_distribution<Index> pos(0, hw - obj.size);
      bool ok = false;
      for (int t = 0; t < kPlacementTries && !ok; ++t) {
        obj.x = pos(rng);
        obj.y = pos(rng);
        ok = std::all_of(objects.begin(), objects.end(), [&obj](const PlacedObject& o) {
          // one-pixel gap between bounding boxes
          return obj.x >= o.x + o.size + 1 || o.x >= obj.x + obj.size + 1 || obj.y >= o.y + o.size + 1 ||
                 o.y >= obj.y + obj.size + 1;
        });
      }
      if (ok) {
        objects.push_back(obj);
      } else {
        placed_all = false;
      }
    }
  }
  if (!placed_all) throw ConfigError("object placement failed after " + std::to_string(kImageTries) + " attempts");

  SampleRecord s;
  const std::size_t plane = static_cast<std::size_t>(hw * hw);
  s.image.assign(3 * plane, 0.0f);
  const std::uint8_t bg_label =
      world.background_class ? static_cast<std::uint8_t>(world.background_id()) : kIgnoreLabel;
  s.labels.assign(plane, bg_label);
  std::uniform_real_distribution<double> bg_dist(0.0, 0.15);
  const double bg = bg_dist(rng);
  for (std::size_t i = 0; i < 3 * plane; ++i) s.image[i] = static_cast<float>(bg);

  std::normal_distribution<double> jitter(0.0, kColorJitter);
  for (const auto& obj : objects) {
    const auto& proto = world.colors[static_cast<std::size_t>(world.color_of(obj.class_id))].rgb;
    std::array<double, 3> rgb{};
    for (int ch = 0; ch < 3; ++ch) rgb[static_cast<std::size_t>(ch)] = proto[static_cast<std::size_t>(ch)] + jitter(rng);
    const auto mask = shape_mask(world.shapes[static_cast<std::size_t>(world.shape_of(obj.class_id))], obj.size);
    const bool hidden = regime == LabelRegime::Transductive && !seen[static_cast<std::size_t>(obj.class_id)];
    for (Index y = 0; y < obj.size; ++y) {
      for (Index x = 0; x < obj.size; ++x) {
        if (!mask[static_cast<std::size_t>(y * obj.size + x)]) continue;
        const std::size_t p = static_cast<std::size_t>((obj.y + y) * hw + obj.x + x);
        for (std::size_t ch = 0; ch < 3; ++ch) s.image[ch * plane + p] = static_cast<float>(rgb[ch]);
        s.labels[p] = hidden ? kIgnoreLabel : static_cast<std::uint8_t>(obj.class_id);
      }
    }
  }
  std::normal_distribution<double> noise(0.0, world.noise_std > 0 ? world.noise_std : 1.0);
  for (auto& v : s.image) {
    const double n = world.noise_std > 0 ? noise(rng) : 0.0;
    v = static_cast<float>(std::clamp(static_cast<double>(v) + n, 0.0, 1.0));
  }
  s.objects = std::move(objects);
  return s;
}

}  // namespace

Dataset generate(const WorldSpec& world, const SplitSpec& split, Index n, std::uint64_t seed, LabelRegime regime) {
  world.validate();
  if (n < 0) throw ConfigError("sample count must be non-negative");
  Dataset data{world, split, regime, seed, world.image_size, world.image_size, {}};
  data.samples.reserve(static_cast<std::size_t>(n));
  const std::uint64_t root = mix_seed(world.seed, seed);
  for (Index i = 0; i < n; ++i) {
    data.samples.push_back(draw_sample(world, split, regime, mix_seed(root, static_cast<std::uint64_t>(i))));
  }
  return data;
}

void save_dataset(const Dataset& data, const std::string& path) {
  KeyValues header = data.world.to_kv();
  header["split.seen"] = join_ids(data.split.seen);
  header["split.unseen"] = join_ids(data.split.unseen);
  header["regime"] = label_regime_name(data.regime);
  header["seed"] = std::to_string(data.seed);
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    std::vector<std::string> objs;
    for (const auto& o : data.samples[i].objects) {
      objs.push_back(std::to_string(o.class_id) + ":" + std::to_string(o.x) + ":" + std::to_string(o.y) + ":" +
                     std::to_string(o.size));
    }
    header["objects." + std::to_string(i)] = join(objs, ';');
  }

  BinaryWriter w;
  w.bytes("ZEGD");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(data.samples.size()));
  w.u32(static_cast<std::uint32_t>(data.height));
  w.u32(static_cast<std::uint32_t>(data.width));
  w.string(to_text(header));
  const std::size_t plane = static_cast<std::size_t>(data.height * data.width);
  for (const auto& s : data.samples) {
    if (s.image.size() != 3 * plane || s.labels.size() != plane) throw ShapeError("save_dataset: sample size mismatch");
    for (float v : s.image) w.f32(v);
    for (auto l : s.labels) w.u8(l);
  }
  write_file_atomic(path, w.buffer());
}

Dataset load_dataset(const std::string& path) {
  BinaryReader r(read_file(path), path);
  r.expect_magic("ZEGD");
  r.expect_version(kDatasetVersion);
  Dataset data;
  const std::uint32_t n = r.u32();
  data.height = r.u32();
  data.width = r.u32();
  const KeyValues header = parse_text(r.string(), path + " header");
  data.world = WorldSpec::from_kv(header);
  data.split.seen = parse_ids("split.seen", require(header, "split.seen", path));
  data.split.unseen = parse_ids("split.unseen", require(header, "split.unseen", path));
  data.regime = parse_label_regime(require(header, "regime", path));
  data.seed = parse_uint("seed", require(header, "seed", path));

  const std::size_t plane = static_cast<std::size_t>(data.height * data.width);
  data.samples.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    auto& s = data.samples[i];
    s.image.resize(3 * plane);
    s.labels.resize(plane);
    for (auto& v : s.image) v = r.f32();
    for (auto& l : s.labels) l = r.u8();
    const auto it = header.find("objects." + std::to_string(i));
    if (it != header.end()) {
      for (const auto& entry : split(it->second, ';')) {
        const auto f = split(entry, ':');
        if (f.size() != 4) throw FormatError(path + ": malformed object record '" + entry + "'");
        s.objects.push_back({parse_int("objects", f[0]), parse_int("objects", f[1]), parse_int("objects", f[2]),
                             parse_int("objects", f[3])});
      }
    }
  }
  if (!r.at_end()) throw FormatError(path + ": trailing bytes after last sample");
  return data;
}

}  // namespace zeg
