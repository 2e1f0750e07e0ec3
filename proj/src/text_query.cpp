#include "zeg/text_query.hpp"

#include "zeg/io.hpp"

#include <cmath>
#include <random>

namespace zeg {

namespace {

constexpr double kClassNoise = 0.01;
constexpr double kTemplateNoise = 0.01;

struct FormatInfo {
  QueryFormat format;
  const char* name;
  const char* layout;
  std::vector<QueryPart> parts;
};

const std::vector<FormatInfo>& format_table() {
  using P = QueryPart;
  static const std::vector<FormatInfo> table{
      {QueryFormat::T, "t", "t", {P::T}},
      {QueryFormat::TG, "tg", "t*g", {P::TG}},
      {QueryFormat::ABS, "abs", "|t-g|", {P::ABS}},
      {QueryFormat::SUB, "sub", "t-g", {P::SUB}},
      {QueryFormat::ADD, "add", "t+g", {P::ADD}},
      {QueryFormat::CAT_G_T, "cat-t-g", "[t, g]", {P::T, P::G}},
      {QueryFormat::CAT_TG_T, "cat-tg-t", "[t*g, t]", {P::TG, P::T}},
      {QueryFormat::CAT_ABS_T, "cat-abs-t", "[|t-g|, t]", {P::ABS, P::T}},
      {QueryFormat::CAT_TG_ADD, "cat-tg-add", "[t*g, t+g]", {P::TG, P::ADD}},
      {QueryFormat::CAT_ADD_T, "cat-add-t", "[t+g, t]", {P::ADD, P::T}},
      {QueryFormat::CAT_TG_ABS, "cat-tg-abs", "[t*g, |t-g|]", {P::TG, P::ABS}},
      {QueryFormat::CAT_TG_ABS_T, "cat-tg-abs-t", "[t*g, |t-g|, t]", {P::TG, P::ABS, P::T}},
  };
  return table;
}

const FormatInfo& info(QueryFormat f) {
  for (const auto& i : format_table())
    if (i.format == f) return i;
  throw ConfigError("unknown query format");
}

void normalize_rows(NDArray<double>& m) {
  auto rows = m.matrix();
  for (Index r = 0; r < rows.rows(); ++r) {
    const double n = rows.row(r).norm();
    if (n > 0) rows.row(r) /= n;
  }
}

void quantize(NDArray<double>& m) {
  for (Index i = 0; i < m.size(); ++i) m[i] = static_cast<double>(static_cast<float>(m[i]));
}

}  // namespace

const std::vector<QueryFormat>& all_query_formats() {
  static const std::vector<QueryFormat> formats = [] {
    std::vector<QueryFormat> out;
    for (const auto& i : format_table()) out.push_back(i.format);
    return out;
  }();
  return formats;
}

std::string query_format_name(QueryFormat f) { return info(f).name; }
std::string query_format_layout(QueryFormat f) { return info(f).layout; }
std::vector<QueryPart> query_parts(QueryFormat f) { return info(f).parts; }
Index query_multiplier(QueryFormat f) { return static_cast<Index>(info(f).parts.size()); }

QueryFormat parse_query_format(const std::string& s) {
  std::string names;
  for (const auto& i : format_table()) {
    if (s == i.name) return i.format;
    names += names.empty() ? "" : ", ";
    names += i.name;
  }
  throw ConfigError("unknown query format '" + s + "' (expected one of " + names + ")");
}

ClassEmbeddingBank::ClassEmbeddingBank(NDArray<double> table, std::vector<std::string> names, std::vector<bool> seen)
    : table_(std::move(table)), names_(std::move(names)), seen_(std::move(seen)) {
  if (table_.rank() != 2) throw ShapeError("embedding bank: expected a [C x d] table, got " + shape_string(table_.shape));
  const Index c = table_.dim(0);
  if (c < 2) throw ConfigError("embedding bank: need at least 2 classes");
  if (static_cast<Index>(names_.size()) != c || static_cast<Index>(seen_.size()) != c) {
    throw ConfigError("embedding bank: " + std::to_string(c) + " rows but " + std::to_string(names_.size()) +
                      " names and " + std::to_string(seen_.size()) + " split flags");
  }
  if (!table_.data.allFinite()) throw ConfigError("embedding bank: non-finite entries");
  reads_.assign(static_cast<std::size_t>(c), 0);
}

std::vector<Index> ClassEmbeddingBank::seen_classes() const {
  std::vector<Index> out;
  for (Index c = 0; c < num_classes(); ++c)
    if (is_seen(c)) out.push_back(c);
  return out;
}

std::vector<Index> ClassEmbeddingBank::unseen_classes() const {
  std::vector<Index> out;
  for (Index c = 0; c < num_classes(); ++c)
    if (!is_seen(c)) out.push_back(c);
  return out;
}

std::vector<Index> ClassEmbeddingBank::all_classes() const {
  std::vector<Index> out;
  for (Index c = 0; c < num_classes(); ++c) out.push_back(c);
  return out;
}

std::uint64_t ClassEmbeddingBank::unseen_reads() const {
  std::uint64_t n = 0;
  for (Index c = 0; c < num_classes(); ++c)
    if (!is_seen(c)) n += reads_[static_cast<std::size_t>(c)];
  return n;
}

NDArray<double> average_templates(const NDArray<double>& per_template) {
  if (per_template.rank() != 3) {
    throw ShapeError("average_templates: expected [K x C x d], got " + shape_string(per_template.shape));
  }
  const Index k = per_template.dim(0), c = per_template.dim(1), d = per_template.dim(2);
  if (k == 0) throw ShapeError("average_templates: no templates");
  NDArray<double> out({c, d});
  for (Index t = 0; t < k; ++t) out.data += per_template.data.segment(t * c * d, c * d);
  out.data /= static_cast<double>(k);
  normalize_rows(out);
  return out;
}

NDArray<double> attribute_vectors(const WorldSpec& world) {
  const Index count = static_cast<Index>(world.shapes.size() + world.colors.size()) + (world.background_class ? 1 : 0);
  std::mt19937_64 rng(mix_seed(world.seed, 0xa77b));
  return NDArray<double>::normal({count, world.embed_dim}, rng, 1.0 / std::sqrt(static_cast<double>(world.embed_dim)));
}

ClassEmbeddingBank synthesize_bank(const WorldSpec& world, const SplitSpec& split, Index templates) {
  world.validate();
  if (templates < 1) throw ConfigError("template count must be at least 1");
  const Index c = world.num_classes(), d = world.embed_dim;
  const Index shapes = static_cast<Index>(world.shapes.size());
  const Index colors = static_cast<Index>(world.colors.size());
  const NDArray<double> attr_table = attribute_vectors(world);
  const auto attrs = attr_table.matrix();

  std::mt19937_64 rng(mix_seed(world.seed, 0xc1a55));
  const auto class_noise = NDArray<double>::normal({c, d}, rng, kClassNoise);
  NDArray<double> per_template({templates, c, d});
  for (Index k = 0; k < templates; ++k) {
    std::mt19937_64 trng(mix_seed(mix_seed(world.seed, 0x7e3b1a7e), static_cast<std::uint64_t>(k)));
    const auto noise = NDArray<double>::normal({c, d}, trng, kTemplateNoise);
    for (Index cls = 0; cls < c; ++cls) {
      Eigen::VectorXd v = cls == world.background_id()
                              ? Eigen::VectorXd(attrs.row(shapes + colors).transpose())
                              : Eigen::VectorXd((attrs.row(world.shape_of(cls)) + attrs.row(shapes + world.color_of(cls))).transpose());
      v += class_noise.matrix().row(cls).transpose() + noise.matrix().row(cls).transpose();
      v.normalize();
      per_template.data.segment((k * c + cls) * d, d) = v;
    }
  }
  auto table = average_templates(per_template);
  quantize(table);
  std::vector<std::string> names;
  for (Index cls = 0; cls < c; ++cls) names.push_back(world.class_name(cls));
  return ClassEmbeddingBank(std::move(table), std::move(names), split.seen_mask(c));
}

double match_score(const NDArray<double>& t, const NDArray<double>& g) {
  if (t.size() != g.size()) {
    throw ShapeError("match_score: " + shape_string(t.shape) + " vs " + shape_string(g.shape));
  }
  return t.data.dot(g.data);
}

NDArray<double> relationship_descriptor(const NDArray<double>& t, const NDArray<double>& g) {
  if (t.size() != g.size()) {
    throw ShapeError("relationship_descriptor: " + shape_string(t.shape) + " vs " + shape_string(g.shape));
  }
  return NDArray<double>(t.shape, t.data.cwiseProduct(g.data));
}

NDArray<double> build_queries(const NDArray<double>& table, const NDArray<double>& g, QueryFormat format) {
  Graph<double> graph;
  auto q = build_queries(graph.constant(table), graph.constant(NDArray<double>({1, g.size()}, g.data)), format);
  return NDArray<double>({table.dim(0), q.dim(2)}, q.value().data);
}

void save_embeddings(const ClassEmbeddingBank& bank, const std::string& path) {
  BinaryWriter w;
  w.bytes("ZEGE");
  w.u32(kEmbeddingsVersion);
  w.u32(static_cast<std::uint32_t>(bank.num_classes()));
  w.u32(static_cast<std::uint32_t>(bank.dim()));
  for (const auto& n : bank.names()) w.string(n);
  for (Index i = 0; i < bank.table().size(); ++i) w.f32(static_cast<float>(bank.table()[i]));
  for (bool s : bank.seen_mask()) w.u8(s ? 1 : 0);
  write_file_atomic(path, w.buffer());
}

ClassEmbeddingBank load_embeddings(const std::string& path) {
  BinaryReader r(read_file(path), path);
  r.expect_magic("ZEGE");
  r.expect_version(kEmbeddingsVersion);
  const Index c = r.u32(), d = r.u32();
  std::vector<std::string> names;
  for (Index i = 0; i < c; ++i) names.push_back(r.string());
  NDArray<double> table({c, d});
  for (Index i = 0; i < c * d; ++i) table[i] = r.f32();
  std::vector<bool> seen;
  for (Index i = 0; i < c; ++i) {
    const auto flag = r.u8();
    if (flag > 1) throw FormatError(path + ": seen flag must be 0 or 1");
    seen.push_back(flag == 1);
  }
  if (!r.at_end()) throw FormatError(path + ": trailing bytes");
  auto rows = table.matrix();
  for (Index i = 0; i < c; ++i) {
    const double n = rows.row(i).norm();
    if (n > 0 && std::abs(n - 1.0) > 1e-6) rows.row(i) /= n;
  }
  return ClassEmbeddingBank(std::move(table), std::move(names), std::move(seen));
}

}  // namespace zeg
