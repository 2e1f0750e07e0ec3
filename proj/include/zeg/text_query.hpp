#pragma once

// Class text embeddings T and the image-specific query builder. A query row
// combines a class embedding t with the image embedding g; r = t (.) g is the
// relationship descriptor, whose entries sum to the matching score t^T g.

#include "zeg/data.hpp"
#include "zeg/ops.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace zeg {

enum class QueryFormat {
  T,
  TG,
  ABS,
  SUB,
  ADD,
  CAT_G_T,
  CAT_TG_T,
  CAT_ABS_T,
  CAT_TG_ADD,
  CAT_ADD_T,
  CAT_TG_ABS,
  CAT_TG_ABS_T,
};

enum class QueryPart { T, G, TG, ABS, SUB, ADD };

/// All formats, in table order.
const std::vector<QueryFormat>& all_query_formats();
std::string query_format_name(QueryFormat f);
QueryFormat parse_query_format(const std::string& s);
/// Human-readable layout such as "[t*g, t]".
std::string query_format_layout(QueryFormat f);
std::vector<QueryPart> query_parts(QueryFormat f);
/// Query width relative to the embedding width d (1, 2 or 3).
Index query_multiplier(QueryFormat f);
inline Index query_dim(QueryFormat f, Index d) { return query_multiplier(f) * d; }
inline bool uses_image(QueryFormat f) { return f != QueryFormat::T; }

/// Frozen per-class text embeddings with split membership. Every row read
/// through `rows` is logged so that tests can audit unseen-class exposure.
class ClassEmbeddingBank {
 public:
  ClassEmbeddingBank() = default;
  ClassEmbeddingBank(NDArray<double> table, std::vector<std::string> names, std::vector<bool> seen);

  Index num_classes() const { return table_.dim(0); }
  Index dim() const { return table_.dim(1); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<bool>& seen_mask() const { return seen_; }
  bool is_seen(Index c) const { return seen_.at(static_cast<std::size_t>(c)); }
  std::vector<Index> seen_classes() const;
  std::vector<Index> unseen_classes() const;
  std::vector<Index> all_classes() const;

  /// Rows for `active` classes, in order, as [C' x d]. Logged.
  template <typename S>
  NDArray<S> rows(const std::vector<Index>& active) const {
    NDArray<S> out({static_cast<Index>(active.size()), dim()});
    for (std::size_t i = 0; i < active.size(); ++i) {
      const Index c = active[i];
      if (c < 0 || c >= num_classes()) {
        throw ShapeError("embedding bank: class " + std::to_string(c) + " outside 0.." + std::to_string(num_classes() - 1));
      }
      ++reads_[static_cast<std::size_t>(c)];
      for (Index j = 0; j < dim(); ++j) out[static_cast<Index>(i) * dim() + j] = static_cast<S>(table_[c * dim() + j]);
    }
    return out;
  }

  /// Unlogged access for persistence and inspection.
  const NDArray<double>& table() const { return table_; }

  std::uint64_t reads(Index c) const { return reads_.at(static_cast<std::size_t>(c)); }
  std::uint64_t unseen_reads() const;
  void reset_log() const { std::fill(reads_.begin(), reads_.end(), 0); }

  bool operator==(const ClassEmbeddingBank& o) const {
    return table_.shape == o.table_.shape && table_.data == o.table_.data && names_ == o.names_ && seen_ == o.seen_;
  }

 private:
  NDArray<double> table_;
  std::vector<std::string> names_;
  std::vector<bool> seen_;
  mutable std::vector<std::uint64_t> reads_;
};

/// Per-class mean over K template embeddings [K x C x d], rows renormalised.
NDArray<double> average_templates(const NDArray<double>& per_template);

/// Shared attribute directions: one per shape then one per color (then one
/// for background when the world has a background class), each [d].
NDArray<double> attribute_vectors(const WorldSpec& world);

/// Synthesises K noisy templates per class around normalize(a_shape + a_color)
/// and averages them.
ClassEmbeddingBank synthesize_bank(const WorldSpec& world, const SplitSpec& split, Index templates = 1);

double match_score(const NDArray<double>& t, const NDArray<double>& g);
NDArray<double> relationship_descriptor(const NDArray<double>& t, const NDArray<double>& g);

/// Batched query builder. `table` is [C' x d], `image` is g as [B x d].
/// Returns [B x C' x dim].
template <typename S>
Tensor<S> build_queries(const Tensor<S>& table, const Tensor<S>& image, QueryFormat format) {
  if (table.rank() != 2 || image.rank() != 2 || table.dim(1) != image.dim(1)) {
    throw ShapeError("build_queries: table " + shape_string(table.shape()) + " and image embedding " +
                     shape_string(image.shape()) + " differ in width");
  }
  const Index batch = image.dim(0), classes = table.dim(0), d = table.dim(1);
  const Shape out{batch, classes, d};
  auto t = reshape(table, {1, classes, d});
  auto g = reshape(image, {batch, 1, d});
  std::vector<Tensor<S>> parts;
  for (auto part : query_parts(format)) {
    switch (part) {
      case QueryPart::T:
        parts.push_back(broadcast_to(t, out));
        break;
      case QueryPart::G:
        parts.push_back(broadcast_to(g, out));
        break;
      case QueryPart::TG:
        parts.push_back(t * g);
        break;
      case QueryPart::ABS:
        parts.push_back(abs(t - g));
        break;
      case QueryPart::SUB:
        parts.push_back(t - g);
        break;
      case QueryPart::ADD:
        parts.push_back(t + g);
        break;
    }
  }
  return parts.size() == 1 ? parts.front() : concat(parts, 2);
}

/// Single-image convenience form: t rows [C' x d], g [d] -> [C' x dim].
NDArray<double> build_queries(const NDArray<double>& table, const NDArray<double>& g, QueryFormat format);

inline constexpr std::uint32_t kEmbeddingsVersion = 1;

void save_embeddings(const ClassEmbeddingBank& bank, const std::string& path);
/// Rows are rescaled to unit L2 norm unless already unit within 1e-6.
ClassEmbeddingBank load_embeddings(const std::string& path);

}  // namespace zeg
