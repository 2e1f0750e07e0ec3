#include "grad_check.hpp"
#include "zeg/io.hpp"
#include "zeg/text_query.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

namespace zeg {
namespace {

using A = NDArray<double>;
using testing::random_array;

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("zeg_tq_" + name)).string();
}

ClassEmbeddingBank small_bank() {
  return ClassEmbeddingBank(A::of({3, 2}, {1, 0, 0, 1, 0.6, 0.8}), {"a", "b", "c"}, {true, false, true});
}

TEST(Formats, DimsFollowLayout) {
  const std::map<std::string, Index> expected{
      {"t", 1},         {"tg", 1},        {"abs", 1},        {"sub", 1},        {"add", 1},          {"cat-t-g", 2},
      {"cat-tg-t", 2},  {"cat-abs-t", 2}, {"cat-tg-add", 2}, {"cat-add-t", 2},  {"cat-tg-abs", 2},   {"cat-tg-abs-t", 3},
  };
  ASSERT_EQ(all_query_formats().size(), 12u);
  for (auto f : all_query_formats()) {
    const std::string name = query_format_name(f);
    ASSERT_TRUE(expected.count(name)) << name;
    EXPECT_EQ(query_dim(f, 64), expected.at(name) * 64) << name;
    EXPECT_EQ(parse_query_format(name), f);
    const A q = build_queries(A::filled({2, 64}, 0.1), A::filled({64}, 0.2), f);
    EXPECT_EQ(q.shape, (Shape{2, query_dim(f, 64)})) << name;
  }
  EXPECT_EQ(query_dim(QueryFormat::CAT_TG_ABS_T, 512), 512 * 3);
  EXPECT_THROW(parse_query_format("cat"), ConfigError);
}

TEST(Queries, HandExamples) {
  const A t = A::of({1, 2}, {1, 2});
  const A g = A::of({2}, {3, 4});
  const A q = build_queries(t, g, QueryFormat::CAT_TG_T);
  EXPECT_EQ(q.data, (A::of({1, 4}, {3, 8, 1, 2}).data));
  EXPECT_EQ(build_queries(t, g, QueryFormat::T).data, t.data);
  EXPECT_EQ(build_queries(t, g, QueryFormat::SUB).data, (A::of({1, 2}, {-2, -2}).data));
  EXPECT_EQ(build_queries(t, g, QueryFormat::ADD).data, (A::of({1, 2}, {4, 6}).data));
  EXPECT_EQ(build_queries(t, g, QueryFormat::CAT_G_T).data, (A::of({1, 4}, {1, 2, 3, 4}).data));
  EXPECT_EQ(build_queries(t, g, QueryFormat::CAT_TG_ABS_T).data, (A::of({1, 6}, {3, 8, 2, 2, 1, 2}).data));
  const A same = build_queries(t, A::of({2}, {1, 2}), QueryFormat::ABS);
  EXPECT_EQ(same.data.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Queries, WidthMismatchRejected) {
  EXPECT_THROW(build_queries(A({2, 3}), A({4}), QueryFormat::TG), ShapeError);
}

TEST(Queries, ImageSpecificExceptPlainText) {
  std::mt19937_64 rng(1);
  const A t = random_array({4, 8}, rng);
  const A g1 = random_array({8}, rng), g2 = random_array({8}, rng);
  for (auto f : all_query_formats()) {
    const bool same = build_queries(t, g1, f).data == build_queries(t, g2, f).data;
    EXPECT_EQ(same, !uses_image(f)) << query_format_name(f);
  }
}

TEST(Queries, BatchedMatchesSingleImage) {
  std::mt19937_64 rng(2);
  const A t = random_array({3, 5}, rng);
  const A g = random_array({2, 5}, rng);
  for (auto f : all_query_formats()) {
    Graph<double> graph;
    const A batched = build_queries(graph.constant(t), graph.constant(g), f).value();
    const Index width = query_dim(f, 5);
    for (Index b = 0; b < 2; ++b) {
      A gb({5});
      gb.data = g.data.segment(b * 5, 5);
      const A single = build_queries(t, gb, f);
      EXPECT_EQ(Eigen::VectorXd(batched.data.segment(b * 3 * width, 3 * width)), single.data) << query_format_name(f);
    }
  }
}

TEST(Queries, GradientsMatchFiniteDifferences) {
  for (auto f : all_query_formats()) {
    for (int seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      const double err = testing::gradient_error(
          [f](Graph<double>& g, const std::vector<Tensor<double>>& in) {
            return testing::weighted_sum(g, build_queries(in[0], in[1], f));
          },
          {random_array({3, 4}, rng), random_array({2, 4}, rng)});
      EXPECT_LE(err, 1e-4) << query_format_name(f) << " seed " << seed;
    }
  }
}

TEST(MatchScore, DotProductAndDescriptorSum) {
  EXPECT_EQ(match_score(A::of({2}, {1, 0}), A::of({2}, {1, 0})), 1.0);
  EXPECT_EQ(match_score(A::of({2}, {1, 0}), A::of({2}, {0, 1})), 0.0);
  EXPECT_THROW(match_score(A({2}), A({3})), ShapeError);
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const A t = random_array({16}, rng), g = random_array({16}, rng);
    const A r = relationship_descriptor(t, g);
    double expected = 0;
    for (Index j = 0; j < 16; ++j) expected += t[j] * g[j];
    EXPECT_NEAR(match_score(t, g), expected, 1e-14);
    EXPECT_NEAR(match_score(t, g), r.data.sum(), 1e-14);
    for (Index j = 0; j < 16; ++j) EXPECT_EQ(r[j], t[j] * g[j]);
  }
}

TEST(Templates, Averaging) {
  const A one = A::of({1, 2, 2}, {3, 4, 0, 2});
  EXPECT_EQ(average_templates(one).data, (A::of({2, 2}, {0.6, 0.8, 0, 1}).data));
  const A twice = A::of({2, 2, 2}, {3, 4, 0, 2, 3, 4, 0, 2});
  EXPECT_EQ(average_templates(twice).data, average_templates(one).data);
  const A cross = A::of({2, 1, 2}, {1, 0, 0, 1});
  const A avg = average_templates(cross);
  EXPECT_NEAR(avg[0], std::sqrt(2.0) / 2, 1e-15);
  EXPECT_NEAR(avg[1], std::sqrt(2.0) / 2, 1e-15);
  EXPECT_THROW(average_templates(A({0, 2, 2})), ShapeError);
}

TEST(Bank, ValidatesContents) {
  EXPECT_THROW(ClassEmbeddingBank(A({1, 4}), {"a"}, {true}), ConfigError);
  EXPECT_THROW(ClassEmbeddingBank(A({2, 4}), {"a"}, {true, false}), ConfigError);
  A bad({2, 2});
  bad[1] = std::nan("");
  EXPECT_THROW(ClassEmbeddingBank(bad, {"a", "b"}, {true, false}), ConfigError);
  const ClassEmbeddingBank bank = small_bank();
  EXPECT_EQ(bank.seen_classes(), (std::vector<Index>{0, 2}));
  EXPECT_EQ(bank.unseen_classes(), (std::vector<Index>{1}));
}

TEST(Bank, ReadLogCountsRows) {
  const ClassEmbeddingBank bank = small_bank();
  const A seen = bank.rows<double>(bank.seen_classes());
  EXPECT_EQ(seen.data, (A::of({2, 2}, {1, 0, 0.6, 0.8}).data));
  EXPECT_EQ(bank.unseen_reads(), 0u);
  bank.rows<float>(bank.all_classes());
  EXPECT_EQ(bank.unseen_reads(), 1u);
  EXPECT_EQ(bank.reads(0), 2u);
  bank.reset_log();
  EXPECT_EQ(bank.reads(0), 0u);
  EXPECT_THROW(bank.rows<double>({3}), ShapeError);
}

TEST(Synthetic, UnitRowsBuiltFromSharedAttributes) {
  WorldSpec world;
  const SplitSpec split = make_split(world);
  const ClassEmbeddingBank bank = synthesize_bank(world, split, 1);
  const Index shapes = static_cast<Index>(world.shapes.size());
  ASSERT_EQ(bank.num_classes(), shapes * static_cast<Index>(world.colors.size()));
  EXPECT_EQ(bank.dim(), world.embed_dim);
  const A attrs = attribute_vectors(world);
  const auto t = bank.table().matrix();
  const auto a = attrs.matrix();
  for (Index c = 0; c < bank.num_classes(); ++c) {
    EXPECT_NEAR(t.row(c).norm(), 1.0, 1e-6);
    Eigen::RowVectorXd expected = a.row(world.shape_of(c)) + a.row(shapes + world.color_of(c));
    expected.normalize();
    EXPECT_GT(t.row(c).dot(expected), 0.99) << bank.names()[static_cast<std::size_t>(c)];
  }
  EXPECT_EQ(synthesize_bank(world, split, 1).table().data, bank.table().data);
  EXPECT_NE(synthesize_bank(world, split, 15).table().data, bank.table().data);
}

TEST(Embeddings, FileRoundTripIsBitwise) {
  WorldSpec world;
  const ClassEmbeddingBank bank = synthesize_bank(world, make_split(world), 1);
  const std::string path = temp_path("bank.zege");
  save_embeddings(bank, path);
  const std::string bytes = read_file(path);
  EXPECT_EQ(bytes.substr(0, 4), "ZEGE");
  const ClassEmbeddingBank back = load_embeddings(path);
  EXPECT_EQ(back.names(), bank.names());
  EXPECT_EQ(back.seen_mask(), bank.seen_mask());
  EXPECT_EQ(back.table().data, bank.table().data);
  save_embeddings(back, path);
  EXPECT_EQ(read_file(path), bytes);
  std::filesystem::remove(path);
}

TEST(Embeddings, ImportedRowsAreNormalised) {
  const ClassEmbeddingBank raw(A::of({2, 2}, {3, 4, 0, 2}), {"x", "y"}, {true, false});
  const std::string path = temp_path("raw.zege");
  save_embeddings(raw, path);
  const ClassEmbeddingBank back = load_embeddings(path);
  EXPECT_NEAR(back.table()[0], 0.6, 1e-7);
  EXPECT_NEAR(back.table()[1], 0.8, 1e-7);
  EXPECT_EQ(back.table()[3], 1.0);
  std::filesystem::remove(path);
}

TEST(Embeddings, CorruptFilesRejected) {
  const std::string path = temp_path("bad.zege");
  save_embeddings(small_bank(), path);
  std::string bytes = read_file(path);
  write_file_atomic(path, "ZEGW" + bytes.substr(4));
  EXPECT_THROW(load_embeddings(path), FormatError);
  write_file_atomic(path, bytes.substr(0, bytes.size() - 2));
  EXPECT_THROW(load_embeddings(path), FormatError);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace zeg
