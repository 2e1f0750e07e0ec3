#include "grad_check.hpp"
#include "zeg/decoder.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace zeg {
namespace {

using A = NDArray<double>;
using T = Tensor<double>;
using testing::random_array;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

DecoderConfig small_config(Index layers = 2) {
  DecoderConfig cfg;
  cfg.layers = layers;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  return cfg;
}

RowMat as_matrix(const A& a, Index rows, Index cols, Index offset = 0) {
  return Eigen::Map<const RowMat>(a.data.data() + offset, rows, cols);
}

RowMat affine(const RowMat& x, Linear<double>& l) {
  const RowMat w = as_matrix(l.weight.value, l.in_features(), l.out_features());
  RowMat y = x * w;
  y.rowwise() += Eigen::RowVectorXd(l.bias.value.data.transpose());
  return y;
}

void set_identity(Linear<double>& l) {
  l.weight.value.data.setZero();
  for (Index i = 0; i < l.in_features(); ++i) l.weight.value[i * l.out_features() + i] = 1.0;
  l.bias.value.data.setZero();
}

TEST(Scores, HandExample) {
  Graph<double> g;
  auto m = scaled_scores(g.constant(A::of({1, 1}, {2})), g.constant(A::of({1, 1}, {3})));
  EXPECT_EQ(m.shape(), (Shape{1, 1}));
  EXPECT_EQ(m.item(), 6.0);
  auto m2 = scaled_scores(g.constant(A::of({1, 4}, {1, 1, 1, 1})), g.constant(A::of({1, 4}, {1, 2, 3, 4})));
  EXPECT_EQ(m2.item(), 5.0);
  EXPECT_THROW(scaled_scores(g.constant(A({1, 2})), g.constant(A({1, 3}))), ShapeError);
}

TEST(Config, Validation) {
  DecoderConfig cfg = small_config();
  cfg.layers = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = small_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Projection, IdentityPassesInputsThrough) {
  Decoder<double> dec(small_config(), 8, 8, 0);
  set_identity(dec.proj_query());
  set_identity(dec.proj_patch());
  std::mt19937_64 rng(1);
  const A q = random_array({1, 3, 8}, rng), p = random_array({1, 4, 8}, rng);
  Graph<double> g;
  auto [pq, pp] = dec.project_inputs(g, g.constant(q), g.constant(p));
  EXPECT_EQ(pq.value().data, q.data);
  EXPECT_EQ(pp.value().data, p.data);
}

TEST(Projection, WidthsAndGradientPresence) {
  for (Index mult : {1, 2, 3}) {
    Decoder<double> dec(small_config(), mult * 6, 6, 3);
    std::mt19937_64 rng(mult);
    Graph<double> g;
    auto out = dec.decode(g, g.constant(random_array({2, 3, mult * 6}, rng)), g.constant(random_array({2, 4, 6}, rng)));
    EXPECT_EQ(out.queries.shape(), (Shape{2, 3, 8}));
    EXPECT_EQ(out.keys.shape(), (Shape{2, 4, 8}));
    EXPECT_EQ(out.masks.shape(), (Shape{2, 3, 4}));
    g.backward(testing::weighted_sum(g, out.masks));
    for (Linear<double>* l : {&dec.proj_query(), &dec.proj_patch()}) {
      ASSERT_TRUE(l->weight.has_grad());
      EXPECT_GT(l->weight.grad.data.norm(), 0.0);
    }
  }
}

TEST(Decode, WidthMismatchRejected) {
  Decoder<double> dec(small_config(), 16, 8, 0);
  Graph<double> g;
  EXPECT_THROW(dec.decode(g, g.constant(A({1, 2, 8})), g.constant(A({1, 4, 8}))), ShapeError);
  EXPECT_THROW(dec.decode(g, g.constant(A({1, 2, 16})), g.constant(A({1, 4, 16}))), ShapeError);
}

TEST(Decode, ReducedConfigurationIsScaledDotProduct) {
  DecoderHooks hooks;
  hooks.disable_residual = hooks.disable_mlp = hooks.disable_norm = true;
  double worst = 0;
  for (int instance = 0; instance < 100; ++instance) {
    std::mt19937_64 rng(instance);
    const Index classes = 1 + instance % 5, n = 4 + instance % 3, dim = 6 + instance % 4;
    Decoder<double> dec(small_config(1), 2 * dim, dim, static_cast<std::uint64_t>(instance));
    const A q = random_array({1, classes, 2 * dim}, rng), p = random_array({1, n, dim}, rng);
    Graph<double> g;
    const A masks = dec.decode(g, g.constant(q), g.constant(p), hooks).masks.value();
    const RowMat qq = affine(affine(as_matrix(q, classes, 2 * dim), dec.proj_query()), dec.final_wq());
    const RowMat kk = affine(affine(as_matrix(p, n, dim), dec.proj_patch()), dec.final_wk());
    const RowMat expected = qq * kk.transpose() / std::sqrt(8.0);
    worst = std::max(worst, (as_matrix(masks, classes, n) - expected).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Decode, PermutingQueriesPermutesMaskRows) {
  for (bool self_attention : {false, true}) {
    DecoderConfig cfg = small_config(3);
    cfg.query_self_attention = self_attention;
    Decoder<double> dec(cfg, 6, 6, 4);
    std::mt19937_64 rng(7);
    const A q = random_array({1, 4, 6}, rng), p = random_array({1, 9, 6}, rng);
    const std::vector<Index> perm{2, 0, 3, 1};
    A qp({1, 4, 6});
    for (Index r = 0; r < 4; ++r) qp.data.segment(r * 6, 6) = q.data.segment(perm[r] * 6, 6);
    Graph<double> g;
    const A m = dec.decode(g, g.constant(q), g.constant(p)).masks.value();
    const A mp = dec.decode(g, g.constant(qp), g.constant(p)).masks.value();
    for (Index r = 0; r < 4; ++r)
      for (Index j = 0; j < 9; ++j) EXPECT_NEAR(mp[r * 9 + j], m[perm[r] * 9 + j], 1e-12);
  }
}

TEST(Decode, ClassRowsIndependentWithoutSelfAttention) {
  for (bool self_attention : {false, true}) {
    DecoderConfig cfg = small_config(3);
    cfg.query_self_attention = self_attention;
    Decoder<double> dec(cfg, 6, 6, 5);
    std::mt19937_64 rng(8);
    const A q = random_array({1, 3, 6}, rng), p = random_array({1, 4, 6}, rng);
    A q2 = q;
    q2.data.segment(6, 6) = random_array({6}, rng).data;
    Graph<double> g;
    const A m = dec.decode(g, g.constant(q), g.constant(p)).masks.value();
    const A m2 = dec.decode(g, g.constant(q2), g.constant(p)).masks.value();
    const double change = (m.data.segment(0, 4) - m2.data.segment(0, 4)).cwiseAbs().maxCoeff() +
                          (m.data.segment(8, 4) - m2.data.segment(8, 4)).cwiseAbs().maxCoeff();
    if (self_attention) {
      EXPECT_GT(change, 1e-9);
    } else {
      EXPECT_EQ(change, 0.0);
    }
    EXPECT_GT((m.data.segment(4, 4) - m2.data.segment(4, 4)).norm(), 1e-9);
  }
}

TEST(Decode, GradientsMatchFiniteDifferences) {
  for (bool self_attention : {false, true}) {
    DecoderConfig cfg = small_config(2);
    cfg.query_self_attention = self_attention;
    for (int seed = 0; seed < 10; ++seed) {
      Decoder<double> dec(cfg, 4, 3, static_cast<std::uint64_t>(seed));
      std::mt19937_64 rng(seed);
      const double err = testing::gradient_error(
          [&dec](Graph<double>& g, const std::vector<T>& in) {
            return testing::weighted_sum(g, dec.decode(g, in[0], in[1]).masks);
          },
          {random_array({2, 3, 4}, rng), random_array({2, 4, 3}, rng)});
      EXPECT_LE(err, 1e-4) << "seed " << seed;
    }
  }
}

TEST(Upsample, ConstantAndSinglePatch) {
  Graph<double> g;
  auto c = upsample(g.constant(A::filled({2, 4}, 1.5)), 6, 6);
  EXPECT_EQ(c.shape(), (Shape{2, 36}));
  for (Index i = 0; i < c.size(); ++i) EXPECT_NEAR(c.value()[i], 1.5, 1e-15);
  auto one = upsample(g.constant(A::of({1, 1}, {-2})), 3, 3);
  for (Index i = 0; i < 9; ++i) EXPECT_EQ(one.value()[i], -2.0);
}

TEST(Upsample, TwoByTwoToFourByFourTable) {
  Graph<double> g;
  auto up = upsample(g.constant(A::of({1, 4}, {0, 4, 8, 12})), 4, 4);
  const std::vector<double> expected{0, 1, 3, 4, 2, 3, 5, 6, 6, 7, 9, 10, 8, 9, 11, 12};
  for (Index i = 0; i < 16; ++i) EXPECT_NEAR(up.value()[i], expected[static_cast<std::size_t>(i)], 1e-12);
}

TEST(Upsample, NonSquareGridRejected) {
  Graph<double> g;
  EXPECT_THROW(upsample(g.constant(A({1, 6})), 4, 4), ShapeError);
}

TEST(Upsample, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const double err = testing::gradient_error(
        [](Graph<double>& g, const std::vector<T>& in) { return testing::weighted_sum(g, upsample(in[0], 8, 8)); },
        {random_array({2, 3, 4}, rng)});
    EXPECT_LE(err, 1e-4);
  }
}

TEST(Predict, SingleClassAndTies) {
  EXPECT_EQ(predict(A::of({1, 3}, {5, -1, 0}), {7}), (std::vector<Index>{7, 7, 7}));
  EXPECT_EQ(predict(A::of({2, 2}, {1, 2, 1, 3}), {4, 9}), (std::vector<Index>{4, 9}));
  EXPECT_THROW(predict(A::of({2, 2}, {1, 2, 1, 3}), {4}), ShapeError);
}

TEST(Predict, MatchesLoopOracleAndIgnoresShift) {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const A logits = random_array({3, 16}, rng);
    const std::vector<Index> classes{2, 5, 11};
    const auto labels = predict(logits, classes);
    for (Index i = 0; i < 16; ++i) {
      Index best = 0;
      double top = -1e300;
      for (Index k = 0; k < 3; ++k)
        if (logits[k * 16 + i] > top) top = logits[k * 16 + i], best = k;
      EXPECT_EQ(labels[static_cast<std::size_t>(i)], classes[static_cast<std::size_t>(best)]);
    }
    A shifted = logits;
    shifted.data.array() += 3.25;
    EXPECT_EQ(predict(shifted, classes), labels);
  }
}

}  // namespace
}  // namespace zeg
