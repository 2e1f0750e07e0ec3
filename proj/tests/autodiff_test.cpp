#include "grad_check.hpp"
#include "zeg/ops.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace zeg {
namespace {

using testing::gradient_error;
using testing::random_array;
using testing::weighted_sum;
using T = Tensor<double>;
using A = NDArray<double>;

constexpr double kGradTol = 1e-4;
constexpr int kSeeds = 10;

void expect_values(const T& t, std::initializer_list<double> expected) {
  ASSERT_EQ(t.size(), static_cast<Index>(expected.size()));
  Index i = 0;
  for (double v : expected) EXPECT_NEAR(t.value()[i++], v, 1e-12);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Graph<double> g;
  auto eye = g.constant(A::of({2, 2}, {1, 0, 0, 1}));
  auto m = g.constant(A::of({2, 2}, {5, 6, 7, 8}));
  expect_values(matmul(eye, m), {5, 6, 7, 8});
  auto r = matmul(g.constant(A::of({1, 2}, {1, 2})), g.constant(A::of({2, 1}, {3, 4})));
  EXPECT_EQ(r.shape(), (Shape{1, 1}));
  expect_values(r, {11});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Graph<double> g;
  auto a = g.constant(A({2, 3}));
  auto b = g.constant(A({4, 5}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos);
    EXPECT_NE(msg.find("[4x5]"), std::string::npos);
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    auto err = gradient_error([](Graph<double>&, const std::vector<T>& x) { return sum(matmul(x[0], x[1])); },
                              {random_array({3, 3}, rng), random_array({3, 3}, rng)});
    EXPECT_LE(err, kGradTol) << "seed " << seed;
  }
}

TEST(Matmul, BatchedVariantsGradients) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    auto shared = gradient_error(
        [](Graph<double>& g, const std::vector<T>& x) { return weighted_sum(g, matmul(x[0], x[1])); },
        {random_array({2, 3, 4}, rng), random_array({4, 2}, rng)});
    auto batched = gradient_error(
        [](Graph<double>& g, const std::vector<T>& x) { return weighted_sum(g, matmul(x[0], transpose(x[1]))); },
        {random_array({2, 3, 4}, rng), random_array({2, 5, 4}, rng)});
    EXPECT_LE(shared, kGradTol);
    EXPECT_LE(batched, kGradTol);
  }
}

TEST(Softmax, UniformAndStabilised) {
  Graph<double> g;
  expect_values(softmax(g.constant(A::of({3}, {0, 0, 0})), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3});
  auto big = softmax(g.constant(A::of({2}, {1000, 1000})), 0);
  expect_values(big, {0.5, 0.5});
}

TEST(Softmax, RowsSumToOneAlongAnyAxis) {
  std::mt19937_64 rng(3);
  Graph<double> g;
  auto x = g.constant(random_array({2, 3, 4}, rng, -5, 5));
  for (Index axis = 0; axis < 3; ++axis) {
    auto s = sum(softmax(x, axis), axis);
    for (Index i = 0; i < s.size(); ++i) EXPECT_NEAR(s.value()[i], 1.0, 1e-12);
  }
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    auto err = gradient_error(
        [](Graph<double>& g, const std::vector<T>& x) { return weighted_sum(g, softmax(x[0], 0)); },
        {random_array({5}, rng, -2, 2)});
    auto err_axis = gradient_error(
        [](Graph<double>& g, const std::vector<T>& x) { return weighted_sum(g, softmax(x[0], 1)); },
        {random_array({2, 3, 4}, rng, -2, 2)});
    EXPECT_LE(err, kGradTol);
    EXPECT_LE(err_axis, kGradTol);
  }
}

TEST(Sigmoid, ValuesSymmetryAndGradient) {
  Graph<double> g;
  expect_values(sigmoid(g.constant(A::of({1}, {0}))), {0.5});
  std::mt19937_64 rng(5);
  auto x = random_array({20}, rng, -30, 30);
  A negx = x;
  negx.data = -x.data;
  auto s = sigmoid(g.constant(x)).value().data + sigmoid(g.constant(negx)).value().data;
  for (Index i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], 1.0, 1e-15);
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 r(seed);
    EXPECT_LE(gradient_error([](Graph<double>& gr, const std::vector<T>& v) { return weighted_sum(gr, sigmoid(v[0])); },
                             {random_array({6}, r, -4, 4)}),
              kGradTol);
  }
}

TEST(Elementwise, HandExamples) {
  Graph<double> g;
  auto a = g.constant(A::of({2}, {1, 2}));
  auto b = g.constant(A::of({2}, {3, 4}));
  expect_values(a * b, {3, 8});
  expect_values(abs(g.constant(A::of({2}, {1, 5})) - g.constant(A::of({2}, {4, 2}))), {3, 3});
  expect_values(neg(a), {-1, -2});
  expect_values(scale(a, 3.0), {3, 6});
  expect_values(power(b, 2.0), {9, 16});
  expect_values(log(g.constant(A::of({2}, {0.0, 1.0}))), {std::log(1e-12), 0.0});
}

TEST(Elementwise, RowBroadcastMatchesLoop) {
  std::mt19937_64 rng(7);
  Graph<double> g;
  auto m = random_array({4, 3}, rng);
  auto r = random_array({1, 3}, rng);
  auto out = mul(g.constant(m), g.constant(r));
  for (Index c = 0; c < 4; ++c)
    for (Index j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(out.value()[c * 3 + j], m[c * 3 + j] * r[j]);
}

TEST(Elementwise, NonBroadcastableShapesRejected) {
  Graph<double> g;
  EXPECT_THROW(add(g.constant(A({2, 3})), g.constant(A({3, 2}))), ShapeError);
}

// Explicit-materialisation oracle: every output multi-index reads each operand
// at the same multi-index with broadcast axes pinned to 0.
std::vector<double> broadcast_oracle(const A& a, const A& b, const Shape& out, BinaryKind kind) {
  const std::size_t rank = out.size();
  auto fetch = [&](const A& x, const std::vector<Index>& idx) {
    Index flat = 0;
    const std::size_t off = rank - x.shape.size();
    for (std::size_t i = 0; i < x.shape.size(); ++i) {
      const Index e = x.shape[i];
      flat = flat * e + (e == 1 ? 0 : idx[i + off]);
    }
    return x.data[flat];
  };
  std::vector<double> result;
  std::vector<Index> idx(rank, 0);
  for (Index flat = 0; flat < numel(out); ++flat) {
    Index rem = flat;
    for (std::size_t i = rank; i-- > 0;) {
      idx[i] = rem % out[i];
      rem /= out[i];
    }
    const double x = fetch(a, idx), y = fetch(b, idx);
    result.push_back(kind == BinaryKind::Add ? x + y : kind == BinaryKind::Sub ? x - y : x * y);
  }
  return result;
}

std::vector<Shape> all_shapes() {
  std::vector<Shape> shapes{{}};
  for (Index r = 1; r <= 3; ++r) {
    Shape s(static_cast<std::size_t>(r), 1);
    const Index count = static_cast<Index>(std::pow(4, r));
    for (Index code = 0; code < count; ++code) {
      Index c = code;
      for (Index i = 0; i < r; ++i, c /= 4) s[static_cast<std::size_t>(i)] = 1 + c % 4;
      shapes.push_back(s);
    }
  }
  return shapes;
}

TEST(Elementwise, BroadcastEqualsLoopOracleForAllShapePairs) {
  std::mt19937_64 rng(11);
  const auto shapes = all_shapes();
  int checked = 0;
  for (const auto& sa : shapes) {
    for (const auto& sb : shapes) {
      Shape out;
      try {
        out = broadcast_shape(sa, sb);
      } catch (const ShapeError&) {
        continue;
      }
      auto a = random_array(sa, rng);
      auto b = random_array(sb, rng);
      for (auto kind : {BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul}) {
        Graph<double> g;
        auto r = elementwise(g.constant(a), g.constant(b), kind);
        ASSERT_EQ(r.shape(), out);
        auto expected = broadcast_oracle(a, b, out, kind);
        for (Index i = 0; i < r.size(); ++i) ASSERT_EQ(r.value()[i], expected[static_cast<std::size_t>(i)]);
      }
      ++checked;
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(Elementwise, GradientsWithBroadcast) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<A> in{random_array({2, 3, 4}, rng), random_array({3, 1}, rng)};
    for (auto kind : {BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul}) {
      EXPECT_LE(gradient_error([kind](Graph<double>& g,
                                      const std::vector<T>& x) { return weighted_sum(g, elementwise(x[0], x[1], kind)); },
                               in),
                kGradTol);
    }
    std::vector<A> cross{random_array({1, 3, 1}, rng), random_array({2, 1, 4}, rng)};
    EXPECT_LE(gradient_error([](Graph<double>& g, const std::vector<T>& x) { return weighted_sum(g, x[0] * x[1]); },
                             cross),
              kGradTol);
  }
}

TEST(Elementwise, TiledOperandGradientsEitherSide) {
  std::mt19937_64 rng(5);
  const std::vector<Shape> tiles{{4}, {3, 4}, {1, 4}, {1, 3, 4}, {2, 3, 4}};
  for (const auto& st : tiles) {
    for (bool tile_first : {true, false}) {
      std::vector<A> in{random_array(st, rng), random_array({2, 3, 4}, rng)};
      if (!tile_first) std::swap(in[0], in[1]);
      for (auto kind : {BinaryKind::Add, BinaryKind::Sub, BinaryKind::Mul}) {
        EXPECT_LE(gradient_error([kind](Graph<double>& g, const std::vector<T>& x) {
                    return weighted_sum(g, elementwise(x[0], x[1], kind));
                  },
                                 in),
                  kGradTol)
            << shape_string(st) << " first=" << tile_first;
      }
    }
  }
}

TEST(Elementwise, UnaryGradients) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    auto pos = random_array({7}, rng, 0.2, 2.0);
    auto any = random_array({7}, rng, -2.0, 2.0);
    auto away_from_zero = any;
    for (Index i = 0; i < away_from_zero.size(); ++i) away_from_zero[i] += away_from_zero[i] >= 0 ? 0.1 : -0.1;
    auto check = [](auto fn, const A& x) {
      return gradient_error([fn](Graph<double>& g, const std::vector<T>& v) { return weighted_sum(g, fn(v[0])); }, {x});
    };
    EXPECT_LE(check([](const T& t) { return scale(t, 2.5); }, any), kGradTol);
    EXPECT_LE(check([](const T& t) { return add_scalar(t, 2.5); }, any), kGradTol);
    EXPECT_LE(check([](const T& t) { return neg(t); }, any), kGradTol);
    EXPECT_LE(check([](const T& t) { return abs(t); }, away_from_zero), kGradTol);
    EXPECT_LE(check([](const T& t) { return log(t); }, pos), kGradTol);
    EXPECT_LE(check([](const T& t) { return power(t, 2.0); }, any), kGradTol);
    EXPECT_LE(check([](const T& t) { return power(t, -0.5); }, pos), kGradTol);
    EXPECT_LE(check([](const T& t) { return exp(t); }, any), kGradTol);
    EXPECT_LE(check([](const T& t) { return gelu(t); }, any), kGradTol);
  }
}

TEST(Reduce, ValuesAndErrors) {
  Graph<double> g;
  expect_values(sum(g.constant(A::of({3}, {1, 2, 3}))), {6});
  expect_values(mean(g.constant(A::filled({2, 5}, 4.25))), {4.25});
  auto rows = sum(g.constant(A::of({2, 3}, {1, 2, 3, 4, 5, 6})), 1);
  EXPECT_EQ(rows.shape(), (Shape{2, 1}));
  expect_values(rows, {6, 15});
  expect_values(mean(g.constant(A::of({2, 2}, {1, 2, 3, 4})), 0), {2, 3});
  EXPECT_THROW(sum(g.constant(A({2, 2})), 2), ShapeError);
  EXPECT_THROW(mean(g.constant(A({2, 2})), -3), ShapeError);
}

TEST(Reduce, Gradients) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = random_array({2, 3, 4}, rng);
    for (Index axis = 0; axis < 3; ++axis) {
      EXPECT_LE(gradient_error([axis](Graph<double>& g,
                                      const std::vector<T>& v) { return weighted_sum(g, sum(v[0], axis)); },
                               {x}),
                kGradTol);
      EXPECT_LE(gradient_error([axis](Graph<double>& g,
                                      const std::vector<T>& v) { return weighted_sum(g, mean(v[0], axis)); },
                               {x}),
                kGradTol);
    }
    EXPECT_LE(gradient_error([](Graph<double>&, const std::vector<T>& v) { return mean(mul(v[0], v[0])); }, {x}),
              kGradTol);
  }
}

TEST(Structural, ConcatSliceRoundTrip) {
  Graph<double> g;
  auto one = g.constant(A::of({1, 1}, {1}));
  auto two = g.constant(A::of({1, 1}, {2}));
  auto c = concat<double>({one, two}, 0);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  expect_values(c, {1, 2});
  expect_values(slice(c, 0, 0, 1), {1});
  expect_values(slice(c, 0, 1, 2), {2});

  std::mt19937_64 rng(2);
  auto a = random_array({2, 3, 4}, rng);
  auto b = random_array({2, 2, 4}, rng);
  auto cat = concat<double>({g.constant(a), g.constant(b)}, 1);
  EXPECT_EQ(slice(cat, 1, 0, 3).value().data, a.data);
  EXPECT_EQ(slice(cat, 1, 3, 5).value().data, b.data);
  EXPECT_THROW(concat<double>({g.constant(a), g.constant(A({3, 2, 4}))}, 1), ShapeError);
  EXPECT_THROW(slice(cat, 1, 2, 6), ShapeError);
}

TEST(Structural, ConcatRoutesOnesToParts) {
  Graph<double> g;
  auto a = g.variable(A({2, 2}));
  auto b = g.variable(A({2, 3}));
  g.backward(sum(concat<double>({a, b}, 1)));
  EXPECT_TRUE(a.grad().data.isOnes());
  EXPECT_TRUE(b.grad().data.isOnes());
}

TEST(Structural, Gradients) {
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<A> in{random_array({2, 3, 4}, rng), random_array({2, 1, 4}, rng)};
    EXPECT_LE(gradient_error(
                  [](Graph<double>& g, const std::vector<T>& x) {
                    return weighted_sum(g, slice(concat<double>({x[0], x[1]}, 1), 1, 1, 4));
                  },
                  in),
              kGradTol);
    EXPECT_LE(gradient_error(
                  [](Graph<double>& g, const std::vector<T>& x) {
                    return weighted_sum(g, broadcast_to(reshape(x[1], {2, 4}), {3, 2, 4}));
                  },
                  in),
              kGradTol);
  }
}

TEST(LayerNorm, ConstantRowGivesBias) {
  Graph<double> g;
  auto x = g.constant(A::filled({2, 4}, 3.0));
  auto gain = g.constant(A::of({4}, {2, 2, 2, 2}));
  auto bias = g.constant(A::of({4}, {0.1, 0.2, 0.3, 0.4}));
  expect_values(layer_norm(x, gain, bias), {0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4});
}

TEST(LayerNorm, NormalisesRows) {
  std::mt19937_64 rng(4);
  Graph<double> g;
  auto y = layer_norm(g.constant(random_array({3, 8}, rng, -3, 3)), g.constant(A::filled({8}, 1.0)),
                      g.constant(A({8})), 0.0);
  auto m = y.value().matrix();
  for (Index r = 0; r < 3; ++r) {
    EXPECT_NEAR(m.row(r).mean(), 0.0, 1e-12);
    EXPECT_NEAR(m.row(r).squaredNorm() / 8, 1.0, 1e-12);
  }
}

TEST(LayerNorm, GeluZeroAndGradients) {
  Graph<double> g;
  expect_values(gelu(g.constant(A::of({1}, {0.0}))), {0.0});
  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(seed);
    EXPECT_LE(gradient_error(
                  [](Graph<double>& gr, const std::vector<T>& x) { return weighted_sum(gr, layer_norm(x[0], x[1], x[2])); },
                  {random_array({3, 5}, rng, -2, 2), random_array({5}, rng), random_array({5}, rng)}),
              kGradTol);
  }
}

TEST(Backward, SquareAtThree) {
  Graph<double> g;
  auto x = g.variable(A::of({}, {3.0}));
  g.backward(x * x);
  EXPECT_DOUBLE_EQ(x.grad().item(), 6.0);
}

TEST(Backward, FrozenLeafReceivesNothing) {
  Parameter<double> frozen("w", A::of({2}, {1, 2}), false);
  Parameter<double> live("v", A::of({2}, {3, 4}), true);
  Graph<double> g;
  auto loss = sum(g.parameter(frozen) * g.parameter(live));
  g.backward(loss);
  EXPECT_FALSE(frozen.has_grad());
  ASSERT_TRUE(live.has_grad());
  EXPECT_EQ(live.grad.data, frozen.value.data);
}

TEST(Backward, NonScalarLossRejected) {
  Graph<double> g;
  auto x = g.variable(A({2}));
  EXPECT_THROW(g.backward(x), ShapeError);
}

TEST(Backward, VisitsEachReachableNodeOnce) {
  Graph<double> g;
  auto x = g.variable(A::of({2}, {1, 2}));
  auto c = g.constant(A::of({2}, {5, 5}));
  auto y = x * c;
  auto z = y + x;
  auto loss = sum(z);
  g.backward(loss);
  // loss, z, y, x; the constant is never visited.
  EXPECT_EQ(g.backward_visits(), 4);
  EXPECT_EQ(x.grad().data, (Eigen::VectorXd(2) << 6, 6).finished());
  EXPECT_THROW(g.backward(loss), std::logic_error);
}

TEST(Backward, RepeatedRunsAreBitwiseIdentical) {
  auto run = [] {
    std::mt19937_64 rng(21);
    Graph<double> g;
    auto a = g.variable(random_array({4, 6}, rng));
    auto b = g.variable(random_array({6, 3}, rng));
    auto loss = mean(softmax(gelu(matmul(a, b)), 1) * g.constant(random_array({4, 3}, rng)));
    g.backward(loss);
    return std::make_tuple(loss.item(), Eigen::VectorXd(a.grad().data), Eigen::VectorXd(b.grad().data));
  };
  EXPECT_EQ(run(), run());
}

TEST(Precision, FloatInstantiation) {
  Graph<float> g;
  auto x = g.variable(NDArray<float>::of({2, 2}, {1, 2, 3, 4}));
  auto loss = sum(softmax(matmul(x, transpose(x)), 1));
  g.backward(loss);
  EXPECT_NEAR(loss.item(), 2.0f, 1e-5f);
  EXPECT_EQ(x.grad().shape, (Shape{2, 2}));
}

}  // namespace
}  // namespace zeg
