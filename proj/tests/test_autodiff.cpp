#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mct/autodiff.hpp"
#include "mct/gradcheck.hpp"

using namespace mct;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

// Loss = sum(op(x) * w) with a fixed random w, so every output element
// contributes a distinct weight to the gradient.
using Op = std::function<Var<double>(Graph<double>&, const std::vector<Var<double>>&)>;

double max_gradcheck_error(const Op& op, std::vector<Tensor<double>> inputs) {
  Tensor<double> weight;
  {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(g.constant(t));
    weight = random_tensor(op(g, vars).shape(), 99);
  }
  LossBuilder f = [&](Graph<double>& g, const std::vector<Var<double>>& vars) {
    Var<double> y = op(g, vars);
    return sum(mul(y, g.constant(weight)));
  };
  return check_gradients(f, std::move(inputs)).max_rel_error;
}

}  // namespace

// --- forward values ----------------------------------------------------------

TEST(Forward, SoftmaxOfOneTwo) {
  Graph<double> g;
  auto y = softmax_rows(g.constant(Tensor<double>::matrix({{1, 2}}))).value();
  EXPECT_NEAR(y[0], 0.26894142, 1e-8);
  EXPECT_NEAR(y[1], 0.73105858, 1e-8);
}

TEST(Forward, SoftmaxIsShiftInvariantAndStable) {
  Graph<double> g;
  auto a = softmax_rows(g.constant(Tensor<double>::matrix({{1000, 1001, 999}}))).value();
  auto b = softmax_rows(g.constant(Tensor<double>::matrix({{1, 2, 0}}))).value();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(Forward, LayerNormOfOneThree) {
  Graph<double> g;
  auto y = layer_norm(g.constant(Tensor<double>::matrix({{1, 3}})),
                      g.constant(Tensor<double>::vector({1, 1})),
                      g.constant(Tensor<double>::vector({0, 0})), 0.0)
               .value();
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(Forward, GeluMatchesErfDefinition) {
  Graph<double> g;
  auto y = gelu(g.constant(Tensor<double>::vector({-1, 0, 1.5}))).value();
  for (std::size_t i = 0; i < 3; ++i) {
    const double x = std::array<double, 3>{-1, 0, 1.5}[i];
    EXPECT_NEAR(y[i], 0.5 * x * (1 + std::erf(x / std::sqrt(2.0))), 1e-15);
  }
}

TEST(Forward, MatmulAgainstHandProduct) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>::matrix({{1, 2}, {3, 4}}));
  auto b = g.constant(Tensor<double>::matrix({{5, 6, 7}, {8, 9, 10}}));
  auto c = matmul(a, b).value();
  EXPECT_EQ(c, Tensor<double>::matrix({{21, 24, 27}, {47, 54, 61}}));
  auto d = matmul_nt(a, a).value();
  EXPECT_EQ(d, Tensor<double>::matrix({{5, 11}, {11, 25}}));
}

TEST(Forward, ShapeErrorsNameOperands) {
  Graph<double> g;
  auto a = g.constant(Tensor<double>({2, 3}));
  auto b = g.constant(Tensor<double>({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
  EXPECT_THROW(add(a, g.constant(Tensor<double>({3, 2}))), DimensionError);
  EXPECT_THROW(slice_rows(a, 1, 3), DimensionError);
  EXPECT_THROW(softmax_xent_identity(a), DimensionError);
}

TEST(Forward, RankPoolReducesToMeanAndMax) {
  Graph<double> g;
  auto x = g.constant(random_tensor({3, 17}, 5));
  const Tensor<double> gap = mean_cols(x).value(), gmp = max_cols(x).value();
  EXPECT_EQ(Tensor<double>(rank_pool_cols(x, 1.0).value()), gap);
  EXPECT_EQ(Tensor<double>(rank_pool_cols(x, 0.0).value()), gmp);
  EXPECT_THROW(rank_pool_cols(x, 1.5), ConfigError);
  EXPECT_THROW(rank_pool_cols(x, -0.1), ConfigError);
}

TEST(Forward, RankPoolSortAndWeightExample) {
  Graph<double> g;
  auto y = rank_pool_cols(g.constant(Tensor<double>::matrix({{3, 1, 2}})), 0.5).value();
  EXPECT_NEAR(y[0], (3 + 0.5 * 2 + 0.25 * 1) / 1.75, 1e-15);
  EXPECT_NEAR(y[0], 2.428571428571, 1e-12);
}

TEST(Forward, MultilabelSoftMarginAnchors) {
  Graph<double> g;
  auto zero = g.constant(Tensor<double>::vector({0, 0, 0}));
  EXPECT_NEAR(multilabel_soft_margin(zero, std::vector<double>{1, 0, 1}).value()[0],
              std::log(2.0), 1e-15);
  auto l = multilabel_soft_margin(g.constant(Tensor<double>::vector({2, -1})),
                                  std::vector<double>{1, 0});
  const double oracle = (std::log1p(std::exp(-2.0)) + std::log1p(std::exp(-1.0))) / 2;
  EXPECT_NEAR(l.value()[0], oracle, 1e-15);
  EXPECT_NEAR(l.value()[0], 0.220095, 1e-6);
  auto sat = multilabel_soft_margin(g.constant(Tensor<double>::vector({50})),
                                    std::vector<double>{1});
  EXPECT_LT(sat.value()[0], 1e-10);
}

TEST(Forward, SoftmaxXentIdentityOfConstantIsLogN) {
  Graph<double> g;
  auto s = g.constant(Tensor<double>({4, 4}, 7.0));
  EXPECT_NEAR(softmax_xent_identity(s).value()[0], std::log(4.0), 1e-15);
}

TEST(Forward, Conv2dSamePadsWithZeros) {
  Graph<double> g;
  // 1 channel 2x2 input, 3x3 kernel of ones: every output sums the whole input.
  auto x = g.constant(Tensor<double>({1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
  auto w = g.constant(Tensor<double>({1, 1, 3, 3}, 1.0));
  auto b = g.constant(Tensor<double>::vector({0.5}));
  auto y = conv2d_same(x, w, b).value();
  for (auto v : y.data()) EXPECT_DOUBLE_EQ(v, 10.5);
  // a centre-only kernel is the identity
  Tensor<double> centre({1, 1, 3, 3});
  centre[4] = 1;
  auto id = conv2d_same(x, g.constant(centre), g.constant(Tensor<double>::vector({0}))).value();
  EXPECT_EQ(id, x.value());
}

TEST(Forward, DropoutZeroIsIdentityAndSeeded) {
  Graph<double> g;
  auto x = g.constant(random_tensor({8, 8}, 1));
  std::mt19937_64 r1(4), r2(4);
  EXPECT_EQ(dropout(x, 0.0, r1).id, x.id);
  auto a = dropout(x, 0.5, r1).value();
  auto b = dropout(x, 0.5, r2).value();
  std::mt19937_64 r3(4);
  dropout(x, 0.0, r3);
  EXPECT_EQ(dropout(x, 0.5, r3).value(), b);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == 0) ++zeros;
    else EXPECT_DOUBLE_EQ(a[i], 2 * x.value()[i]);
  }
  EXPECT_GT(zeros, 0u);
}

// --- tape mechanics ----------------------------------------------------------

TEST(Tape, FanOutAccumulates) {
  Graph<double> g;
  auto x = g.parameter(Tensor<double>::vector({3}));
  auto y = add(mul(x, x), x);  // x^2 + x
  g.backward(sum(y));
  EXPECT_DOUBLE_EQ(g.grad(x.id)[0], 7.0);
}

TEST(Tape, ConstantsGetNoGradient) {
  Graph<double> g;
  auto c = g.constant(Tensor<double>::vector({1, 2}));
  auto p = g.parameter(Tensor<double>::vector({3, 4}));
  g.backward(sum(mul(c, p)));
  EXPECT_FALSE(g.has_grad(c.id));
  EXPECT_EQ(g.grad(p.id), Tensor<double>::vector({1, 2}));
}

TEST(Tape, BackwardNeedsScalar) {
  Graph<double> g;
  auto p = g.parameter(Tensor<double>::vector({1, 2}));
  EXPECT_THROW(g.backward(p), DimensionError);
}

TEST(Tape, ForeignVariablesAreRejected) {
  Graph<double> g1, g2;
  auto a = g1.parameter(Tensor<double>::vector({1}));
  auto b = g2.parameter(Tensor<double>::vector({1}));
  EXPECT_THROW(add(a, b), Error);
}

// --- gradients ---------------------------------------------------------------

struct OpCase {
  const char* name;
  Op op;
  std::vector<Shape> shapes;
};

class OpGradient : public ::testing::TestWithParam<OpCase> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto& c = GetParam();
  std::vector<Tensor<double>> inputs;
  for (std::size_t i = 0; i < c.shapes.size(); ++i) inputs.push_back(random_tensor(c.shapes[i], 10 + i));
  EXPECT_LT(max_gradcheck_error(c.op, inputs), 1e-6) << c.name;
}

using V = std::vector<Var<double>>;

INSTANTIATE_TEST_SUITE_P(
    AllOps, OpGradient,
    ::testing::Values(
        OpCase{"add", [](Graph<double>&, const V& v) { return add(v[0], v[1]); }, {{3, 4}, {3, 4}}},
        OpCase{"mul", [](Graph<double>&, const V& v) { return mul(v[0], v[1]); }, {{3, 4}, {3, 4}}},
        OpCase{"scale", [](Graph<double>&, const V& v) { return scale(v[0], 2.5); }, {{5}}},
        OpCase{"add_row_bias", [](Graph<double>&, const V& v) { return add_row_bias(v[0], v[1]); },
               {{3, 4}, {4}}},
        OpCase{"matmul", [](Graph<double>&, const V& v) { return matmul(v[0], v[1]); },
               {{3, 4}, {4, 5}}},
        OpCase{"matmul_nt", [](Graph<double>&, const V& v) { return matmul_nt(v[0], v[1]); },
               {{3, 4}, {5, 4}}},
        OpCase{"gram", [](Graph<double>&, const V& v) { return matmul_nt(v[0], v[0]); }, {{3, 4}}},
        OpCase{"transpose", [](Graph<double>&, const V& v) { return transpose(v[0]); }, {{3, 4}}},
        OpCase{"reshape", [](Graph<double>&, const V& v) { return reshape(v[0], {2, 6}); },
               {{3, 4}}},
        OpCase{"slice_rows", [](Graph<double>&, const V& v) { return slice_rows(v[0], 1, 3); },
               {{4, 3}}},
        OpCase{"slice_cols", [](Graph<double>&, const V& v) { return slice_cols(v[0], 1, 3); },
               {{3, 4}}},
        OpCase{"concat_rows", [](Graph<double>&, const V& v) { return concat_rows<double>({v[0], v[1]}); },
               {{2, 3}, {4, 3}}},
        OpCase{"concat_cols", [](Graph<double>&, const V& v) { return concat_cols<double>({v[0], v[1]}); },
               {{3, 2}, {3, 4}}},
        OpCase{"softmax_rows", [](Graph<double>&, const V& v) { return softmax_rows(v[0]); },
               {{3, 5}}},
        OpCase{"layer_norm",
               [](Graph<double>&, const V& v) { return layer_norm(v[0], v[1], v[2], 1e-6); },
               {{3, 6}, {6}, {6}}},
        OpCase{"gelu", [](Graph<double>&, const V& v) { return gelu(v[0]); }, {{4, 4}}},
        OpCase{"sigmoid", [](Graph<double>&, const V& v) { return sigmoid(v[0]); }, {{4, 4}}},
        OpCase{"sum", [](Graph<double>&, const V& v) { return sum(v[0]); }, {{3, 3}}},
        OpCase{"mean", [](Graph<double>&, const V& v) { return mean(v[0]); }, {{3, 3}}},
        OpCase{"mean_cols", [](Graph<double>&, const V& v) { return mean_cols(v[0]); }, {{3, 5}}},
        OpCase{"max_cols", [](Graph<double>&, const V& v) { return max_cols(v[0]); }, {{3, 5}}},
        OpCase{"rank_pool_cols", [](Graph<double>&, const V& v) { return rank_pool_cols(v[0], 0.7); },
               {{3, 6}}},
        OpCase{"conv2d_same",
               [](Graph<double>&, const V& v) { return conv2d_same(v[0], v[1], v[2]); },
               {{2, 4, 4}, {3, 2, 3, 3}, {3}}},
        OpCase{"multilabel_soft_margin",
               [](Graph<double>&, const V& v) {
                 return multilabel_soft_margin(v[0], std::vector<double>{1, 0, 1, 0});
               },
               {{4}}},
        OpCase{"softmax_xent_identity",
               [](Graph<double>&, const V& v) { return softmax_xent_identity(v[0]); }, {{4, 4}}}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(Gradient, AttentionBlockComposite) {
  // softmax(q k^T / sqrt(d)) v with shared input projections
  Op op = [](Graph<double>&, const V& v) {
    auto q = matmul(v[0], v[1]);
    auto k = matmul(v[0], v[2]);
    auto a = softmax_rows(scale(matmul_nt(q, k), 0.5));
    return matmul(a, matmul(v[0], v[3]));
  };
  EXPECT_LT(max_gradcheck_error(op, {random_tensor({5, 4}, 1), random_tensor({4, 4}, 2),
                                     random_tensor({4, 4}, 3), random_tensor({4, 4}, 4)}),
            1e-6);
}

TEST(Gradient, MultilabelSaturatedRegionIsFlat) {
  Graph<double> g;
  auto y = g.parameter(Tensor<double>::vector({60, -60}));
  g.backward(multilabel_soft_margin(y, std::vector<double>{0, 1}));
  EXPECT_EQ(g.grad(y.id)[0], 0.0);
  EXPECT_EQ(g.grad(y.id)[1], 0.0);
}

TEST(Gradcheck, DetectsAWrongGradient) {
  // An op whose backward is deliberately off by a factor of two.
  LossBuilder f = [](Graph<double>& g, const V& v) {
    auto x = v[0];
    Tensor<double> out({1}, x.value()[0] * x.value()[0]);
    return g.record(std::move(out), {x}, [x](Graph<double>& gg, std::size_t self) {
      gg.grad(x.id)[0] += gg.grad(self)[0] * 4 * gg.value(x.id)[0];
    });
  };
  EXPECT_GT(check_gradients(f, {Tensor<double>::vector({0.7})}).max_rel_error, 0.4);
}

TEST(Gradcheck, RichardsonIsMoreAccurateAtLargeSteps) {
  LossBuilder f = [](Graph<double>&, const V& v) { return sum(gelu(mul(v[0], v[0]))); };
  GradcheckOptions plain;
  plain.step = 1e-2;
  GradcheckOptions rich = plain;
  rich.richardson = true;
  const auto x = random_tensor({6}, 8);
  EXPECT_LT(check_gradients(f, {x}, rich).max_rel_error,
            0.1 * check_gradients(f, {x}, plain).max_rel_error);
}

TEST(Gradcheck, BranchChangesShrinkTheStep) {
  // max of two nearly tied entries: a step of 1e-2 crosses the kink.
  LossBuilder f = [](Graph<double>&, const V& v) {
    return sum(max_cols(reshape(v[0], {1, 2})));
  };
  auto x = Tensor<double>::vector({1.0, 1.0 - 1e-3});
  GradcheckOptions naive;
  naive.step = 1e-2;
  EXPECT_GT(check_gradients(f, {x}, naive).max_rel_error, 0.1);

  std::size_t branch = 0;
  LossBuilder tracked = [&](Graph<double>& g, const V& v) {
    branch = v[0].value()[0] >= v[0].value()[1] ? 0 : 1;
    return f(g, v);
  };
  GradcheckOptions guarded = naive;
  guarded.branch = [&] { return std::uint64_t(branch); };
  const auto res = check_gradients(tracked, {x}, guarded);
  EXPECT_LT(res.max_rel_error, 1e-8);
  EXPECT_GT(res.reduced_steps, 0u);
  EXPECT_EQ(res.kinks, 0u);
}
