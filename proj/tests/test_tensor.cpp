#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <random>

#include "histoperm/tensor.hpp"
#include "oracles.hpp"

using namespace histoperm;
using TD = BasicTensor<double>;
using TF = BasicTensor<float>;

TEST(TensorBasics, ShapeMustMatchData) {
  EXPECT_THROW(TD({2, 3}, std::vector<double>(5)), DimensionError);
  const TD t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(TensorBasics, ItemOnNonScalarIsContractError) {
  const TD t({2}, {1.0, 2.0});
  EXPECT_THROW(t.item(), ContractError);
}

TEST(LinearForward, IdentityWeights) {
  const TD x({1, 2}, {2, 3}), w({2, 2}, {1, 0, 0, 1}), b({2}, {0, 0});
  const auto y = linear_forward(x, w, b);
  EXPECT_EQ(y.shape(), (Shape{1, 2}));
  EXPECT_EQ(y[0], 2.0);
  EXPECT_EQ(y[1], 3.0);
}

TEST(LinearForward, RowSum) {
  const TD x({1, 2}, {2, 3}), w({2, 1}, {1, 1}), b({1}, {0});
  EXPECT_EQ(linear_forward(x, w, b).item(), 5.0);
}

TEST(LinearForward, ShapeMismatchNamesBothShapes) {
  const TD x({1, 3}, {1, 2, 3}), w({2, 1}, {1, 1}), b({1}, {0});
  try {
    linear_forward(x, w, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("1x3"), std::string::npos);
    EXPECT_NE(msg.find("2x1"), std::string::npos);
  }
}

TEST(LinearForward, WeightGradOfSumIsReplicatedColumnSums) {
  std::mt19937_64 gen(1);
  auto x = oracle::random_tensor<double>({3, 4}, gen);
  auto w = oracle::random_tensor<double>({4, 2}, gen);
  auto b = oracle::random_tensor<double>({2}, gen);
  auto g = gradients<double>(sum(linear_forward(x, w, b)), std::vector<TD>{w, b});
  for (std::size_t i = 0; i < 4; ++i) {
    double col = 0;
    for (std::size_t r = 0; r < 3; ++r) col += x.at(r, i);
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(g[0][i * 2 + j], col, 1e-12);
  }
  EXPECT_EQ(g[1][0], 3.0);
  EXPECT_EQ(g[1][1], 3.0);
  EXPECT_LE(oracle::gradient_check<double>([&] { return sum(linear_forward(x, w, b)); }, {x, w, b}), 1e-3);
}

TEST(Relu, ValuesAndSubgradientAtZero) {
  auto x = TD({3}, {-1.0, 2.0, 0.0}, true);
  auto y = relu(x);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 2.0);
  EXPECT_EQ(y[2], 0.0);
  auto g = gradients<double>(sum(y), std::vector<TD>{x});
  EXPECT_EQ(g[0][0], 0.0);
  EXPECT_EQ(g[0][1], 1.0);
  EXPECT_EQ(g[0][2], 0.0);  // convention at the kink
}

TEST(Relu, OneSidedDifferencesAwayFromZero) {
  const double h = 1e-3;
  for (double x0 : {-0.5, 0.5}) {
    auto x = TD({1}, {x0}, true);
    const double analytic = gradients<double>(sum(relu(x)), std::vector<TD>{x})[0][0];
    const double fwd = (std::max(0.0, x0 + h) - std::max(0.0, x0)) / h;
    EXPECT_NEAR(analytic, fwd, 1e-9);
  }
}

TEST(L2Normalize, ThreeFourFive) {
  const auto y = l2_normalize(TD({1, 2}, {3, 4}));
  EXPECT_NEAR(y[0], 0.6, 1e-15);
  EXPECT_NEAR(y[1], 0.8, 1e-15);
}

TEST(L2Normalize, ZeroRowIsClamped) {
  const auto y = l2_normalize(TD({1, 2}, {0, 0}), 1e-12);
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
}

TEST(L2Normalize, RandomRowsHaveUnitNorm) {
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = oracle::random_tensor<float>({4, 7}, gen, false);
    const auto y = l2_normalize(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 7; ++c) s += static_cast<double>(y.at(r, c)) * y.at(r, c);
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
    }
  }
}

TEST(L2Normalize, NonPositiveEpsIsContractError) {
  EXPECT_THROW(l2_normalize(TD({1, 2}, {1, 1}), 0.0), ContractError);
}

TEST(StopGradient, ForwardIsBitIdentical) {
  std::mt19937_64 gen(3);
  const auto x = oracle::random_tensor<float>({5, 3}, gen);
  const auto y = stop_gradient(x);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint32_t>(x[i]), std::bit_cast<std::uint32_t>(y[i]));
  EXPECT_FALSE(y.requires_grad());
}

TEST(StopGradient, OnlyTheLiveFactorContributes) {
  auto x = TD({1}, {3.0}, true);
  const double g = gradients<double>(mul(stop_gradient(x), x), std::vector<TD>{x})[0][0];
  EXPECT_EQ(g, 3.0);
  // Finite differences along the non-stopped path: f(x) = 3 * x.
  const double h = 1e-3;
  EXPECT_NEAR((3.0 * (3.0 + h) - 3.0 * (3.0 - h)) / (2 * h), g, 1e-9);
}

TEST(Backward, SquareAtThree) {
  auto x = TD({1}, {3.0}, true);
  EXPECT_EQ(gradients<double>(mul(x, x), std::vector<TD>{x})[0][0], 6.0);
}

TEST(Backward, UnreachableParameterGetsZero) {
  auto x = TD({1}, {3.0}, true);
  auto y = TD({2}, {1.0, 1.0}, true);
  const auto g = gradients<double>(mul(x, x), std::vector<TD>{x, y});
  EXPECT_EQ(g[1], (std::vector<double>{0.0, 0.0}));
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = TD({2}, {1.0, 2.0}, true);
  EXPECT_THROW(backward(x), ContractError);
}

TEST(Backward, IsDeterministic) {
  std::mt19937_64 gen(4);
  auto x = oracle::random_tensor<float>({6, 5}, gen);
  auto w = oracle::random_tensor<float>({5, 3}, gen);
  auto b = oracle::random_tensor<float>({3}, gen);
  auto loss = [&] { return sum(relu(linear_forward(x, w, b))); };
  const auto g1 = gradients<float>(loss(), std::vector<TF>{x, w, b});
  const auto g2 = gradients<float>(loss(), std::vector<TF>{x, w, b});
  EXPECT_EQ(g1, g2);
}

TEST(Backward, IsLinearInTheLoss) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = oracle::random_tensor<float>({4, 3}, gen);
    auto w = oracle::random_tensor<float>({3, 2}, gen);
    auto b = oracle::random_tensor<float>({2}, gen);
    const float a = 0.7f, c = -1.3f;
    auto l1 = [&] { return sum(relu(linear_forward(x, w, b))); };
    auto l2 = [&] { return sum(mul(l2_normalize(x), l2_normalize(x))); };
    const std::vector<TF> ps{x, w, b};
    const auto g1 = gradients<float>(l1(), ps);
    const auto g2 = gradients<float>(l2(), ps);
    const auto gc = gradients<float>(add(scale(l1(), a), scale(l2(), c)), ps);
    for (std::size_t p = 0; p < ps.size(); ++p)
      for (std::size_t i = 0; i < gc[p].size(); ++i) EXPECT_NEAR(gc[p][i], a * g1[p][i] + c * g2[p][i], 1e-5);
  }
}

TEST(Backward, SharedSubgraphAccumulates) {
  auto x = TD({1}, {2.0}, true);
  auto y = mul(x, x);                  // 4
  auto z = add(y, y);                  // 2 x^2
  EXPECT_EQ(gradients<double>(z, std::vector<TD>{x})[0][0], 8.0);
}

TEST(SliceConcat, RoundTripAndEmptyBlocks) {
  const TD a({2, 2}, {1, 2, 3, 4}), e({0, 2}, {});
  const auto c = concat_rows(a, e);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(slice_rows(c, 1, 2)[1], 4.0);
  EXPECT_EQ(slice_rows(c, 2, 2).rows(), 0u);
  EXPECT_THROW(slice_rows(c, 1, 3), DimensionError);
}

// Central-difference checks of every differentiable op, 10 random shapes
// each, in single precision as the pipeline runs.
class OpGradients : public ::testing::TestWithParam<int> {};

TEST_P(OpGradients, MatchFiniteDifferences) {
  std::mt19937_64 gen(100 + GetParam());
  std::uniform_int_distribution<std::size_t> dim(1, 5);
  const std::size_t n = dim(gen) + 1, k = dim(gen), m = dim(gen);
  auto x = oracle::random_tensor<double>({n, k}, gen);
  auto x2 = oracle::random_tensor<double>({n, k}, gen);
  auto w = oracle::random_tensor<double>({k, m}, gen);
  auto b = oracle::random_tensor<double>({m}, gen);
  auto rk = oracle::random_tensor<double>({n, k}, gen, false);
  auto rm = oracle::random_tensor<double>({n, m}, gen, false);
  auto r2 = oracle::random_tensor<double>({2 * n, k}, gen, false);
  // keep relu inputs away from the kink
  auto xr = oracle::random_tensor<double>({n, k}, gen, true, 0.1, 1.0);
  for (std::size_t i = 0; i < xr.size(); ++i) {
    if (i % 2) xr.mutable_values()[i] = -xr[i];
  }
  const double tol = 1e-3;
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(add(x, x2), rk); }, {x, x2}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(sub(x, x2), rk); }, {x, x2}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(mul(x, x2), rk); }, {x, x2}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(scale(x, 1.7), rk); }, {x}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return mean(mul(x, x2)); }, {x, x2}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(matmul(x, w), rm); }, {x, w}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(linear_forward(x, w, b), rm); }, {x, w, b}),
            tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(relu(xr), rk); }, {xr}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(l2_normalize(x), rk); }, {x}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(concat_rows(x, x2), r2); }, {x, x2}), tol);
  EXPECT_LE(oracle::gradient_check<double>([&] { return oracle::project(slice_rows(concat_rows(x, x2), 1, n + 1), rk); },
                                           {x, x2}),
            tol);
  // single precision
  auto xf = oracle::random_tensor<float>({n, k}, gen);
  auto wf = oracle::random_tensor<float>({k, m}, gen);
  auto bf = oracle::random_tensor<float>({m}, gen);
  auto rf = oracle::random_tensor<float>({n, m}, gen, false);
  EXPECT_LE(oracle::gradient_check<float>([&] { return oracle::project(linear_forward(xf, wf, bf), rf); }, {xf, wf, bf}),
            tol);
}

INSTANTIATE_TEST_SUITE_P(TenShapes, OpGradients, ::testing::Range(0, 10));
