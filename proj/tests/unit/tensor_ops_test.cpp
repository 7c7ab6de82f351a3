#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "cirguard/errors.hpp"
#include "cirguard/ops.hpp"
#include "cirguard/tensor.hpp"
#include "support.hpp"

using namespace cirguard;
using cirguard::testing::check_gradient;
using cirguard::testing::random_tensor;

namespace {

std::vector<double*> pointers(Tensor& t) {
  std::vector<double*> out;
  for (double& v : t.data()) out.push_back(&v);
  return out;
}

double weighted_sum(const Tensor& t, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * w[i];
  return s;
}

}  // namespace

TEST(Tensor, ShapeAndSizeAgree) {
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_EQ(t(1, 2), 1.5);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1.0, 2.0}), ShapeError);
  EXPECT_THROW(t.reshaped({4}), ShapeError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Tensor, NormsAndArgmax) {
  const Tensor t = Tensor::vector({3.0, -4.0});
  EXPECT_DOUBLE_EQ(frobenius_norm(t), 5.0);
  EXPECT_EQ(argmax(t.data()), 0u);
  EXPECT_DOUBLE_EQ(max_abs_diff(t, Tensor::vector({3.0, 1.0})), 5.0);
  Tensor bad = t;
  bad[1] = std::nan("");
  EXPECT_FALSE(bad.all_finite());
}

TEST(BatchNorm, NormalizedInputPassesThroughSelfStats) {
  Tensor x({1, 4});
  const double vals[] = {1.0, -1.0, 1.0, -1.0};  // mean 0, population var 1
  std::copy(std::begin(vals), std::end(vals), x.data().begin());
  const Tensor y = batchnorm_forward(x, BatchNormState::identity(1), BnMode::SelfStats);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(y[i], x[i] / std::sqrt(1.0 + 1e-5), 1e-12);
}

TEST(BatchNorm, ConstantInputGivesZero) {
  const Tensor x({3, 16}, 2.5);
  const Tensor y = batchnorm_forward(x, BatchNormState::identity(3), BnMode::SelfStats);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, RunningStatsEqualToOwnStatsMatchSelfStats) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor({6, 256}, rng, -2.0, 3.0);
    BatchNormTrace trace;
    BatchNormState s = BatchNormState::identity(6);
    s.gamma = {0.5, 1.0, 1.5, 2.0, 0.1, 3.0};
    s.beta = {0.0, 0.1, -0.2, 0.3, 0.0, 1.0};
    const Tensor self = batchnorm_forward(x, s, BnMode::SelfStats, &trace);
    s.running_mean = trace.mean;
    s.running_var = trace.var;
    EXPECT_LT(max_abs_diff(self, batchnorm_forward(x, s, BnMode::RunningStats)), 1e-9);
  }
}

TEST(BatchNorm, Errors) {
  const Tensor x({2, 8}, 1.0);
  EXPECT_THROW(batchnorm_forward(x, BatchNormState::identity(3), BnMode::SelfStats), ShapeError);
  BatchNormState s = BatchNormState::identity(2);
  s.epsilon_bn = 0.0;
  EXPECT_THROW(batchnorm_forward(x, s, BnMode::SelfStats), ArgumentError);
  s = BatchNormState::identity(2);
  s.momentum = 1.5;
  EXPECT_THROW(s.validate(), ArgumentError);
  s = BatchNormState::identity(2);
  s.running_var[0] = -1.0;
  EXPECT_THROW(s.validate(), ArgumentError);
}

TEST(BatchNorm, RunningUpdateUsesRetention) {
  BatchNormState s = BatchNormState::identity(1);
  BatchNormTrace t;
  t.mean = {1.0};
  t.var = {3.0};
  update_running_stats(s, t);
  EXPECT_NEAR(s.running_mean[0], 0.1, 1e-15);
  EXPECT_NEAR(s.running_var[0], 0.9 + 0.3, 1e-15);
  EXPECT_EQ(s.updates, 1u);
}

TEST(BatchNorm, GradientsMatchFiniteDifferencesInBothModes) {
  std::mt19937_64 rng(2);
  for (BnMode mode : {BnMode::RunningStats, BnMode::SelfStats}) {
    Tensor x = random_tensor({3, 12}, rng, -1.0, 2.0);
    BatchNormState s = BatchNormState::identity(3);
    s.gamma = {0.7, 1.3, -0.4};
    s.beta = {0.1, -0.2, 0.3};
    s.running_mean = {0.2, 0.4, 0.1};
    s.running_var = {0.5, 1.5, 0.8};
    const Tensor w = random_tensor({3, 12}, rng, -1.0, 1.0);
    auto loss = [&] { return weighted_sum(batchnorm_forward(x, s, mode), w); };
    BatchNormTrace trace;
    batchnorm_forward(x, s, mode, &trace);
    const BatchNormGrads g = batchnorm_backward(w, s, trace);
    EXPECT_LT(check_gradient(loss, pointers(x), g.d_input.values()).max_relative_error, 1e-6);
    std::vector<double*> gp;
    std::vector<double> ga;
    for (std::size_t n = 0; n < 3; ++n) {
      gp.push_back(&s.gamma[n]);
      ga.push_back(g.d_gamma[n]);
      gp.push_back(&s.beta[n]);
      ga.push_back(g.d_beta[n]);
    }
    EXPECT_LT(check_gradient(loss, gp, ga).max_relative_error, 1e-6);
  }
}

TEST(MeanVarSubtract, Examples) {
  for (const Tensor& in : {Tensor({2, 5}), Tensor({2, 5}, 4.0)}) {
    const Tensor out = mean_var_subtract(in);
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
  }
  Tensor x({1, 2});
  x[0] = 0.0;
  x[1] = 2.0;
  const Tensor y = mean_var_subtract(x);  // mean 1, population var 1
  EXPECT_DOUBLE_EQ(y[0], -2.0);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
}

TEST(MeanVarSubtract, MatchesScriptedOracleAndGradient) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({4, 9}, rng, -3.0, 3.0);
  const Tensor y = mean_var_subtract(x);
  for (std::size_t n = 0; n < 4; ++n) {
    double m = 0.0;
    for (std::size_t s = 0; s < 9; ++s) m += x(n, s) / 9.0;
    double v = 0.0;
    for (std::size_t s = 0; s < 9; ++s) v += (x(n, s) - m) * (x(n, s) - m) / 9.0;
    for (std::size_t s = 0; s < 9; ++s) EXPECT_NEAR(y(n, s), x(n, s) - m - v, 1e-12);
  }
  const Tensor w = random_tensor({4, 9}, rng, -1.0, 1.0);
  const Tensor g = mean_var_subtract_backward(x, w);
  auto loss = [&] { return weighted_sum(mean_var_subtract(x), w); };
  EXPECT_LT(check_gradient(loss, pointers(x), g.values()).max_relative_error, 1e-6);
}

TEST(Conv2d, Examples) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({6, 20}, rng);
  Tensor identity({3, 3});
  identity(1, 1) = 1.0;
  EXPECT_EQ(conv2d_same(x, identity, 0.0), x);

  const Tensor ones({6, 20}, 1.0);
  const Tensor y = conv2d_same(ones, Tensor({3, 3}, 1.0), 0.0);
  EXPECT_EQ(y(2, 5), 9.0);
  EXPECT_EQ(y(0, 0), 4.0);
  EXPECT_EQ(y(5, 19), 4.0);
  EXPECT_EQ(y(0, 7), 6.0);

  const Tensor bias_only = conv2d_same(x, Tensor({3, 3}), -0.75);
  for (double v : bias_only.data()) EXPECT_EQ(v, -0.75);
  EXPECT_THROW(conv2d_same(x, Tensor({2, 2}), 0.0), ShapeError);
  EXPECT_THROW(conv2d_same(Tensor({3, 2}), identity, 0.0), ShapeError);
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 7}, rng, -1.0, 1.0);
  Tensor k = random_tensor({3, 3}, rng, -1.0, 1.0);
  double b = 0.3;
  const Tensor w = random_tensor({4, 7}, rng, -1.0, 1.0);
  auto loss = [&] { return weighted_sum(conv2d_same(x, k, b), w); };
  const Conv2dGrads g = conv2d_same_backward(x, k, w);
  EXPECT_LT(check_gradient(loss, pointers(x), g.d_input.values()).max_relative_error, 1e-7);
  EXPECT_LT(check_gradient(loss, pointers(k), g.d_kernel.values()).max_relative_error, 1e-7);
  EXPECT_LT(check_gradient(loss, {&b}, {g.d_bias}).max_relative_error, 1e-7);
}

TEST(Dense, Examples) {
  std::mt19937_64 rng(6);
  const Tensor bias = Tensor::vector({1.0, -2.0, 0.5});
  EXPECT_EQ(dense_forward(random_tensor({5}, rng), Tensor({5, 3}), bias), bias);

  const Tensor w = random_tensor({5, 3}, rng, -1.0, 1.0);
  Tensor e({5});
  e[2] = 1.0;
  const Tensor y = dense_forward(e, w, bias);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(y[c], w(2, c) + bias[c]);

  const Tensor x = random_tensor({5}, rng, -1.0, 1.0);
  const Tensor z = dense_forward(x, w, bias);
  for (std::size_t c = 0; c < 3; ++c) {
    double dot = bias[c];
    for (std::size_t f = 0; f < 5; ++f) dot += x[f] * w(f, c);
    EXPECT_NEAR(z[c], dot, 1e-12);
  }
  EXPECT_THROW(dense_forward(Tensor({4}), w, bias), ShapeError);
}

TEST(Dense, SquaredLossInputGradientIsClosedForm) {
  std::mt19937_64 rng(7);
  const Tensor w = random_tensor({4, 2}, rng, -1.0, 1.0);
  const Tensor b = random_tensor({2}, rng, -1.0, 1.0);
  const Tensor x = random_tensor({4}, rng, -1.0, 1.0);
  const Tensor t = Tensor::vector({0.3, -0.1});
  // L = 0.5 * ||y - t||^2, dL/dx = W (y - t).
  const Tensor y = dense_forward(x, w, b);
  Tensor r({2});
  for (std::size_t c = 0; c < 2; ++c) r[c] = y[c] - t[c];
  const DenseGrads g = dense_backward(x, w, r);
  for (std::size_t f = 0; f < 4; ++f) {
    EXPECT_NEAR(g.d_input[f], w(f, 0) * r[0] + w(f, 1) * r[1], 1e-10);
  }
}

TEST(Softmax, Examples) {
  const Tensor u = softmax(Tensor::vector({2.0, 2.0, 2.0, 2.0, 2.0, 2.0}));
  for (double p : u.data()) EXPECT_NEAR(p, 1.0 / 6.0, 1e-15);
  const Tensor p = softmax(Tensor::vector({0.0, std::log(3.0)}));
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, PropertiesOnRandomLogits) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor l = random_tensor({6}, rng, -30.0, 30.0);
    const Tensor p = softmax(l);
    EXPECT_NEAR(std::accumulate(p.data().begin(), p.data().end(), 0.0), 1.0, 1e-9);
    for (double v : p.data()) EXPECT_GT(v, 0.0);
    Tensor moved = l;
    const double c = shift(rng);
    for (double& v : moved.data()) v += c;
    EXPECT_LT(max_abs_diff(p, softmax(moved)), 1e-12);
  }
}

TEST(CrossEntropy, Examples) {
  EXPECT_EQ(cross_entropy(Tensor::vector({0, 0, 1, 0, 0, 0}), 2), 0.0);
  const Tensor uniform({6}, 1.0 / 6.0);
  EXPECT_NEAR(cross_entropy(uniform, 4), std::log(6.0), 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::vector({0.25, 0.75}), 0), std::log(4.0), 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::vector({0.0, 1.0}), 0), -std::log(1e-12), 1e-9);
  EXPECT_THROW(cross_entropy(uniform, 6), ArgumentError);
}

TEST(CrossEntropy, SoftmaxGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(9);
  Tensor l = random_tensor({6}, rng, -2.0, 2.0);
  auto loss = [&] { return cross_entropy(softmax(l), 3); };
  const Tensor g = softmax_cross_entropy_grad(softmax(l), 3);
  EXPECT_LT(check_gradient(loss, pointers(l), g.values()).max_relative_error, 1e-7);
}

TEST(Ops, ShapePreservationOnRandomShapes) {
  std::mt19937_64 rng(10);
  std::uniform_int_distribution<std::size_t> rows(1, 8);
  std::uniform_int_distribution<std::size_t> cols(3, 40);
  for (int trial = 0; trial < 50; ++trial) {
    const Shape shape{rows(rng), cols(rng)};
    const Tensor x = random_tensor(shape, rng, -1.0, 1.0);
    EXPECT_EQ(batchnorm_forward(x, BatchNormState::identity(shape[0]), BnMode::SelfStats).shape(), shape);
    EXPECT_EQ(mean_var_subtract(x).shape(), shape);
    const Tensor c = conv2d_same(x, random_tensor({3, 3}, rng), 0.1);
    EXPECT_EQ(c.shape(), shape);
    EXPECT_TRUE(c.all_finite());
  }
}
