#include <gtest/gtest.h>

#include "fmrnet/ops.hpp"
#include "gradcheck.hpp"

using namespace fmrnet;
using fmrnet::testing::gradcheck;
using fmrnet::testing::project;
using fmrnet::testing::random_tensor;
using V = Var<double>;
using Vs = std::vector<V>;

namespace {
constexpr double kTol = 1e-6;
}

TEST(Ops, ElementwiseGradients) {
  std::mt19937_64 rng(1);
  auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng, 0.5, 2.0);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::mul(ops::add(v[0], v[1]), ops::sub(v[0], v[1]))); }, {a, b})
                .relative_error,
            kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::log(v[1])); }, {a, b}).relative_error, kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::sigmoid(ops::exp(v[0]))); }, {a}).relative_error, kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::softplus(ops::square(v[0]))); }, {a}).relative_error, kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::bce_with_logits(v[0], 1.0)); }, {a}).relative_error, kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::leaky_relu(v[0], 0.2)); }, {a}).relative_error, kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return ops::frobenius_norm(v[0]); }, {a}).relative_error, kTol);
}

TEST(Ops, LinearAndMatmulGradients) {
  std::mt19937_64 rng(2);
  auto x = random_tensor({4, 5}, rng), w = random_tensor({3, 5}, rng), b = random_tensor({3}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::linear(v[0], v[1], v[2])); }, {x, w, b}).relative_error,
            kTol);
  auto m = random_tensor({5, 2}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::matmul(v[0], v[1])); }, {x, m}).relative_error, kTol);
  auto a3 = random_tensor({2, 3, 4}, rng), b3 = random_tensor({2, 4, 5}, rng), bt = random_tensor({2, 5, 4}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::bmm(v[0], v[1])); }, {a3, b3}).relative_error, kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::bmm(v[0], v[1], true)); }, {a3, bt}).relative_error, kTol);
}

TEST(Ops, ConvolutionGradients) {
  std::mt19937_64 rng(3);
  auto x = random_tensor({2, 3, 8, 8}, rng), w = random_tensor({4, 3, 4, 4}, rng), b = random_tensor({4}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::conv2d(v[0], v[1], v[2], 2, 1)); }, {x, w, b})
                .relative_error,
            kTol);
  auto xt = random_tensor({2, 3, 4, 4}, rng), wt = random_tensor({3, 2, 4, 4}, rng), bt = random_tensor({2}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::conv_transpose2d(v[0], v[1], v[2], 2, 1)); }, {xt, wt, bt})
                .relative_error,
            kTol);
}

TEST(Ops, ConvTransposeIsAdjointOfConv) {
  std::mt19937_64 rng(4);
  auto x = random_tensor({1, 2, 8, 8}, rng), w = random_tensor({3, 2, 4, 4}, rng), y = random_tensor({1, 3, 4, 4}, rng);
  V none;
  auto cx = ops::conv2d(V::constant(x), V::constant(w), none, 2, 1).value();
  auto ty = ops::conv_transpose2d(V::constant(y), V::constant(w), none, 2, 1).value();
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx[i] * y[i];
  for (std::size_t i = 0; i < ty.size(); ++i) rhs += ty[i] * x[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
  EXPECT_EQ(ty.shape(), (Shape{1, 2, 8, 8}));
}

TEST(Ops, BatchNormGradientsTrainAndEval) {
  std::mt19937_64 rng(5);
  auto x = random_tensor({3, 2, 3, 3}, rng), g = random_tensor({2}, rng, 0.5, 1.5), b = random_tensor({2}, rng);
  for (bool training : {true, false}) {
    auto f = [training](const Vs& v) {
      ops::BatchNormStats<double> s{Tensor<double>({2}, 0.1), Tensor<double>({2}, 1.3)};
      return project(ops::batch_norm(v[0], v[1], v[2], s, training));
    };
    EXPECT_LT(gradcheck(f, {x, g, b}).relative_error, kTol) << "training=" << training;
  }
}

TEST(Ops, NormalizationSoftmaxAndLayout) {
  std::mt19937_64 rng(6);
  auto a = random_tensor({2, 3, 5}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::softmax_lastdim(v[0])); }, {a}).relative_error, kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::l2_normalize_lastdim(v[0], 1e-8)); }, {a}).relative_error,
            kTol);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::norm_lastdim(v[0])); }, {a}).relative_error, kTol);
  auto f = random_tensor({2, 3, 4, 6}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::unfold_blocks(v[0], 2)); }, {f}).relative_error, kTol);
  auto blocks = ops::unfold_blocks(V::constant(f), 2);
  EXPECT_EQ(blocks.shape(), (Shape{2, 6, 12}));
  EXPECT_EQ(ops::fold_blocks(blocks, 3, 4, 6, 2).value(), f);
  auto s = random_tensor({2, 6, 5}, rng, 0.0, 1.0), k = random_tensor({3, 3}, rng, 0.5, 1.5);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::smooth_grid(v[0], 2, 3, v[1])); }, {s, k}).relative_error,
            kTol);
}

TEST(Ops, ShapeOpsGradients) {
  std::mt19937_64 rng(7);
  auto a = random_tensor({2, 2, 3, 3}, rng), b = random_tensor({2, 1, 3, 3}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::concat_channels(v[0], v[1])); }, {a, b}).relative_error,
            kTol);
  auto c = random_tensor({1, 2, 3, 3}, rng);
  EXPECT_LT(gradcheck([](const Vs& v) { return project(ops::slice_batch(ops::concat_batch<double>({v[0], v[1]}), 1, 3)); },
                      {a, c})
                .relative_error,
            kTol);
}

TEST(Ops, NoGradGuardSkipsGraph) {
  auto p = V::leaf(Tensor<double>({2}, 1.0));
  NoGradGuard guard;
  auto y = ops::scale(p, 2.0);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, ZeroNormRowsNormalizeToZero) {
  auto z = V::leaf(Tensor<double>({1, 4}, 0.0));
  auto y = ops::l2_normalize_lastdim(z, 1e-8);
  for (double v : y.value().values()) EXPECT_EQ(v, 0.0);
}
