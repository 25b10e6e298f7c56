#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "istdkd/autodiff.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/tensor.hpp"
#include "testutil.hpp"

using istdkd::Rng;
using istdkd::ShapeError;
using istdkd::StateError;
using istdkd::Tensor;
using namespace istdkd::ad;
using testutil::expect_grad_matches;
using testutil::rand_tensor;

TEST(Tensor, BasicAccessAndStats) {
  Tensor t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(t.rank(), 2);
  EXPECT_EQ(t.dim(1), 3);
  EXPECT_DOUBLE_EQ(t.at(1, 2), 6.0);
  EXPECT_DOUBLE_EQ(t.sum(), 21.0);
  EXPECT_DOUBLE_EQ(t.mean(), 3.5);
  EXPECT_DOUBLE_EQ(t.max(), 6.0);
  EXPECT_DOUBLE_EQ(t.min(), 1.0);
  EXPECT_THROW(t.at(0), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, ScalarHolder) {
  Tensor s = Tensor::scalar(4.25);
  EXPECT_EQ(s.rank(), 0);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_DOUBLE_EQ(s.item(), 4.25);
}

TEST(Rng, DeterministicStreams) {
  Rng a = Rng::stream(7, "x");
  Rng b = Rng::stream(7, "x");
  Rng c = Rng::stream(7, "y");
  double av = a.uniform(0, 1), bv = b.uniform(0, 1), cv = c.uniform(0, 1);
  EXPECT_DOUBLE_EQ(av, bv);
  EXPECT_NE(av, cv);
}

TEST(Autodiff, ElementwiseArithmetic) {
  Rng rng(1);
  auto a = Value::param(rand_tensor(rng, {2, 3}, -1, 1));
  auto b = Value::param(rand_tensor(rng, {2, 3}, -1, 1));
  expect_grad_matches({a, b}, [&] {
    auto t = mul(add(a, b), sub(a, mul_scalar(b, 0.7)));
    return mean_all(add_scalar(t, 0.3));
  }, 1e-5, 1e-6, "arith");
}

TEST(Autodiff, Activations) {
  Rng rng(2);
  auto a = Value::param(rand_tensor(rng, {3, 4}, 0.2, 1.5));
  expect_grad_matches({a}, [&] { return mean_all(vtanh(a)); }, 1e-5, 1e-6, "tanh");
  expect_grad_matches({a}, [&] { return mean_all(sigmoid(a)); }, 1e-5, 1e-6, "sigmoid");
  expect_grad_matches({a}, [&] { return mean_all(vexp(a)); }, 1e-5, 1e-6, "exp");
  expect_grad_matches({a}, [&] { return mean_all(relu(a)); }, 1e-5, 1e-6, "relu");
  expect_grad_matches({a}, [&] { return mean_all(recip(a)); }, 1e-5, 1e-6, "recip");
  expect_grad_matches({a}, [&] { return l1norm(a); }, 1e-5, 1e-6, "l1");
}

TEST(Autodiff, ScalarNodeBroadcast) {
  Rng rng(3);
  auto a = Value::param(rand_tensor(rng, {5}, 0.5, 2.0));
  auto probe = Value::constant(rand_tensor(rng, {5}, -1, 1));
  expect_grad_matches({a}, [&] {
    auto e = vexp(a);
    auto w = mul_scalar_node(e, recip(mean_all(e)));
    return mean_all(mul(w, probe));
  }, 1e-6, 1e-5, "weights");
}

TEST(Autodiff, ShapeOps) {
  Rng rng(4);
  auto a = Value::param(rand_tensor(rng, {3, 4}, -1, 1));
  auto c1 = Value::constant(rand_tensor(rng, {3, 2}, -1, 1));
  expect_grad_matches({a}, [&] { return mean_all(mul(slice_cols(a, 1, 3), c1)); }, 1e-5, 1e-6, "slice");
  expect_grad_matches({a}, [&] { return mean_all(reshape(a, {2, 6})); }, 1e-5, 1e-6, "reshape");
  auto b = Value::param(rand_tensor(rng, {2, 4}, -1, 1));
  auto c2 = Value::constant(rand_tensor(rng, {5, 4}, -1, 1));
  expect_grad_matches({a, b}, [&] {
    return mean_all(mul(concat_rows({a, b}), c2));
  }, 1e-5, 1e-6, "concat");
}

TEST(Autodiff, GatherScatter) {
  Rng rng(5);
  auto a = Value::param(rand_tensor(rng, {6}, -1, 1));
  auto probe = Value::constant(rand_tensor(rng, {4}, -1, 1));
  expect_grad_matches({a}, [&] {
    return mean_all(mul(gather(a, {0, 2, 2, 5}), probe));
  }, 1e-5, 1e-6, "gather");
  EXPECT_THROW(gather(a, {7}), ShapeError);
}

TEST(Autodiff, MatmulAndRowOps) {
  Rng rng(6);
  auto a = Value::param(rand_tensor(rng, {3, 4}, -1, 1));
  auto b = Value::param(rand_tensor(rng, {4, 2}, -1, 1));
  auto bias = Value::param(rand_tensor(rng, {2}, -1, 1));
  auto u = Value::param(rand_tensor(rng, {2}, 0.1, 1.0));
  expect_grad_matches({a, b, bias, u}, [&] {
    return mean_all(row_mul_vec(add_rowvec(matmul(a, b), bias), u));
  }, 1e-5, 1e-6, "matmul chain");
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Autodiff, SoftmaxVec) {
  Rng rng(7);
  auto a = Value::param(rand_tensor(rng, {5}, -2, 2));
  auto s = softmax_vec(a);
  double sum = s.val().sum();
  EXPECT_NEAR(sum, 1.0, 1e-12);
  auto probe = Value::constant(rand_tensor(rng, {5}, -1, 1));
  expect_grad_matches({a}, [&] {
    return mean_all(mul(softmax_vec(a), probe));
  }, 1e-6, 1e-6, "softmax");
}

TEST(Autodiff, ConvForwardHandChecked) {
  // Single 3x3 kernel over a 3x3 image; centre output is the full dot
  // product, corners see only the overlapping taps.
  auto x = Value::constant(Tensor::from({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  auto w = Value::param(Tensor::from({1, 1, 3, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9}));
  auto b = Value::param(Tensor::from({1}, {0.25}));
  auto y = conv2d_same(x, w, b);
  double centre = 0.25;
  const double xs[9] = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  const double ws[9] = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  for (int i = 0; i < 9; ++i) centre += xs[i] * ws[i];
  EXPECT_NEAR(y.val().at(0, 0, 1, 1), centre, 1e-12);
  double corner = 0.25 + 1 * ws[4] + 2 * ws[5] + 4 * ws[7] + 5 * ws[8];
  EXPECT_NEAR(y.val().at(0, 0, 0, 0), corner, 1e-12);
}

TEST(Autodiff, ConvGradients) {
  Rng rng(8);
  auto x = Value::param(rand_tensor(rng, {2, 3, 6, 5}, -1, 1));
  auto w = Value::param(rand_tensor(rng, {4, 3, 3, 3}, -0.5, 0.5));
  auto b = Value::param(rand_tensor(rng, {4}, -0.5, 0.5));
  auto probe = Value::constant(rand_tensor(rng, {2, 4, 6, 5}, -1, 1));
  expect_grad_matches({x, w, b}, [&] {
    return mean_all(mul(conv2d_same(x, w, b), probe));
  }, 1e-5, 1e-6, "conv3x3");
  auto w1 = Value::param(rand_tensor(rng, {2, 3, 1, 1}, -0.5, 0.5));
  auto b1 = Value::param(rand_tensor(rng, {2}, -0.5, 0.5));
  auto probe1 = Value::constant(rand_tensor(rng, {2, 2, 6, 5}, -1, 1));
  expect_grad_matches({x, w1, b1}, [&] {
    return mean_all(mul(conv2d_same(x, w1, b1), probe1));
  }, 1e-5, 1e-6, "conv1x1");
}

TEST(Autodiff, MaxPoolArgmaxAndGrad) {
  auto x = Value::param(Tensor::from({1, 1, 2, 4}, {1, 5, 2, 2, 3, 4, 9, 2}));
  auto y = maxpool2(x);
  EXPECT_DOUBLE_EQ(y.val().at(0, 0, 0, 0), 5.0);
  EXPECT_DOUBLE_EQ(y.val().at(0, 0, 0, 1), 9.0);
  backward(sum_all(y));
  Tensor g = x.grad();
  EXPECT_DOUBLE_EQ(g.at(0, 0, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(g.at(0, 0, 1, 2), 1.0);
  EXPECT_DOUBLE_EQ(g.sum(), 2.0);
  Rng rng(9);
  auto xr = Value::param(rand_tensor(rng, {2, 2, 4, 4}, -1, 1));
  auto probe = Value::constant(rand_tensor(rng, {2, 2, 2, 2}, -1, 1));
  expect_grad_matches({xr}, [&] {
    return mean_all(mul(maxpool2(xr), probe));
  }, 1e-6, 1e-5, "maxpool");
  EXPECT_THROW(maxpool2(Value::constant(Tensor({1, 1, 3, 4}))), ShapeError);
}

TEST(Autodiff, Upsample) {
  Rng rng(10);
  auto x = Value::param(rand_tensor(rng, {2, 3, 3, 2}, -1, 1));
  auto y = upsample2(x);
  EXPECT_EQ(y.val().dim(2), 6);
  EXPECT_DOUBLE_EQ(y.val().at(0, 0, 1, 1), x.val().at(0, 0, 0, 0));
  auto probe = Value::constant(rand_tensor(rng, {2, 3, 6, 4}, -1, 1));
  expect_grad_matches({x}, [&] {
    return mean_all(mul(upsample2(x), probe));
  }, 1e-5, 1e-6, "upsample");
}

TEST(Autodiff, ChannelAffine) {
  Rng rng(11);
  auto f = Value::param(rand_tensor(rng, {2, 3, 4, 4}, -1, 1));
  auto s = Value::param(rand_tensor(rng, {2, 3}, 0.5, 1.5));
  auto b = Value::param(rand_tensor(rng, {2, 3}, -0.5, 0.5));
  auto probe = Value::constant(rand_tensor(rng, {2, 3, 4, 4}, -1, 1));
  expect_grad_matches({f, s, b}, [&] {
    return mean_all(mul(shift_channels(scale_channels(f, s), b), probe));
  }, 1e-5, 1e-6, "channel affine");
}

TEST(Autodiff, BcePerSampleGrad) {
  Rng rng(12);
  auto p = Value::param(rand_tensor(rng, {2, 1, 3, 3}, 0.1, 0.9));
  Tensor yv({2, 1, 3, 3});
  for (std::size_t i = 0; i < yv.size(); ++i) yv[i] = (i % 3 == 0) ? 1.0 : 0.0;
  auto y = Value::constant(yv);
  auto probe = Value::constant(rand_tensor(rng, {2}, 0.2, 1.0));
  expect_grad_matches({p}, [&] {
    return mean_all(mul(bce_per_sample(p, y), probe));
  }, 1e-6, 1e-5, "bce");
}

TEST(Autodiff, KdPerSampleGrad) {
  Rng rng(13);
  auto za = Value::param(rand_tensor(rng, {2, 1, 3, 3}, -3, 3));
  auto zb = Value::param(rand_tensor(rng, {2, 1, 3, 3}, -3, 3));
  auto probe = Value::constant(rand_tensor(rng, {2}, 0.2, 1.0));
  expect_grad_matches({za, zb}, [&] {
    return mean_all(mul(kd_per_sample(za, zb, 4.0), probe));
  }, 1e-6, 1e-5, "kd");
}

TEST(Autodiff, DetachStopsGradient) {
  auto a = Value::param(Tensor::from({3}, {0.5, -1.0, 2.0}));
  auto loss = mean_all(mul(a, detach(a)));
  backward(loss);
  // d/da of a*const(a0) = a0 / n, not 2a / n.
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(a.grad().at(i), a.val().at(i) / 3.0);
  // Path-restricted finite differences: freeze the detached branch at its
  // base value, then the measured slope must match the autodiff gradient.
  Tensor frozen = a.val();
  expect_grad_matches({a}, [&] { return mean_all(mul(a, Value::constant(frozen))); },
                      1e-6, 1e-8, "detach");
  // Live finite differences see both paths and disagree.
  double h = 1e-5;
  double v = a.val().at(0);
  a.val().at(0) = v + h;
  double lp = mean_all(mul(a, detach(a))).val().item();
  a.val().at(0) = v - h;
  double lm = mean_all(mul(a, detach(a))).val().item();
  a.val().at(0) = v;
  double live_fd = (lp - lm) / (2 * h);
  EXPECT_GT(std::abs(live_fd - a.grad().at(0)), 1e-6);
}

TEST(Autodiff, TwoBackwardsShareOneGraph) {
  auto x = Value::param(Tensor::from({3}, {1.0, 2.0, 3.0}));
  auto sq = mul(x, x);
  auto l1 = sum_all(sq);
  auto l2 = sum_all(mul_scalar(sq, 3.0));
  backward(l1);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad().at(i), 2.0 * x.val().at(i));
  backward(l2);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad().at(i), 6.0 * x.val().at(i));
}

TEST(Autodiff, AddZeroIsBitwiseIdentity) {
  Rng rng(14);
  Tensor base = rand_tensor(rng, {4, 7}, -2, 2);
  auto a = Value::param(base);
  auto z = Value::constant(Tensor({4, 7}, 0.0));
  auto y = add(a, z);
  ASSERT_EQ(y.val().size(), base.size());
  EXPECT_EQ(std::memcmp(y.val().data(), base.data(), base.size() * sizeof(double)), 0);
}

TEST(Autodiff, NoGradModeBuildsNoGraph) {
  auto a = Value::param(Tensor::from({2}, {1.0, 2.0}));
  {
    NoGradGuard ng;
    auto y = mean_all(mul(a, a));
    EXPECT_FALSE(y.requires_grad());
    EXPECT_THROW(backward(y), StateError);
  }
  auto y = mean_all(mul(a, a));
  EXPECT_TRUE(y.requires_grad());
}

TEST(Autodiff, BackwardRootMustBeScalar) {
  auto a = Value::param(Tensor::from({2}, {1.0, 2.0}));
  auto y = mul(a, a);
  EXPECT_THROW(backward(y), ShapeError);
}

TEST(Autodiff, MismatchedShapesThrow) {
  auto a = Value::param(Tensor({2, 3}));
  auto b = Value::param(Tensor({3, 2}));
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
}
