#include <gtest/gtest.h>

#include <cmath>

#include "istdkd/rng.hpp"
#include "istdkd/scam.hpp"
#include "testutil.hpp"

using namespace istdkd;
using namespace istdkd::scam;
using ad::Value;

namespace {

ScamLayer rand_layer(int channels, int d, int hidden, Rng& rng, double gate_init = 0.1) {
  ScamLayer l = make_scam_layer(0, channels, d, hidden, rng, gate_init);
  // The factory zero-inits the generator head; randomize it so both halves
  // of the output are exercised.
  for (std::size_t i = 0; i < l.w2.val().size(); ++i) l.w2.val()[i] = rng.normal(0.0, 0.4);
  for (std::size_t i = 0; i < l.b2.val().size(); ++i) l.b2.val()[i] = rng.normal(0.0, 0.2);
  return l;
}

}  // namespace

TEST(Affine, ZeroGateDisablesScale) {
  Rng rng(101);
  ScamLayer l = rand_layer(4, 6, 8, rng, 0.0);
  Value g = Value::constant(testutil::rand_tensor(rng, {3, 6}));
  auto [gamma, beta] = affine_params(g, l);
  ASSERT_EQ(gamma.val().dim(0), 3);
  ASSERT_EQ(gamma.val().dim(1), 4);
  for (std::size_t i = 0; i < gamma.val().size(); ++i) EXPECT_EQ(gamma.val()[i], 1.0);
  // beta is ungated and must still be live.
  double bmax = 0.0;
  for (std::size_t i = 0; i < beta.val().size(); ++i) bmax = std::max(bmax, std::abs(beta.val()[i]));
  EXPECT_GT(bmax, 0.0);
}

TEST(Affine, TanhHalfExample) {
  // Hand-built generator: gamma_raw = 5, gate 0.1 -> gamma = 1 + tanh(0.5).
  Rng rng(1);
  ScamLayer l = make_scam_layer(0, 1, 1, 1, rng, 0.1);
  l.w1.val()[0] = 1.0;
  l.w2.val() = Tensor::from({1, 2}, {5.0, 0.3});
  Value g = Value::constant(Tensor({1, 1}, 1.0));
  auto [gamma, beta] = affine_params(g, l);
  EXPECT_NEAR(gamma.val().at(0, 0), 1.46212, 1e-5);
  EXPECT_DOUBLE_EQ(gamma.val().at(0, 0), 1.0 + std::tanh(0.5));
  EXPECT_DOUBLE_EQ(beta.val().at(0, 0), 0.3);
}

TEST(Affine, ScaleConfinedToOpenInterval) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    ScamLayer l = rand_layer(6, 5, 8, rng, rng.uniform(-2.0, 2.0));
    Value g = Value::constant(testutil::rand_tensor(rng, {4, 5}, -3.0, 3.0));
    auto [gamma, beta] = affine_params(g, l);
    for (std::size_t i = 0; i < gamma.val().size(); ++i) {
      EXPECT_GT(gamma.val()[i], 0.0);
      EXPECT_LT(gamma.val()[i], 2.0);
    }
  }
}

TEST(Affine, RejectsRank1Input) {
  Rng rng(2);
  ScamLayer l = make_scam_layer(0, 2, 3, 4, rng);
  EXPECT_THROW(affine_params(Value::constant(Tensor({3}, 0.0)), l), ShapeError);
}

TEST(Modulate, IdentityAffine) {
  Rng rng(11);
  Tensor f = testutil::rand_tensor(rng, {2, 3, 4, 4});
  Value out = modulate(Value::constant(f), Value::constant(Tensor({2, 3}, 1.0)),
                       Value::constant(Tensor({2, 3}, 0.0)));
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(out.val()[i], f[i]);
}

TEST(Modulate, DirectExample) {
  // f=2, gamma=1.5, beta=0.1: delta = 0.5*2 + 0.1 = 1.1, f~ = 3.1.
  Value out = modulate(Value::constant(Tensor({1, 1, 1, 1}, 2.0)),
                       Value::constant(Tensor({1, 1}, 1.5)),
                       Value::constant(Tensor({1, 1}, 0.1)));
  EXPECT_DOUBLE_EQ(out.val()[0], 3.1);
}

TEST(Modulate, ZeroFeaturesGiveBeta) {
  Rng rng(13);
  Tensor beta = testutil::rand_tensor(rng, {2, 3});
  Value out = modulate(Value::constant(Tensor({2, 3, 2, 2}, 0.0)),
                       Value::constant(testutil::rand_tensor(rng, {2, 3}, 0.5, 1.5)),
                       Value::constant(beta));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 2; ++x) EXPECT_DOUBLE_EQ(out.val().at(n, c, y, x), beta.at(n, c));
}

TEST(Modulate, ChannelMismatchThrows) {
  EXPECT_THROW(modulate(Value::constant(Tensor({1, 3, 2, 2}, 0.0)),
                        Value::constant(Tensor({1, 2}, 1.0)),
                        Value::constant(Tensor({1, 2}, 0.0))),
               ShapeError);
}

// A freshly made layer (zero generator head) must be a bit-for-bit identity
// regardless of the gate value — this is the training start state.
TEST(Modulate, BitwiseIdentityAtInit) {
  Rng rng(17);
  ScamLayer l = make_scam_layer(2, 5, 8, 16, rng, 0.1);
  Value g = Value::constant(testutil::rand_tensor(rng, {3, 8}, -2.0, 2.0));
  Tensor f = testutil::rand_tensor(rng, {3, 5, 6, 6}, 0.0, 1.0);
  f.at(0, 0, 0, 0) = 0.0;  // relu-style exact zeros must survive too
  f.at(2, 4, 5, 5) = 0.0;
  Value out = modulate_with(Value::constant(f), g, l);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(out.val()[i], f[i]);
}

// Zero gate and a beta head forced to zero: identity even with a trained
// scale head.
TEST(Modulate, ZeroGateZeroBetaIdentity) {
  Rng rng(19);
  ScamLayer l = rand_layer(4, 6, 8, rng, 0.0);
  int c = l.channels;
  for (int h = 0; h < l.w2.val().dim(0); ++h)
    for (int j = c; j < 2 * c; ++j) l.w2.val().at(h, j) = 0.0;
  for (int j = c; j < 2 * c; ++j) l.b2.val().at(j) = 0.0;
  Value g = Value::constant(testutil::rand_tensor(rng, {2, 6}));
  Tensor f = testutil::rand_tensor(rng, {2, 4, 3, 3}, 0.1, 1.0);
  Value out = modulate_with(Value::constant(f), g, l);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(out.val()[i], f[i]);
}

TEST(GateSparsity, Examples) {
  Rng rng(23);
  ScamLayer a = make_scam_layer(0, 2, 3, 4, rng);
  ScamLayer b = make_scam_layer(1, 1, 3, 4, rng);
  a.gate.val() = Tensor::from({2}, {1.0, -2.0});
  b.gate.val() = Tensor({1}, 0.5);
  EXPECT_DOUBLE_EQ(gate_sparsity({a, b}).val().item(), 3.5);
  a.gate.val() = Tensor({2}, 0.0);
  b.gate.val() = Tensor({1}, 0.0);
  EXPECT_DOUBLE_EQ(gate_sparsity({a, b}).val().item(), 0.0);
  EXPECT_THROW(gate_sparsity({}), ConfigError);
}

TEST(GateSparsity, PositiveHomogeneity) {
  Rng rng(29);
  ScamLayer a = make_scam_layer(0, 6, 3, 4, rng);
  a.gate.val() = testutil::rand_tensor(rng, {6}, -1.0, 1.0);
  double r1 = gate_sparsity({a}).val().item();
  for (int i = 0; i < 6; ++i) a.gate.val()[i] *= 3.0;
  EXPECT_NEAR(gate_sparsity({a}).val().item(), 3.0 * r1, 1e-12);
}

TEST(Scam, GradientsMatchFiniteDifferences) {
  Rng rng(31);
  ScamLayer l = rand_layer(4, 6, 5, rng, 0.3);
  Value g = Value::param(testutil::rand_tensor(rng, {2, 6}, -1.0, 1.0));
  Value f = Value::param(testutil::rand_tensor(rng, {2, 4, 3, 3}, 0.05, 1.0));
  auto make_loss = [&]() {
    Value out = modulate_with(f, g, l);
    Value sq = ad::mul(out, out);
    return ad::add(ad::mean_all(sq), ad::mul_scalar(gate_sparsity({l}), 0.05));
  };
  testutil::expect_grad_matches({l.w1, l.b1, l.w2, l.b2, l.gate, g, f}, make_loss, 1e-5, 1e-4,
                                "scam");
}

TEST(Scam, ParamListCoversAllLeaves) {
  Rng rng(37);
  ScamLayer l = make_scam_layer(0, 3, 4, 5, rng);
  auto ps = l.params();
  ASSERT_EQ(ps.size(), 5u);
  std::size_t total = 0;
  for (const auto& p : ps) {
    EXPECT_TRUE(p.requires_grad());
    total += p.val().size();
  }
  EXPECT_EQ(total, 4u * 5 + 5 + 5u * 6 + 6 + 3);
}
