#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <set>

#include "istdkd/reweight.hpp"
#include "istdkd/rng.hpp"
#include "testutil.hpp"

using namespace istdkd;
using namespace istdkd::reweight;
using ad::Value;

namespace {

synth::Sample make_sample(const std::string& id, Tensor img, int n_points) {
  synth::Sample s;
  s.id = id;
  s.image = std::move(img);
  for (int i = 0; i < n_points; ++i) s.points.emplace_back(i, i);
  return s;
}

// Brute-force O(n^4) 2-D DFT energy ratio, independent of the library's
// row-column transform.
double sharpness_oracle(const Tensor& img) {
  int h = img.dim(0), w = img.dim(1);
  double total = 0.0, high = 0.0;
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      if (u == 0 && v == 0) continue;
      std::complex<double> acc(0.0, 0.0);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          double ang = -2.0 * M_PI * (static_cast<double>(u) * r / h + static_cast<double>(v) * c / w);
          acc += img.at(r, c) * std::complex<double>(std::cos(ang), std::sin(ang));
        }
      double e = std::norm(acc);
      total += e;
      double fu = static_cast<double>(std::min(u, h - u)) / h;
      double fv = static_cast<double>(std::min(v, w - v)) / w;
      if (std::max(fu, fv) > 0.25) high += e;
    }
  return total > 0.0 ? high / total : 0.0;
}

Tensor checkerboard(int n) {
  Tensor img({n, n});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) img.at(r, c) = (r + c) % 2 ? 1.0 : 0.0;
  return img;
}

}  // namespace

TEST(Priors, FlatImage) {
  Tensor f = prior_features(make_sample("a", Tensor({16, 16}, 0.37), 2));
  EXPECT_NEAR(f[0], 0.37, 1e-12);
  EXPECT_NEAR(f[1], 0.0, 1e-12);
  EXPECT_EQ(f[2], 0.0);  // identical neighbours difference exactly
  EXPECT_EQ(f[3], 0.0);
  EXPECT_EQ(f[4], 2.0);
}

TEST(Priors, MeanAndStdOracle) {
  Tensor img = Tensor::from({2, 2}, {0.0, 1.0, 1.0, 0.0});
  Tensor f = prior_features(make_sample("a", img, 0));
  EXPECT_DOUBLE_EQ(f[0], 0.5);
  EXPECT_DOUBLE_EQ(f[1], 0.5);  // population std of {0,1,1,0}
}

TEST(Priors, RampTexture) {
  // x-ramp with slope 0.05: every forward difference is (0.05, 0).
  Tensor img({8, 8});
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) img.at(r, c) = 0.05 * c;
  EXPECT_NEAR(texture_complexity(img), 0.05, 1e-12);
  // checkerboard: |dx|=|dy|=1 everywhere.
  EXPECT_NEAR(texture_complexity(checkerboard(8)), std::sqrt(2.0), 1e-12);
}

TEST(Priors, SharpnessMatchesBruteForceDft) {
  Rng rng(5);
  Tensor img = testutil::rand_tensor(rng, {8, 6}, 0.0, 1.0);
  EXPECT_NEAR(spectral_sharpness(img), sharpness_oracle(img), 1e-9);
}

TEST(Priors, CheckerboardIsMaximallySharp) {
  Tensor cb = checkerboard(8);
  double s_cb = spectral_sharpness(cb);
  EXPECT_NEAR(s_cb, 1.0, 1e-9);
  EXPECT_NEAR(s_cb, sharpness_oracle(cb), 1e-9);
  // And it dominates smooth content.
  Tensor smooth({8, 8});
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c)
      smooth.at(r, c) = 0.5 + 0.3 * std::cos(2.0 * M_PI * r / 8.0);
  EXPECT_LT(spectral_sharpness(smooth), s_cb);
}

TEST(Priors, PointCountHint) {
  Tensor img({8, 8}, 0.2);
  Tensor f1 = prior_features(make_sample("a", img, 1));
  Tensor f2 = prior_features(make_sample("a", img, 2));
  for (int j = 0; j < 4; ++j) EXPECT_EQ(f1[j], f2[j]);
  EXPECT_EQ(f1[4], 1.0);
  EXPECT_EQ(f2[4], 2.0);
}

namespace {

// Two tight blobs in feature space, labeled by construction.
Tensor blob_features(int m, Rng& rng, std::vector<int>& truth) {
  Tensor f({m, kPriorDim});
  truth.resize(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) {
    int b = i < m / 2 ? 0 : 1;
    truth[static_cast<std::size_t>(i)] = b;
    double base = b == 0 ? -3.0 : 3.0;
    for (int j = 0; j < kPriorDim; ++j) f.at(i, j) = base + rng.normal(0.0, 0.2);
  }
  return f;
}

std::vector<std::string> make_ids(int m) {
  std::vector<std::string> ids;
  for (int i = 0; i < m; ++i) ids.push_back("s" + std::to_string(i));
  return ids;
}

}  // namespace

TEST(Clusters, TwoBlobsSeparate) {
  Rng rng(7);
  std::vector<int> truth;
  Tensor f = blob_features(24, rng, truth);
  auto ids = make_ids(24);
  ClusterModel m = fit_clusters(f, ids, 2, 99);
  // Every sample sits with its own blob and at its nearest center.
  std::set<int> c0, c1;
  for (int i = 0; i < 24; ++i) {
    int c = m.cluster_of(ids[static_cast<std::size_t>(i)]);
    (truth[static_cast<std::size_t>(i)] == 0 ? c0 : c1).insert(c);
    Tensor row({kPriorDim});
    for (int j = 0; j < kPriorDim; ++j) row[j] = f.at(i, j);
    EXPECT_EQ(m.nearest(m.normalize(row)), c);
  }
  EXPECT_EQ(c0.size(), 1u);
  EXPECT_EQ(c1.size(), 1u);
  EXPECT_NE(*c0.begin(), *c1.begin());
}

TEST(Clusters, DeterministicForFixedSeed) {
  Rng rng(8);
  std::vector<int> truth;
  Tensor f = blob_features(20, rng, truth);
  auto ids = make_ids(20);
  ClusterModel a = fit_clusters(f, ids, 4, 123);
  ClusterModel b = fit_clusters(f, ids, 4, 123);
  for (std::size_t i = 0; i < a.centers.size(); ++i) EXPECT_EQ(a.centers[i], b.centers[i]);
  for (const auto& [id, c] : a.assignment) EXPECT_EQ(b.assignment.at(id), c);
}

TEST(Clusters, TooFewSamplesThrow) {
  Tensor f({3, kPriorDim}, 0.0);
  EXPECT_THROW(fit_clusters(f, make_ids(3), 4, 1), ConfigError);
  EXPECT_THROW(fit_clusters(f, make_ids(2), 2, 1), ShapeError);  // id/row mismatch
}

TEST(Clusters, ValAssignmentUsesFrozenStats) {
  Rng rng(9);
  std::vector<int> truth;
  Tensor f = blob_features(16, rng, truth);
  auto ids = make_ids(16);
  ClusterModel m = fit_clusters(f, ids, 2, 5);
  // A new sample identical to a fit sample lands in the same cluster.
  Tensor row({kPriorDim});
  for (int j = 0; j < kPriorDim; ++j) row[j] = f.at(3, j);
  EXPECT_EQ(m.assign("val_new", row), m.cluster_of("s3"));
  EXPECT_EQ(m.cluster_of("val_new"), m.cluster_of("s3"));
  EXPECT_THROW(m.cluster_of("never_seen"), StateError);
}

TEST(Weights, UniformLogitsGiveExactlyOne) {
  Rng rng(10);
  std::vector<int> truth;
  Tensor f = blob_features(12, rng, truth);
  auto ids = make_ids(12);
  ClusterModel m = fit_clusters(f, ids, 3, 2);
  Value w = sample_weights({"s0", "s5", "s11"}, m);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(w.val()[i], 1.0);
}

TEST(Weights, SingleClusterAlwaysOne) {
  Rng rng(11);
  std::vector<int> truth;
  Tensor f = blob_features(8, rng, truth);
  auto ids = make_ids(8);
  ClusterModel m = fit_clusters(f, ids, 1, 3);
  m.alpha.val()[0] = 2.7;  // any logit: single cluster normalizes it away
  Value w = sample_weights({"s1", "s2"}, m);
  for (int i = 0; i < 2; ++i) EXPECT_DOUBLE_EQ(w.val()[i], 1.0);
}

TEST(Weights, HandEvaluatedBatch) {
  ClusterModel m;
  m.centers = Tensor({2, kPriorDim});
  m.mu = Tensor({kPriorDim}, 0.0);
  m.sigma = Tensor({kPriorDim}, 1.0);
  m.alpha = Value::param(Tensor::from({2}, {std::log(2.0), 0.0}));
  m.assignment = {{"a", 0}, {"b", 0}, {"c", 1}, {"d", 1}};
  Value w = sample_weights({"a", "b", "c", "d"}, m);
  EXPECT_NEAR(w.val()[0], 4.0 / 3.0, 1e-12);
  EXPECT_NEAR(w.val()[1], 4.0 / 3.0, 1e-12);
  EXPECT_NEAR(w.val()[2], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(w.val()[3], 2.0 / 3.0, 1e-12);
}

TEST(Weights, BatchMeanOneAndPositive) {
  Rng rng(12);
  std::vector<int> truth;
  Tensor f = blob_features(20, rng, truth);
  auto ids = make_ids(20);
  ClusterModel m = fit_clusters(f, ids, 5, 4);
  for (int c = 0; c < 5; ++c) m.alpha.val()[c] = rng.uniform(-2.0, 2.0);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<std::string> batch;
    for (int i = 0; i < 6; ++i) batch.push_back(ids[rng.uniform_int(0, 19)]);
    Value w = sample_weights(batch, m);
    double mean = 0.0;
    for (int i = 0; i < 6; ++i) {
      EXPECT_GT(w.val()[i], 0.0);
      mean += w.val()[i];
    }
    EXPECT_NEAR(mean / 6.0, 1.0, 1e-6);
  }
}

TEST(Weights, AlphaShiftInvariance) {
  Rng rng(13);
  std::vector<int> truth;
  Tensor f = blob_features(12, rng, truth);
  auto ids = make_ids(12);
  ClusterModel m = fit_clusters(f, ids, 3, 6);
  for (int c = 0; c < 3; ++c) m.alpha.val()[c] = rng.uniform(-1.0, 1.0);
  std::vector<std::string> batch = {"s0", "s3", "s7", "s9"};
  Tensor before = sample_weights(batch, m).val();
  for (int c = 0; c < 3; ++c) m.alpha.val()[c] += 1.37;
  Tensor after = sample_weights(batch, m).val();
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(after[i], before[i], 1e-12);
}

TEST(Weights, DifferentiableInAlpha) {
  ClusterModel m;
  m.centers = Tensor({3, kPriorDim});
  m.mu = Tensor({kPriorDim}, 0.0);
  m.sigma = Tensor({kPriorDim}, 1.0);
  m.alpha = Value::param(Tensor::from({3}, {0.4, -0.3, 0.1}));
  m.assignment = {{"a", 0}, {"b", 1}, {"c", 2}, {"d", 0}};
  Rng rng(14);
  Tensor coef = testutil::rand_tensor(rng, {4});
  auto make_loss = [&]() {
    Value w = sample_weights({"a", "b", "c", "d"}, m);
    return ad::sum_all(ad::mul(w, Value::constant(coef)));
  };
  testutil::expect_grad_matches({m.alpha}, make_loss, 1e-5, 1e-6, "weights");
}

TEST(Weights, UnassignedIdThrows) {
  ClusterModel m;
  m.centers = Tensor({1, kPriorDim});
  m.alpha = Value::param(Tensor({1}, 0.0));
  m.assignment = {{"a", 0}};
  EXPECT_THROW(sample_weights({"a", "mystery"}, m), StateError);
  EXPECT_THROW(sample_weights({}, m), ConfigError);
}

TEST(ClustersJson, RoundTrip) {
  Rng rng(15);
  std::vector<int> truth;
  Tensor f = blob_features(10, rng, truth);
  auto ids = make_ids(10);
  ClusterModel m = fit_clusters(f, ids, 2, 7);
  m.alpha.val()[0] = 0.25;
  m.alpha.val()[1] = -0.5;
  nlohmann::ordered_json j = clusters_json(m);
  EXPECT_EQ(j["k"].get<int>(), 2);
  EXPECT_EQ(j["assignments"].size(), 10u);
  ClusterModel back = clusters_from_json(nlohmann::json::parse(j.dump()));
  EXPECT_EQ(back.k(), 2);
  for (std::size_t i = 0; i < m.centers.size(); ++i) EXPECT_EQ(back.centers[i], m.centers[i]);
  for (int c = 0; c < 2; ++c) EXPECT_EQ(back.alpha.val()[c], m.alpha.val()[c]);
  for (const auto& [id, c] : m.assignment) EXPECT_EQ(back.assignment.at(id), c);
  // Equal weights from the restored model.
  Tensor w0 = sample_weights({"s0", "s4"}, m).val();
  Tensor w1 = sample_weights({"s0", "s4"}, back).val();
  for (int i = 0; i < 2; ++i) EXPECT_EQ(w0[i], w1[i]);
}
