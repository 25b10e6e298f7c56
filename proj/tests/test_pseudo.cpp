#include <gtest/gtest.h>

#include <algorithm>
#include <deque>
#include <vector>

#include "istdkd/pseudo.hpp"
#include "istdkd/rng.hpp"
#include "testutil.hpp"

using namespace istdkd;
using namespace istdkd::pseudo;

namespace {

// Independent oracle: threshold over the point's clipped 33x33 window, then
// BFS flood over {p > t} from the point.
BinaryMask oracle_component(const Tensor& p, int pr, int pc) {
  int h = p.dim(0), w = p.dim(1);
  int r0 = std::max(0, pr - 16), r1 = std::min(h - 1, pr + 16);
  int c0 = std::max(0, pc - 16), c1 = std::min(w - 1, pc + 16);
  double mx = -1.0, sum = 0.0;
  int n = 0;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      mx = std::max(mx, p.at(r, c));
      sum += p.at(r, c);
      ++n;
    }
  double t = 0.5 * mx + 0.5 * sum / n;
  BinaryMask m(h, w);
  if (!(p.at(pr, pc) > t)) return m;
  std::deque<std::pair<int, int>> q{{pr, pc}};
  m.at(pr, pc) = 1;
  while (!q.empty()) {
    auto [r, c] = q.front();
    q.pop_front();
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        int nr = r + dr, nc = c + dc;
        if (nr < 0 || nr >= h || nc < 0 || nc >= w || m.at(nr, nc)) continue;
        if (p.at(nr, nc) > t) {
          m.at(nr, nc) = 1;
          q.emplace_back(nr, nc);
        }
      }
  }
  return m;
}

Tensor blob_probs(int h, int w, int r0, int r1, int c0, int c1, double hi = 0.9,
                  double bg = 0.05) {
  Tensor p({h, w}, bg);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) p.at(r, c) = hi;
  return p;
}

}  // namespace

TEST(Init, SinglePointDisk) {
  PseudoMaskStore store;
  store.init("a", {{10, 10}}, 64, 64);
  const BinaryMask& m = store.mask("a");
  EXPECT_EQ(m.count(), 5u);
  EXPECT_EQ(m.at(10, 10), 1);
  EXPECT_EQ(m.at(9, 10), 1);
  EXPECT_EQ(m.at(11, 10), 1);
  EXPECT_EQ(m.at(10, 9), 1);
  EXPECT_EQ(m.at(10, 11), 1);
  EXPECT_EQ(m.at(9, 9), 0);
}

TEST(Init, CornerPointClipped) {
  PseudoMaskStore store;
  store.init("a", {{0, 0}}, 64, 64);
  EXPECT_EQ(store.mask("a").count(), 3u);
  EXPECT_EQ(store.mask("a").at(0, 0), 1);
}

TEST(Init, TwoPointUnion) {
  PseudoMaskStore store;
  store.init("a", {{10, 10}, {30, 30}}, 64, 64);
  EXPECT_EQ(store.mask("a").count(), 10u);
  EXPECT_EQ(store.mask("a").at(10, 10), 1);
  EXPECT_EQ(store.mask("a").at(30, 30), 1);
  // Overlapping disks only count once.
  PseudoMaskStore o;
  o.init("b", {{10, 10}, {10, 11}}, 64, 64);
  EXPECT_EQ(o.mask("b").count(), 8u);
}

TEST(Init, OutOfBoundsPointThrows) {
  PseudoMaskStore store;
  EXPECT_THROW(store.init("a", {{64, 10}}, 64, 64), DataError);
  EXPECT_THROW(store.init("b", {{-1, 0}}, 64, 64), DataError);
}

TEST(Evolve, MaskProbabilitiesAreFixedPoint) {
  PseudoMaskStore store;
  store.init("a", {{32, 32}}, 64, 64);
  BinaryMask before = store.mask("a");
  store.evolve("a", before.to_tensor(), 1);
  EXPECT_TRUE(store.mask("a") == before);
  // And again after the mask has grown to a blob.
  Tensor p = blob_probs(64, 64, 30, 34, 30, 34);
  store.evolve("a", p, 2);
  BinaryMask grown = store.mask("a");
  EXPECT_GT(grown.count(), before.count());
  store.evolve("a", grown.to_tensor(), 3);
  EXPECT_TRUE(store.mask("a") == grown);
}

TEST(Evolve, ZeroPredictionKeepsPrevious) {
  PseudoMaskStore store;
  store.init("a", {{32, 32}}, 64, 64);
  BinaryMask disks = store.mask("a");
  store.evolve("a", Tensor({64, 64}, 0.0), 1);
  EXPECT_TRUE(store.mask("a") == disks);  // reverts to the point disks
  // Grow, then feed zeros: the accepted component is retained.
  store.evolve("a", blob_probs(64, 64, 30, 34, 30, 34), 2);
  BinaryMask grown = store.mask("a");
  store.evolve("a", Tensor({64, 64}, 0.0), 3);
  EXPECT_TRUE(store.mask("a") == grown);
}

TEST(Evolve, CleanBlobMatchesFloodOracle) {
  PseudoMaskStore store;
  store.init("a", {{32, 32}}, 64, 64);
  Tensor p = blob_probs(64, 64, 29, 34, 30, 35);  // 6x6 blob, 36 px <= cap 40
  store.evolve("a", p, 1);
  BinaryMask want = oracle_component(p, 32, 32);
  EXPECT_EQ(want.count(), 36u);
  mask_union_into(want, point_disk(64, 64, 32, 32));
  EXPECT_TRUE(store.mask("a") == want);
}

TEST(Evolve, CapBoundary) {
  // 5x8 = 40 px: exactly at the 1% cap of a 64x64 image, accepted.
  PseudoMaskStore at_cap;
  at_cap.init("a", {{32, 32}}, 64, 64);
  at_cap.evolve("a", blob_probs(64, 64, 30, 34, 29, 36), 1);
  EXPECT_GE(at_cap.mask("a").count(), 40u);
  // 9x9 = 81 px: over the cap, the disk is kept instead.
  PseudoMaskStore over;
  over.init("a", {{32, 32}}, 64, 64);
  BinaryMask disks = over.mask("a");
  over.evolve("a", blob_probs(64, 64, 28, 36, 28, 36), 1);
  EXPECT_TRUE(over.mask("a") == disks);
}

TEST(Evolve, PointRetentionUnderRandomMaps) {
  Rng rng(3);
  PseudoMaskStore store;
  std::vector<std::pair<int, int>> pts = {{5, 9}, {40, 50}, {63, 0}};
  store.init("a", pts, 64, 64);
  for (int epoch = 1; epoch <= 5; ++epoch) {
    store.evolve("a", testutil::rand_tensor(rng, {64, 64}, 0.0, 1.0), epoch);
    for (auto [r, c] : pts) EXPECT_EQ(store.mask("a").at(r, c), 1) << "epoch " << epoch;
    for (auto b : store.mask("a").v) EXPECT_TRUE(b == 0 || b == 1);
  }
  EXPECT_EQ(store.entry("a").updated_epoch, 5);
}

TEST(Evolve, PerPointComponentsIndependent) {
  PseudoMaskStore store;
  store.init("a", {{16, 16}, {48, 48}}, 64, 64);
  // Blob around the first point only; the second keeps its disk.
  store.evolve("a", blob_probs(64, 64, 14, 18, 14, 18), 1);
  const BinaryMask& m = store.mask("a");
  EXPECT_EQ(m.at(14, 14), 1);
  EXPECT_EQ(m.at(48, 48), 1);
  EXPECT_EQ(m.count(), 25u + 5u);
}

TEST(Evolve, ErrorPaths) {
  PseudoMaskStore store;
  store.init("a", {{8, 8}}, 32, 32);
  EXPECT_THROW(store.evolve("a", Tensor({16, 16}, 0.0), 1), ShapeError);
  EXPECT_THROW(store.evolve("nope", Tensor({32, 32}, 0.0), 1), StateError);
  EXPECT_THROW(store.mask("nope"), StateError);
  Tensor bad({32, 32}, 0.5);
  bad[7] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(store.evolve("a", bad, 1), NumericError);
}
