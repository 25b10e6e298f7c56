#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "istdkd/mask.hpp"
#include "istdkd/png_io.hpp"
#include "istdkd/synthdata.hpp"

using namespace istdkd;
using namespace istdkd::synth;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("istdkd_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Synthdata, SalientContract) {
  Sample s = generate_scene(Tag::Salient, 64, 64, 1, 0);
  EXPECT_EQ(s.tag, Tag::Salient);
  EXPECT_EQ(s.image.dim(0), 64);
  EXPECT_EQ(s.image.dim(1), 64);
  ComponentLabels labels = label_components(s.gt);
  EXPECT_EQ(labels.count, 1);
  ASSERT_EQ(s.points.size(), 1u);
  EXPECT_GE(contrast(s.image, s.gt), 0.4);
  EXPECT_LE(static_cast<double>(s.gt.count()), 0.002 * 64 * 64 + 1e-9);
  EXPECT_LE(bbox_aspect(s.gt), 2.0);
  for (std::size_t i = 0; i < s.image.size(); ++i) {
    EXPECT_GE(s.image[i], 0.0);
    EXPECT_LE(s.image[i], 1.0);
  }
}

TEST(Synthdata, CamouflagedContract) {
  Sample s = generate_scene(Tag::Camouflaged, 64, 64, 2, 1);
  ComponentLabels labels = label_components(s.gt);
  EXPECT_EQ(labels.count, 2);
  ASSERT_EQ(s.points.size(), 2u);
  for (int id = 1; id <= labels.count; ++id) {
    BinaryMask comp(s.gt.h, s.gt.w);
    for (int r = 0; r < s.gt.h; ++r)
      for (int c = 0; c < s.gt.w; ++c)
        if (labels.at(r, c) == id) comp.at(r, c) = 1;
    EXPECT_GE(bbox_aspect(comp), 3.0);
    EXPECT_LE(contrast(s.image, comp), 0.15);
    EXPECT_LE(static_cast<double>(comp.count()), 0.002 * 64 * 64 + 1e-9);
  }
}

TEST(Synthdata, FilamentaryAndFaintContracts) {
  Sample fil = generate_scene(Tag::Filamentary, 64, 64, 1, 7);
  EXPECT_GE(bbox_aspect(fil.gt), 3.0);
  EXPECT_GE(contrast(fil.image, fil.gt), 0.4);
  Sample fnt = generate_scene(Tag::Faint, 64, 64, 1, 7);
  EXPECT_LE(bbox_aspect(fnt.gt), 2.0);
  EXPECT_LE(contrast(fnt.image, fnt.gt), 0.15);
}

TEST(Synthdata, DeterministicBitIdentical) {
  Sample a = generate_scene(Tag::Faint, 64, 64, 3, 5);
  Sample b = generate_scene(Tag::Faint, 64, 64, 3, 5);
  ASSERT_EQ(a.image.size(), b.image.size());
  EXPECT_EQ(std::memcmp(a.image.data(), b.image.data(), a.image.size() * sizeof(double)), 0);
  EXPECT_EQ(a.gt.v, b.gt.v);
  EXPECT_EQ(a.points, b.points);
  Sample c = generate_scene(Tag::Faint, 64, 64, 3, 6);
  EXPECT_NE(std::memcmp(a.image.data(), c.image.data(), a.image.size() * sizeof(double)), 0);
}

TEST(Synthdata, PointsInsidePositiveComponents) {
  std::uint64_t seed = 100;
  for (Tag tag : all_tags()) {
    for (int n = 1; n <= 3; ++n) {
      Sample s = generate_scene(tag, 64, 64, n, seed++);
      ComponentLabels labels = label_components(s.gt);
      EXPECT_EQ(labels.count, n);
      EXPECT_EQ(s.points.size(), static_cast<std::size_t>(n));
      std::set<int> comps;
      for (auto& [r, c] : s.points) {
        EXPECT_EQ(s.gt.at(r, c), 1) << tag_name(tag);
        comps.insert(labels.at(r, c));
      }
      EXPECT_EQ(static_cast<int>(comps.size()), n);
    }
  }
}

TEST(Synthdata, ContrastOrderingAcrossCorpus) {
  double min_salient = 1e9, max_faint = -1e9;
  for (int i = 0; i < 12; ++i) {
    Sample s = generate_scene(Tag::Salient, 64, 64, 1 + (i % 3), 200 + i);
    Sample f = generate_scene(Tag::Faint, 64, 64, 1 + (i % 3), 300 + i);
    ComponentLabels sl = label_components(s.gt);
    ComponentLabels flb = label_components(f.gt);
    for (int id = 1; id <= sl.count; ++id) {
      BinaryMask comp(s.gt.h, s.gt.w);
      for (std::size_t k = 0; k < comp.v.size(); ++k) comp.v[k] = sl.label[k] == id ? 1 : 0;
      min_salient = std::min(min_salient, contrast(s.image, comp));
    }
    for (int id = 1; id <= flb.count; ++id) {
      BinaryMask comp(f.gt.h, f.gt.w);
      for (std::size_t k = 0; k < comp.v.size(); ++k) comp.v[k] = flb.label[k] == id ? 1 : 0;
      max_faint = std::max(max_faint, contrast(f.image, comp));
    }
  }
  EXPECT_GT(min_salient, max_faint);
}

TEST(Synthdata, InvalidArgs) {
  EXPECT_THROW(generate_scene(Tag::Salient, 16, 64, 1, 0), ConfigError);
  EXPECT_THROW(generate_scene(Tag::Salient, 64, 31, 1, 0), ConfigError);
  EXPECT_THROW(generate_scene(Tag::Salient, 64, 64, 0, 0), ConfigError);
  EXPECT_THROW(generate_scene(Tag::Salient, 64, 64, 6, 0), ConfigError);
  EXPECT_THROW(tag_from_name("blobby"), DataError);
}

TEST(Synthdata, SmallestLegalSize) {
  for (Tag tag : all_tags()) {
    Sample s = generate_scene(tag, 32, 32, 1, 42);
    EXPECT_EQ(label_components(s.gt).count, 1);
  }
}

TEST(Synthdata, DerivePointExamples) {
  // Single-pixel component.
  Tensor img({16, 16}, 0.1);
  BinaryMask m(16, 16);
  m.at(5, 7) = 1;
  ComponentLabels l = label_components(m);
  EXPECT_EQ(derive_point(img, l, 1), std::make_pair(5, 7));

  // Uniform 3x3 block: row-major tie-break picks the top-left pixel.
  BinaryMask blk(16, 16);
  for (int r = 2; r <= 4; ++r)
    for (int c = 2; c <= 4; ++c) blk.at(r, c) = 1;
  Tensor uni({16, 16}, 0.5);
  ComponentLabels lb = label_components(blk);
  EXPECT_EQ(derive_point(uni, lb, 1), std::make_pair(2, 2));

  // Gaussian blob peaked at (10,12): brute-force argmax agrees.
  Tensor g({24, 24});
  BinaryMask gm(24, 24);
  for (int r = 0; r < 24; ++r)
    for (int c = 0; c < 24; ++c) {
      double d2 = (r - 10.0) * (r - 10.0) + (c - 12.0) * (c - 12.0);
      g.at(r, c) = std::exp(-0.5 * d2 / 4.0);
      if (g.at(r, c) >= 0.5) gm.at(r, c) = 1;
    }
  ComponentLabels lg = label_components(gm);
  std::pair<int, int> brute{-1, -1};
  double best = -1;
  for (int r = 0; r < 24; ++r)
    for (int c = 0; c < 24; ++c)
      if (lg.at(r, c) == 1 && g.at(r, c) > best) {
        best = g.at(r, c);
        brute = {r, c};
      }
  EXPECT_EQ(derive_point(g, lg, 1), std::make_pair(10, 12));
  EXPECT_EQ(derive_point(g, lg, 1), brute);

  // Empty component id.
  EXPECT_THROW(derive_point(g, lg, 3), DomainError);
}

TEST(Synthdata, MakeSplitContract) {
  std::vector<std::string> ids;
  for (int i = 0; i < 100; ++i) ids.push_back("s" + std::to_string(i));
  Split s = make_split(ids, 0.1, 3);
  EXPECT_EQ(s.train.size(), 90u);
  EXPECT_EQ(s.val.size(), 10u);
  std::set<std::string> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  EXPECT_EQ(all.size(), 100u);

  Split again = make_split(ids, 0.1, 3);
  EXPECT_EQ(s.train, again.train);
  EXPECT_EQ(s.val, again.val);
  Split other = make_split(ids, 0.1, 4);
  EXPECT_NE(s.val, other.val);

  std::vector<std::string> ten(ids.begin(), ids.begin() + 10);
  Split t = make_split(ten, 0.1, 0);
  EXPECT_EQ(t.train.size(), 9u);
  EXPECT_EQ(t.val.size(), 1u);

  EXPECT_THROW(make_split(ids, 0.0, 0), ConfigError);
  EXPECT_THROW(make_split(ids, 1.0, 0), ConfigError);
  EXPECT_THROW(make_split(ten = {"a", "b"}, 0.1, 0), DataError);
}

TEST(Synthdata, PngRoundTripQuantisation) {
  auto dir = temp_dir("png");
  Sample s = generate_scene(Tag::Salient, 64, 64, 2, 9);
  pngio::write_gray16((dir / "img.png").string(), s.image);
  Tensor back = pngio::read_gray16((dir / "img.png").string());
  ASSERT_EQ(back.dim(0), 64);
  double max_err = 0;
  for (std::size_t i = 0; i < back.size(); ++i)
    max_err = std::max(max_err, std::abs(back[i] - s.image[i]));
  EXPECT_LE(max_err, 0.5 / 65535.0 + 1e-12);
  pngio::write_mask((dir / "m.png").string(), s.gt);
  BinaryMask mb = pngio::read_mask((dir / "m.png").string());
  EXPECT_EQ(mb, s.gt);
}

TEST(Synthdata, CorpusSaveLoadManifestRoundTrip) {
  auto dir = temp_dir("corpus");
  CorpusSpec spec;
  spec.n_train_pool = 12;
  spec.n_test = 8;
  spec.seed = 11;
  Dataset ds = build_corpus(spec);
  EXPECT_EQ(ds.samples.size(), 20u);
  EXPECT_EQ(ds.split.train.size() + ds.split.val.size(), 12u);
  EXPECT_EQ(ds.split.val.size(), 1u);
  EXPECT_EQ(ds.split.test.size(), 8u);
  save_dataset(ds, dir);

  Dataset back = load_dataset(dir);
  EXPECT_EQ(back.samples.size(), ds.samples.size());
  EXPECT_EQ(back.split.train, ds.split.train);
  EXPECT_EQ(back.split.val, ds.split.val);
  EXPECT_EQ(back.split.test, ds.split.test);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    EXPECT_EQ(back.samples[i].id, ds.samples[i].id);
    EXPECT_EQ(back.samples[i].tag, ds.samples[i].tag);
    EXPECT_EQ(back.samples[i].points, ds.samples[i].points);
    EXPECT_EQ(back.samples[i].gt.v, ds.samples[i].gt.v);
  }

  // Byte-identical manifest round trip.
  std::string before = slurp(dir / "manifest.json");
  save_dataset(back, dir);
  std::string after = slurp(dir / "manifest.json");
  EXPECT_EQ(before, after);
  EXPECT_FALSE(before.empty());

  EXPECT_THROW(load_dataset(dir / "nope"), DataError);
  try {
    load_dataset(dir / "nope");
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("manifest"), std::string::npos);
  }
}
