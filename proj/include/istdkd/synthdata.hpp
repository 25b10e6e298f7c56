#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "istdkd/errors.hpp"
#include "istdkd/mask.hpp"
#include "istdkd/png_io.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::synth {

enum class Tag { Salient, Filamentary, Faint, Camouflaged };

inline const char* tag_name(Tag t) {
  switch (t) {
    case Tag::Salient: return "salient";
    case Tag::Filamentary: return "filamentary";
    case Tag::Faint: return "faint";
    case Tag::Camouflaged: return "camouflaged";
  }
  throw DomainError("unknown tag");
}

inline Tag tag_from_name(const std::string& s) {
  if (s == "salient") return Tag::Salient;
  if (s == "filamentary") return Tag::Filamentary;
  if (s == "faint") return Tag::Faint;
  if (s == "camouflaged") return Tag::Camouflaged;
  throw DataError("unknown tag name: " + s);
}

inline const std::vector<Tag>& all_tags() {
  static const std::vector<Tag> tags = {Tag::Salient, Tag::Filamentary, Tag::Faint,
                                        Tag::Camouflaged};
  return tags;
}

struct Sample {
  std::string id;
  Tag tag = Tag::Salient;
  Tensor image;                            // H x W, values in [0,1]
  BinaryMask gt;                           // hidden ground truth, evaluation only
  std::vector<std::pair<int, int>> points; // (row, col), one per target
};

struct Split {
  std::vector<std::string> train, val, test;
  std::uint64_t seed = 0;
};

// Local contrast: mean target intensity minus mean intensity of a 5-pixel
// dilation ring around the target.
inline double contrast(const Tensor& image, const BinaryMask& target) {
  if (image.rank() != 2 || image.dim(0) != target.h || image.dim(1) != target.w)
    throw ShapeError("contrast: image/mask size mismatch");
  BinaryMask ring = dilate(target, 5);
  double tin = 0.0, tring = 0.0;
  std::size_t nin = 0, nring = 0;
  for (int r = 0; r < target.h; ++r)
    for (int c = 0; c < target.w; ++c) {
      if (target.at(r, c)) {
        tin += image.at(r, c);
        ++nin;
      } else if (ring.at(r, c)) {
        tring += image.at(r, c);
        ++nring;
      }
    }
  if (nin == 0) throw DomainError("contrast: empty target");
  if (nring == 0) return 0.0;
  return tin / static_cast<double>(nin) - tring / static_cast<double>(nring);
}

// Maximum-intensity pixel of one labelled component, ties broken row-major.
inline std::pair<int, int> derive_point(const Tensor& image, const ComponentLabels& labels,
                                        int component_id) {
  if (image.rank() != 2 || image.dim(0) != labels.h || image.dim(1) != labels.w)
    throw ShapeError("derive_point: image/labels size mismatch");
  bool found = false;
  double best = 0.0;
  std::pair<int, int> at{0, 0};
  for (int r = 0; r < labels.h; ++r)
    for (int c = 0; c < labels.w; ++c)
      if (labels.at(r, c) == component_id) {
        double v = image.at(r, c);
        if (!found || v > best) {
          found = true;
          best = v;
          at = {r, c};
        }
      }
  if (!found) throw DomainError("derive_point: empty component");
  return at;
}

inline double bbox_aspect(const BinaryMask& m) {
  int r0 = m.h, r1 = -1, c0 = m.w, c1 = -1;
  for (int r = 0; r < m.h; ++r)
    for (int c = 0; c < m.w; ++c)
      if (m.at(r, c)) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) return 0.0;
  double hh = r1 - r0 + 1, ww = c1 - c0 + 1;
  return std::max(hh, ww) / std::min(hh, ww);
}

namespace detail {

struct TargetRender {
  Tensor profile;   // H x W in [0,1], peak 1
  BinaryMask mask;  // profile >= half maximum
};

inline TargetRender render_blob(int h, int w, double cy, double cx, double su, double sv,
                                double angle) {
  TargetRender t;
  t.profile = Tensor({h, w});
  double ca = std::cos(angle), sa = std::sin(angle);
  int r0 = std::max(0, static_cast<int>(cy - 8)), r1 = std::min(h - 1, static_cast<int>(cy + 8));
  int c0 = std::max(0, static_cast<int>(cx - 8)), c1 = std::min(w - 1, static_cast<int>(cx + 8));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      double dy = r - cy, dx = c - cx;
      double u = ca * dx + sa * dy, v = -sa * dx + ca * dy;
      t.profile.at(r, c) = std::exp(-0.5 * (u * u / (su * su) + v * v / (sv * sv)));
    }
  t.mask = BinaryMask(h, w);
  for (std::size_t i = 0; i < t.mask.v.size(); ++i) t.mask.v[i] = t.profile[i] >= 0.5 ? 1 : 0;
  return t;
}

// Anti-aliased quadratic Bezier stroke: the profile at a pixel is a smooth
// falloff of its distance to the sampled curve.
inline TargetRender render_stroke(int h, int w, double p0y, double p0x, double p1y, double p1x,
                                  double p2y, double p2x, double radius) {
  TargetRender t;
  t.profile = Tensor({h, w});
  const int steps = 160;
  for (int s = 0; s <= steps; ++s) {
    double u = static_cast<double>(s) / steps;
    double a = (1 - u) * (1 - u), b = 2 * u * (1 - u), c = u * u;
    double y = a * p0y + b * p1y + c * p2y;
    double x = a * p0x + b * p1x + c * p2x;
    int r0 = std::max(0, static_cast<int>(y - 3)), r1 = std::min(h - 1, static_cast<int>(y + 3));
    int c0 = std::max(0, static_cast<int>(x - 3)), c1 = std::min(w - 1, static_cast<int>(x + 3));
    for (int r = r0; r <= r1; ++r)
      for (int cc = c0; cc <= c1; ++cc) {
        double d2 = (r - y) * (r - y) + (cc - x) * (cc - x);
        double v = std::exp(-0.5 * d2 / (radius * radius));
        if (v > t.profile.at(r, cc)) t.profile.at(r, cc) = v;
      }
  }
  t.mask = BinaryMask(h, w);
  for (std::size_t i = 0; i < t.mask.v.size(); ++i) t.mask.v[i] = t.profile[i] >= 0.5 ? 1 : 0;
  return t;
}

inline bool single_component(const BinaryMask& m) { return label_components(m).count == 1; }

}  // namespace detail

// Deterministic scene synthesis. Pure function of (tag, size, n_targets, seed).
inline Sample generate_scene(Tag tag, int h, int w, int n_targets, std::uint64_t seed) {
  if (h < 32 || w < 32) throw ConfigError("generate_scene: size must be at least 32x32");
  if (n_targets < 1 || n_targets > 5) throw ConfigError("generate_scene: n_targets must be in [1,5]");

  std::uint64_t master = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(tag) * 0x9e37 +
                                                      static_cast<std::uint64_t>(h) * 131 +
                                                      static_cast<std::uint64_t>(w)));
  bool low_contrast = (tag == Tag::Faint || tag == Tag::Camouflaged);
  bool elongated = (tag == Tag::Filamentary || tag == Tag::Camouflaged);
  // 0.2% of pixels per target, floored at 4 px so the smallest legal image
  // sizes can still carry a visible, shape-constrained target.
  double area_budget = std::max(0.002 * h * w, 4.0);

  for (int attempt = 0; attempt < 64; ++attempt) {
    Rng rng(splitmix64(master + static_cast<std::uint64_t>(attempt)));

    // Background: smooth gradients plus band-limited cosine clutter.
    double b0 = rng.uniform(0.25, 0.40);
    int m = rng.uniform_int(2, 4);
    Tensor bg({h, w}, b0);
    for (int j = 0; j < m; ++j) {
      double amp = rng.uniform(0.02, 0.07);
      double fr = rng.uniform(-2.5, 2.5) / std::max(h, w);
      double fc = rng.uniform(-2.5, 2.5) / std::max(h, w);
      double ph = rng.uniform(0.0, 2.0 * M_PI);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
          bg.at(r, c) += amp * std::cos(2.0 * M_PI * (fr * r + fc * c) + ph);
    }
    Tensor noise({h, w});
    for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = rng.normal(0.0, 0.05);

    // Target positions: margin from the border, pairwise Chebyshev separation.
    int margin = 9;
    std::vector<std::pair<int, int>> centers;
    int sep = std::max(12, std::min(h, w) / 4);
    while (static_cast<int>(centers.size()) < n_targets) {
      bool placed = false;
      for (int t = 0; t < 400 && !placed; ++t) {
        int cy = rng.uniform_int(margin, h - 1 - margin);
        int cx = rng.uniform_int(margin, w - 1 - margin);
        bool ok = true;
        for (auto& [py, px] : centers)
          if (std::max(std::abs(py - cy), std::abs(px - cx)) < sep) ok = false;
        if (ok) {
          centers.emplace_back(cy, cx);
          placed = true;
        }
      }
      if (!placed) {
        if (sep <= 8) break;
        sep -= 2;
      }
    }
    if (static_cast<int>(centers.size()) < n_targets) continue;

    // Render target profiles.
    std::vector<detail::TargetRender> targets;
    bool render_ok = true;
    for (auto& [cy, cx] : centers) {
      detail::TargetRender t;
      bool ok = false;
      for (int rt = 0; rt < 40 && !ok; ++rt) {
        if (elongated) {
          double len_hi = std::min(9.0, std::max(4.2, area_budget + 1.0));
          double len = rng.uniform(0.62 * len_hi, len_hi);
          double rad = area_budget < 6.0 ? rng.uniform(0.42, 0.52) : rng.uniform(0.55, 0.7);
          bool horiz = rng.uniform_int(0, 1) == 1;
          double ang = rng.uniform(-0.18, 0.18);
          double dy = horiz ? std::sin(ang) : std::cos(ang);
          double dx = horiz ? std::cos(ang) : std::sin(ang);
          double y0 = cy - dy * len / 2, x0 = cx - dx * len / 2;
          double y2 = cy + dy * len / 2, x2 = cx + dx * len / 2;
          double bow = rng.uniform(-0.9, 0.9);
          double my = (y0 + y2) / 2 - dx * bow, mx = (x0 + x2) / 2 + dy * bow;
          t = detail::render_stroke(h, w, y0, x0, my, mx, y2, x2, rad);
        } else {
          double su = area_budget < 6.0 ? rng.uniform(0.8, 1.05) : rng.uniform(1.0, 1.5);
          double sv = area_budget < 6.0 ? rng.uniform(0.7, 0.95) : rng.uniform(0.8, 1.2);
          double ang = rng.uniform(0.0, M_PI);
          t = detail::render_blob(h, w, cy + rng.uniform(-0.4, 0.4), cx + rng.uniform(-0.4, 0.4),
                                  su, sv, ang);
        }
        std::size_t area = t.mask.count();
        ok = area >= 3 && static_cast<double>(area) <= area_budget && detail::single_component(t.mask);
        if (ok && elongated) ok = bbox_aspect(t.mask) >= 3.0;
        if (ok && !elongated) ok = bbox_aspect(t.mask) <= 2.0;
      }
      if (!ok) {
        render_ok = false;
        break;
      }
      targets.push_back(std::move(t));
    }
    if (!render_ok) continue;

    // Union mask must keep one component per target.
    BinaryMask gt(h, w);
    for (auto& t : targets) mask_union_into(gt, t.mask);
    ComponentLabels labels = label_components(gt);
    if (labels.count != n_targets) continue;

    // Calibrate per-target amplitude so the measured local contrast of the
    // composed, noisy, clamped image lands in the tag's band.
    double target_c = low_contrast ? rng.uniform(0.085, 0.125) : rng.uniform(0.47, 0.58);
    std::vector<double> amps(targets.size(), target_c);
    Tensor img({h, w});
    auto compose = [&]() {
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          double base = bg.at(r, c);
          double add = 0.0;
          for (std::size_t k = 0; k < targets.size(); ++k) {
            double p = targets[k].profile.at(r, c);
            if (p > 0.01 && base > 0.42) base = 0.42 + (base - 0.42) * (1.0 - std::min(1.0, p * 3.0));
            add += amps[k] * p;
          }
          double v = base + add + noise.at(r, c);
          img.at(r, c) = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        }
    };
    bool calibrated = true;
    for (int it = 0; it < 8; ++it) {
      compose();
      bool done = true;
      for (std::size_t k = 0; k < targets.size(); ++k) {
        double c = contrast(img, targets[k].mask);
        double err = target_c - c;
        if (std::abs(err) > 0.01) done = false;
        amps[k] += err * 1.1;
        if (amps[k] < 0.02) amps[k] = 0.02;
      }
      if (done) break;
      if (it == 7) calibrated = false;
    }
    compose();
    bool band_ok = true;
    for (auto& t : targets) {
      double c = contrast(img, t.mask);
      if (low_contrast ? (c > 0.15 || c < 0.04) : (c < 0.42 || c > 0.65)) band_ok = false;
    }
    if (!calibrated || !band_ok) continue;

    Sample s;
    s.id = std::string(tag_name(tag)) + "_" + std::to_string(seed);
    s.tag = tag;
    s.image = std::move(img);
    s.gt = std::move(gt);
    for (int id = 1; id <= labels.count; ++id) s.points.push_back(derive_point(s.image, labels, id));
    return s;
  }
  throw NumericError("generate_scene: could not satisfy tag constraints for seed " +
                     std::to_string(seed));
}

// Deterministic split of the training pool; test ids are managed separately
// by the corpus builder.
inline Split make_split(std::vector<std::string> ids, double val_ratio, std::uint64_t seed) {
  if (!(val_ratio > 0.0 && val_ratio < 1.0)) throw ConfigError("make_split: val_ratio must be in (0,1)");
  if (ids.size() < 10) throw DataError("make_split: need at least 10 ids, got " + std::to_string(ids.size()));
  Rng rng = Rng::stream(seed, "split");
  rng.shuffle(ids);
  auto n_val = static_cast<std::size_t>(std::llround(val_ratio * static_cast<double>(ids.size())));
  Split s;
  s.seed = seed;
  s.val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_val), ids.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

// ---------------------------------------------------------------------------
// Dataset directory: images/<id>.png (16-bit), gt/<id>.png, manifest.json.
// ---------------------------------------------------------------------------

struct Dataset {
  std::filesystem::path dir;
  std::vector<Sample> samples;
  Split split;
  std::unordered_map<std::string, std::size_t> index;

  const Sample& by_id(const std::string& id) const {
    auto it = index.find(id);
    if (it == index.end()) throw DataError("unknown sample id: " + id);
    return samples[it->second];
  }

  void rebuild_index() {
    index.clear();
    for (std::size_t i = 0; i < samples.size(); ++i) index[samples[i].id] = i;
  }
};

inline nlohmann::ordered_json manifest_json(const Dataset& ds) {
  nlohmann::ordered_json j;
  j["samples"] = nlohmann::ordered_json::array();
  for (const auto& s : ds.samples) {
    nlohmann::ordered_json e;
    e["id"] = s.id;
    e["tag"] = tag_name(s.tag);
    e["points"] = nlohmann::ordered_json::array();
    for (auto& [r, c] : s.points) e["points"].push_back({r, c});
    j["samples"].push_back(std::move(e));
  }
  j["split"]["seed"] = ds.split.seed;
  j["split"]["train"] = ds.split.train;
  j["split"]["val"] = ds.split.val;
  j["split"]["test"] = ds.split.test;
  return j;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "gt", ec);
  for (const auto& s : ds.samples) {
    pngio::write_gray16((dir / "images" / (s.id + ".png")).string(), s.image);
    pngio::write_mask((dir / "gt" / (s.id + ".png")).string(), s.gt);
  }
  std::ofstream f(dir / "manifest.json", std::ios::binary);
  if (!f) throw IoError("cannot write manifest under " + dir.string());
  f << manifest_json(ds).dump(2) << "\n";
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::path mpath = dir / "manifest.json";
  std::ifstream f(mpath, std::ios::binary);
  if (!f) throw DataError("missing manifest: " + mpath.string());
  nlohmann::ordered_json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw DataError("malformed manifest " + mpath.string() + ": " + e.what());
  }
  Dataset ds;
  ds.dir = dir;
  try {
    for (const auto& e : j.at("samples")) {
      Sample s;
      s.id = e.at("id").get<std::string>();
      s.tag = tag_from_name(e.at("tag").get<std::string>());
      s.image = pngio::read_gray16((dir / "images" / (s.id + ".png")).string());
      s.gt = pngio::read_mask((dir / "gt" / (s.id + ".png")).string());
      if (s.gt.h != s.image.dim(0) || s.gt.w != s.image.dim(1))
        throw DataError("gt/image size mismatch for " + s.id);
      for (const auto& p : e.at("points")) {
        int r = p.at(0).get<int>(), c = p.at(1).get<int>();
        if (r < 0 || r >= s.image.dim(0) || c < 0 || c >= s.image.dim(1))
          throw DataError("point out of bounds in " + s.id);
        s.points.emplace_back(r, c);
      }
      ds.samples.push_back(std::move(s));
    }
    ds.split.seed = j.at("split").at("seed").get<std::uint64_t>();
    ds.split.train = j.at("split").at("train").get<std::vector<std::string>>();
    ds.split.val = j.at("split").at("val").get<std::vector<std::string>>();
    ds.split.test = j.at("split").at("test").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + mpath.string() + " missing fields: " + e.what());
  }
  ds.rebuild_index();
  for (const auto& id : ds.split.train) ds.by_id(id);
  for (const auto& id : ds.split.val) ds.by_id(id);
  for (const auto& id : ds.split.test) ds.by_id(id);
  return ds;
}

// Balanced four-tag corpus with an embedded train/val split and an
// independently generated test set.
struct CorpusSpec {
  int n_train_pool = 40;
  int n_test = 20;
  int h = 64;
  int w = 64;
  double val_ratio = 0.1;
  std::uint64_t seed = 0;
  int max_targets = 3;
};

inline Dataset build_corpus(const CorpusSpec& spec) {
  if (spec.n_train_pool < 10) throw ConfigError("build_corpus: need at least 10 training samples");
  if (spec.n_test < 0) throw ConfigError("build_corpus: negative test count");
  Dataset ds;
  Rng nrng = Rng::stream(spec.seed, "corpus.ntargets");
  auto add = [&](const char* prefix, int count, std::uint64_t salt) {
    std::vector<std::string> ids;
    const auto& tags = all_tags();
    for (int i = 0; i < count; ++i) {
      Tag tag = tags[static_cast<std::size_t>(i) % tags.size()];
      int per_tag_idx = i / static_cast<int>(tags.size());
      int nt = spec.max_targets <= 1 ? 1 : nrng.uniform_int(1, spec.max_targets);
      std::uint64_t scene_seed = splitmix64(spec.seed ^ splitmix64(salt * 1000003ULL + static_cast<std::uint64_t>(i)));
      Sample s = generate_scene(tag, spec.h, spec.w, nt, scene_seed);
      char buf[64];
      std::snprintf(buf, sizeof buf, "%s_%s_%03d", prefix, tag_name(tag), per_tag_idx);
      s.id = buf;
      ids.push_back(s.id);
      ds.samples.push_back(std::move(s));
    }
    return ids;
  };
  std::vector<std::string> pool_ids = add("tr", spec.n_train_pool, 1);
  std::vector<std::string> test_ids = add("te", spec.n_test, 2);
  ds.split = make_split(pool_ids, spec.val_ratio, spec.seed);
  std::sort(test_ids.begin(), test_ids.end());
  ds.split.test = std::move(test_ids);
  ds.rebuild_index();
  return ds;
}

}  // namespace istdkd::synth
