#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/mask.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::pseudo {

inline constexpr int kEvolveWindow = 33;     // centered on each point
inline constexpr double kBlend = 0.5;        // t = blend*max + (1-blend)*mean
inline constexpr double kComponentCap = 0.01;  // of image pixels

// Radius-1 disk: the point plus its 4-neighbourhood, clipped to bounds.
inline BinaryMask point_disk(int h, int w, int r, int c) {
  if (r < 0 || r >= h || c < 0 || c >= w) throw DataError("point disk: point out of bounds");
  BinaryMask m(h, w);
  m.at(r, c) = 1;
  if (r > 0) m.at(r - 1, c) = 1;
  if (r + 1 < h) m.at(r + 1, c) = 1;
  if (c > 0) m.at(r, c - 1) = 1;
  if (c + 1 < w) m.at(r, c + 1) = 1;
  return m;
}

struct PseudoEntry {
  BinaryMask mask;                           // union of components and disks
  std::vector<std::pair<int, int>> points;
  std::vector<BinaryMask> components;        // last accepted component per point
  long updated_epoch = 0;

  void rebuild_union() {
    mask = BinaryMask(mask.h, mask.w);
    for (const BinaryMask& c : components) mask_union_into(mask, c);
    for (auto [r, cc] : points) mask_union_into(mask, point_disk(mask.h, mask.w, r, cc));
  }
};

class PseudoMaskStore {
 public:
  void init(const std::string& id, const std::vector<std::pair<int, int>>& points, int h, int w) {
    PseudoEntry e;
    e.mask = BinaryMask(h, w);
    e.points = points;
    for (auto [r, c] : points) e.components.push_back(point_disk(h, w, r, c));
    e.rebuild_union();
    map_[id] = std::move(e);
  }

  bool has(const std::string& id) const { return map_.count(id) != 0; }

  const PseudoEntry& entry(const std::string& id) const {
    auto it = map_.find(id);
    if (it == map_.end()) throw StateError("no pseudo-mask for sample " + id);
    return it->second;
  }

  const BinaryMask& mask(const std::string& id) const { return entry(id).mask; }

  Tensor mask_tensor(const std::string& id) const { return mask(id).to_tensor(); }

  // One evolution pass for one sample. For each point: adaptive threshold
  // over a window around it, flood the component containing the point over
  // the whole thresholded image, accept it unless empty or above the size
  // cap, otherwise keep that point's previous component.
  void evolve(const std::string& id, const Tensor& p_t, long epoch) {
    auto it = map_.find(id);
    if (it == map_.end()) throw StateError("no pseudo-mask for sample " + id);
    PseudoEntry& e = it->second;
    if (p_t.rank() != 2 || p_t.dim(0) != e.mask.h || p_t.dim(1) != e.mask.w)
      throw ShapeError("evolve: probability map shape mismatch for " + id);
    if (!p_t.all_finite()) throw NumericError("evolve: non-finite probabilities for " + id);
    int h = e.mask.h, w = e.mask.w;
    auto cap = static_cast<std::int64_t>(std::floor(kComponentCap * h * w));
    for (std::size_t pi = 0; pi < e.points.size(); ++pi) {
      auto [pr, pc] = e.points[pi];
      int half = kEvolveWindow / 2;
      int r0 = std::max(0, pr - half), r1 = std::min(h - 1, pr + half);
      int c0 = std::max(0, pc - half), c1 = std::min(w - 1, pc + half);
      double mx = -1.0, sum = 0.0;
      long n = 0;
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c) {
          double v = p_t.at(r, c);
          mx = std::max(mx, v);
          sum += v;
          ++n;
        }
      double t = kBlend * mx + (1.0 - kBlend) * (sum / n);
      FloodResult fr = flood_fill_above(p_t, t, pr, pc, cap);
      if (fr.pixels > 0 && !fr.truncated) e.components[pi] = std::move(fr.mask);
    }
    e.rebuild_union();
    e.updated_epoch = epoch;
  }

  std::vector<std::string> ids() const {
    std::vector<std::string> out;
    out.reserve(map_.size());
    for (const auto& [id, e] : map_) out.push_back(id);
    return out;
  }

  // Reinstate a previously evolved entry (checkpoint resume). Points are
  // validated as in init; components replace the fresh disks.
  void restore(const std::string& id, int h, int w,
               const std::vector<std::pair<int, int>>& points,
               std::vector<BinaryMask> components, long epoch) {
    if (components.size() != points.size())
      throw ShapeError("pseudo restore: component/point count mismatch for " + id);
    for (const BinaryMask& c : components)
      if (c.h != h || c.w != w) throw ShapeError("pseudo restore: component shape for " + id);
    init(id, points, h, w);
    PseudoEntry& e = map_[id];
    e.components = std::move(components);
    e.updated_epoch = epoch;
    e.rebuild_union();
  }

 private:
  std::unordered_map<std::string, PseudoEntry> map_;
};

}  // namespace istdkd::pseudo
