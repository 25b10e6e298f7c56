#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd {

// Binary mask stored as bytes in {0,1}, row-major.
struct BinaryMask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;

  BinaryMask() = default;
  BinaryMask(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0) {}

  std::uint8_t& at(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
  std::uint8_t at(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
  bool in_bounds(int r, int c) const { return r >= 0 && r < h && c >= 0 && c < w; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : v) n += b;
    return n;
  }
  bool operator==(const BinaryMask& o) const { return h == o.h && w == o.w && v == o.v; }

  Tensor to_tensor() const {
    Tensor t({h, w});
    for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i] ? 1.0 : 0.0;
    return t;
  }

  static BinaryMask from_tensor_threshold(const Tensor& t, double thresh) {
    if (t.rank() != 2) throw ShapeError("mask from tensor: rank-2 input required");
    BinaryMask m(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = t[i] > thresh ? 1 : 0;
    return m;
  }
};

// 8-connected component labelling. Labels start at 1; 0 is background.
struct ComponentLabels {
  int h = 0;
  int w = 0;
  int count = 0;
  std::vector<std::int32_t> label;

  std::int32_t at(int r, int c) const { return label[static_cast<std::size_t>(r) * w + c]; }
};

inline ComponentLabels label_components(const BinaryMask& m) {
  ComponentLabels out;
  out.h = m.h;
  out.w = m.w;
  out.label.assign(m.v.size(), 0);
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < m.h; ++r) {
    for (int c = 0; c < m.w; ++c) {
      if (!m.at(r, c) || out.label[static_cast<std::size_t>(r) * m.w + c]) continue;
      int id = ++out.count;
      stack.clear();
      stack.emplace_back(r, c);
      out.label[static_cast<std::size_t>(r) * m.w + c] = id;
      while (!stack.empty()) {
        auto [cr, cc] = stack.back();
        stack.pop_back();
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            if (!dr && !dc) continue;
            int nr = cr + dr, nc = cc + dc;
            if (!m.in_bounds(nr, nc)) continue;
            std::size_t i = static_cast<std::size_t>(nr) * m.w + nc;
            if (m.v[i] && !out.label[i]) {
              out.label[i] = id;
              stack.emplace_back(nr, nc);
            }
          }
      }
    }
  }
  return out;
}

// 8-connected flood fill over {map > thresh} starting from (r0,c0).
// Returns an empty mask when the seed itself fails the threshold.
// max_pixels < 0 disables the cap; when the cap is exceeded the fill stops
// early and the result reports truncated=true.
struct FloodResult {
  BinaryMask mask;
  std::size_t pixels = 0;
  bool truncated = false;
};

inline FloodResult flood_fill_above(const Tensor& map, double thresh, int r0, int c0,
                                    std::int64_t max_pixels) {
  if (map.rank() != 2) throw ShapeError("flood_fill_above: rank-2 map required");
  int h = map.dim(0), w = map.dim(1);
  FloodResult res;
  res.mask = BinaryMask(h, w);
  if (r0 < 0 || r0 >= h || c0 < 0 || c0 >= w) throw DataError("flood_fill_above: seed out of bounds");
  if (!(map.at(r0, c0) > thresh)) return res;
  std::vector<std::pair<int, int>> stack;
  stack.emplace_back(r0, c0);
  res.mask.at(r0, c0) = 1;
  res.pixels = 1;
  while (!stack.empty()) {
    if (max_pixels >= 0 && res.pixels > static_cast<std::size_t>(max_pixels)) {
      res.truncated = true;
      return res;
    }
    auto [cr, cc] = stack.back();
    stack.pop_back();
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) {
        if (!dr && !dc) continue;
        int nr = cr + dr, nc = cc + dc;
        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
        if (res.mask.at(nr, nc)) continue;
        if (map.at(nr, nc) > thresh) {
          res.mask.at(nr, nc) = 1;
          ++res.pixels;
          stack.emplace_back(nr, nc);
        }
      }
  }
  return res;
}

// Chebyshev dilation by `radius` iterations of the 8-neighbourhood.
inline BinaryMask dilate(const BinaryMask& m, int radius) {
  BinaryMask cur = m;
  for (int it = 0; it < radius; ++it) {
    BinaryMask next = cur;
    for (int r = 0; r < cur.h; ++r)
      for (int c = 0; c < cur.w; ++c) {
        if (cur.at(r, c)) continue;
        bool hit = false;
        for (int dr = -1; dr <= 1 && !hit; ++dr)
          for (int dc = -1; dc <= 1 && !hit; ++dc) {
            int nr = r + dr, nc = c + dc;
            if (cur.in_bounds(nr, nc) && cur.at(nr, nc)) hit = true;
          }
        if (hit) next.at(r, c) = 1;
      }
    cur = std::move(next);
  }
  return cur;
}

inline void mask_union_into(BinaryMask& dst, const BinaryMask& src) {
  if (dst.h != src.h || dst.w != src.w) throw ShapeError("mask union: size mismatch");
  for (std::size_t i = 0; i < dst.v.size(); ++i) dst.v[i] = dst.v[i] | src.v[i];
}

// Centroid of the pixels carrying a given component label.
inline std::pair<double, double> component_centroid(const ComponentLabels& labels, int id) {
  double sr = 0.0, sc = 0.0;
  std::size_t n = 0;
  for (int r = 0; r < labels.h; ++r)
    for (int c = 0; c < labels.w; ++c)
      if (labels.at(r, c) == id) {
        sr += r;
        sc += c;
        ++n;
      }
  if (n == 0) throw DomainError("component_centroid: empty component");
  return {sr / static_cast<double>(n), sc / static_cast<double>(n)};
}

}  // namespace istdkd
