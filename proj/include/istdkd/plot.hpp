#pragma once
// Training-curve rendering: parse the trainer's epoch CSV and rasterize a
// two-panel IoU-vs-epoch figure. Everything is drawn with fixed integer
// geometry so a rerun produces identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/png_io.hpp"

namespace istdkd::plot {

struct CurvePoint {
  int epoch = 0;
  double train_iou = 0.0;
  double test_iou = 0.0;
};

namespace detail {

inline double parse_field(const std::string& s, const std::string& path, int line_no) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw DataError(path + ": line " + std::to_string(line_no) + ": not a number: '" + s + "'");
  }
  if (used != s.size() || !std::isfinite(v))
    throw DataError(path + ": line " + std::to_string(line_no) + ": not a number: '" + s + "'");
  return v;
}

}  // namespace detail

// The column layout written by the trainer. A mismatched header or any
// non-numeric field is a parse error naming the offending line.
inline std::vector<CurvePoint> read_epoch_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("plot: cannot open log " + path);
  std::string line;
  if (!std::getline(f, line))
    throw DataError(path + ": line 1: empty log, expected epoch CSV header");
  if (line == "epoch,train_iou,test_iou,loss_in,loss_out,pm_iou,gn_iters\r")
    line.pop_back();
  if (line != "epoch,train_iou,test_iou,loss_in,loss_out,pm_iou,gn_iters")
    throw DataError(path + ": line 1: unrecognized header '" + line + "'");

  std::vector<CurvePoint> pts;
  int line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7)
      throw DataError(path + ": line " + std::to_string(line_no) + ": expected 7 fields, got " +
                      std::to_string(fields.size()));
    CurvePoint p;
    double ep = detail::parse_field(fields[0], path, line_no);
    if (ep < 1 || ep != std::floor(ep))
      throw DataError(path + ": line " + std::to_string(line_no) + ": bad epoch '" + fields[0] +
                      "'");
    p.epoch = static_cast<int>(ep);
    p.train_iou = detail::parse_field(fields[1], path, line_no);
    p.test_iou = detail::parse_field(fields[2], path, line_no);
    for (int i = 3; i < 7; ++i) detail::parse_field(fields[i], path, line_no);
    pts.push_back(p);
  }
  if (pts.empty()) throw DataError(path + ": no epochs to plot");
  return pts;
}

namespace detail {

struct Canvas {
  int h = 0, w = 0;
  std::vector<std::uint8_t> pix;  // RGB interleaved

  Canvas(int h_, int w_) : h(h_), w(w_), pix(static_cast<std::size_t>(h_) * w_ * 3, 255) {}

  void set(int r, int c, std::uint8_t cr, std::uint8_t cg, std::uint8_t cb) {
    if (r < 0 || r >= h || c < 0 || c >= w) return;
    std::size_t i = (static_cast<std::size_t>(r) * w + c) * 3;
    pix[i] = cr;
    pix[i + 1] = cg;
    pix[i + 2] = cb;
  }

  void hline(int r, int c0, int c1, std::uint8_t cr, std::uint8_t cg, std::uint8_t cb) {
    for (int c = std::min(c0, c1); c <= std::max(c0, c1); ++c) set(r, c, cr, cg, cb);
  }

  void vline(int c, int r0, int r1, std::uint8_t cr, std::uint8_t cg, std::uint8_t cb) {
    for (int r = std::min(r0, r1); r <= std::max(r0, r1); ++r) set(r, c, cr, cg, cb);
  }

  void line(int r0, int c0, int r1, int c1, std::uint8_t cr, std::uint8_t cg, std::uint8_t cb) {
    int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
    int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
    int err = (dc > dr ? dc : -dr) / 2;
    for (;;) {
      set(r0, c0, cr, cg, cb);
      if (r0 == r1 && c0 == c1) break;
      int e = err;
      if (e > -dc) {
        err -= dr;
        c0 += sc;
      }
      if (e < dr) {
        err += dc;
        r0 += sr;
      }
    }
  }

  void marker(int r, int c, std::uint8_t cr, std::uint8_t cg, std::uint8_t cb) {
    for (int dr = -1; dr <= 1; ++dr)
      for (int dc = -1; dc <= 1; ++dc) set(r + dr, c + dc, cr, cg, cb);
  }
};

// 5x7 glyphs, one bit per pixel, row-major from the top. Covers what the
// axis labels need: digits, '.', and the letters of EPOCH/TRAIN/TEST/IOU.
inline const std::uint8_t* glyph5x7(char ch) {
  static const struct {
    char ch;
    std::uint8_t rows[7];
  } table[] = {
      {'0', {0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e}},
      {'1', {0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e}},
      {'2', {0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f}},
      {'3', {0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e}},
      {'4', {0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02}},
      {'5', {0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e}},
      {'6', {0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e}},
      {'7', {0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e}},
      {'9', {0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c}},
      {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c}},
      {'A', {0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
      {'C', {0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e}},
      {'E', {0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f}},
      {'H', {0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11}},
      {'I', {0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e}},
      {'N', {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11}},
      {'O', {0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
      {'P', {0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10}},
      {'R', {0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11}},
      {'S', {0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e}},
      {'T', {0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e}},
  };
  for (const auto& g : table)
    if (g.ch == ch) return g.rows;
  return nullptr;
}

inline void draw_text(Canvas& cv, int r, int c, const std::string& text, int scale,
                      std::uint8_t cr, std::uint8_t cg, std::uint8_t cb) {
  int x = c;
  for (char ch : text) {
    if (ch == ' ') {
      x += 4 * scale;
      continue;
    }
    const std::uint8_t* rows = glyph5x7(ch);
    if (rows) {
      for (int gr = 0; gr < 7; ++gr)
        for (int gc = 0; gc < 5; ++gc)
          if (rows[gr] & (1u << (4 - gc)))
            for (int sr = 0; sr < scale; ++sr)
              for (int sc = 0; sc < scale; ++sc)
                cv.set(r + gr * scale + sr, x + gc * scale + sc, cr, cg, cb);
    }
    x += 6 * scale;
  }
}

inline int text_width(const std::string& text, int scale) {
  int w = 0;
  for (char ch : text) w += (ch == ' ' ? 4 : 6) * scale;
  return w > 0 ? w - scale : 0;
}

struct Panel {
  int left, right, top, bottom;  // plot rectangle in canvas pixels
};

inline void draw_panel(Canvas& cv, const Panel& p, const std::string& title,
                       const std::vector<CurvePoint>& pts, bool use_test, std::uint8_t cr,
                       std::uint8_t cg, std::uint8_t cb) {
  // Frame and horizontal grid at IoU quartiles.
  for (int q = 0; q <= 4; ++q) {
    int r = p.bottom - (p.bottom - p.top) * q / 4;
    cv.hline(r, p.left, p.right, q == 0 ? 0 : 220, q == 0 ? 0 : 220, q == 0 ? 0 : 220);
    char lab[8];
    std::snprintf(lab, sizeof(lab), "%.2f", q / 4.0);
    draw_text(cv, r - 3, p.left - 30, lab, 1, 60, 60, 60);
  }
  cv.vline(p.left, p.top, p.bottom, 0, 0, 0);
  cv.hline(p.bottom, p.left, p.right, 0, 0, 0);

  int emin = pts.front().epoch, emax = pts.front().epoch;
  for (const CurvePoint& pt : pts) {
    emin = std::min(emin, pt.epoch);
    emax = std::max(emax, pt.epoch);
  }
  auto x_of = [&](int epoch) {
    if (emax == emin) return (p.left + p.right) / 2;
    return p.left + static_cast<int>(std::lround(static_cast<double>(p.right - p.left) *
                                                 (epoch - emin) / (emax - emin)));
  };
  auto y_of = [&](double iou) {
    double v = iou < 0.0 ? 0.0 : (iou > 1.0 ? 1.0 : iou);
    return p.bottom - static_cast<int>(std::lround((p.bottom - p.top) * v));
  };

  // Epoch ticks: at most 6, integer positions.
  int step = std::max(1, (emax - emin + 5) / 6);
  for (int e = emin; e <= emax; e += step) {
    int x = x_of(e);
    cv.vline(x, p.bottom, p.bottom + 3, 0, 0, 0);
    std::string lab = std::to_string(e);
    draw_text(cv, p.bottom + 6, x - text_width(lab, 1) / 2, lab, 1, 60, 60, 60);
  }

  for (std::size_t i = 0; i < pts.size(); ++i) {
    int x = x_of(pts[i].epoch);
    int y = y_of(use_test ? pts[i].test_iou : pts[i].train_iou);
    if (i > 0) {
      int px = x_of(pts[i - 1].epoch);
      int py = y_of(use_test ? pts[i - 1].test_iou : pts[i - 1].train_iou);
      cv.line(py, px, y, x, cr, cg, cb);
    }
    cv.marker(y, x, cr, cg, cb);
  }

  draw_text(cv, p.top - 20, (p.left + p.right) / 2 - text_width(title, 1) / 2, title, 1, 0, 0, 0);
  draw_text(cv, p.bottom + 20, (p.left + p.right) / 2 - text_width("EPOCH", 1) / 2, "EPOCH", 1,
            60, 60, 60);
}

}  // namespace detail

inline void render_iou_curves(const std::string& out_png, const std::vector<CurvePoint>& pts) {
  if (pts.empty()) throw DataError("plot: no epochs to plot");
  detail::Canvas cv(400, 980);
  detail::draw_panel(cv, {70, 450, 50, 330}, "TRAIN IOU", pts, false, 54, 98, 160);
  detail::draw_panel(cv, {560, 940, 50, 330}, "TEST IOU", pts, true, 170, 60, 50);
  pngio::write_rgb8(out_png, cv.pix, cv.h, cv.w);
}

inline void plot_curves(const std::string& log_csv, const std::string& out_png) {
  render_iou_curves(out_png, read_epoch_csv(log_csv));
}

}  // namespace istdkd::plot
