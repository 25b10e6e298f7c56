#pragma once
// ISTD evaluation: pixel IoU, per-image mean IoU (nIoU), detection
// probability / false-alarm rate with centroid matching, and the
// characteristic per-tag report.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/mask.hpp"
#include "istdkd/synthdata.hpp"
#include "istdkd/vfm.hpp"

namespace istdkd::metrics {

struct PixelCounts {
  long long inter = 0;
  long long uni = 0;
};

inline PixelCounts iou_counts(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("iou: mask shapes differ");
  PixelCounts c;
  for (std::size_t i = 0; i < pred.v.size(); ++i) {
    bool p = pred.v[i] != 0, g = gt.v[i] != 0;
    c.inter += (p && g) ? 1 : 0;
    c.uni += (p || g) ? 1 : 0;
  }
  return c;
}

// Both-empty pairs count as perfect so per-image means stay total.
inline double iou(const BinaryMask& pred, const BinaryMask& gt) {
  PixelCounts c = iou_counts(pred, gt);
  return c.uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.uni);
}

inline double niou(const std::vector<BinaryMask>& preds, const std::vector<BinaryMask>& gts) {
  if (preds.size() != gts.size()) throw ShapeError("niou: list lengths differ");
  if (preds.empty()) throw DomainError("niou: empty list");
  double s = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) s += iou(preds[i], gts[i]);
  return s / static_cast<double>(preds.size());
}

struct DetectionCounts {
  long long targets = 0;
  long long detected = 0;
  long long false_pixels = 0;  // pixels of unmatched predicted components
  long long total_pixels = 0;

  double pd() const {
    return targets == 0 ? 1.0 : static_cast<double>(detected) / static_cast<double>(targets);
  }
  double fa() const {
    return total_pixels == 0 ? 0.0
                             : static_cast<double>(false_pixels) / static_cast<double>(total_pixels);
  }
  void add(const DetectionCounts& o) {
    targets += o.targets;
    detected += o.detected;
    false_pixels += o.false_pixels;
    total_pixels += o.total_pixels;
  }
};

// Greedy nearest centroid matching: candidate (target, prediction) pairs
// within dist_thresh are taken in ascending distance order, each side used
// at most once. Processing shorter pairs first makes P_d monotone in the
// threshold.
inline DetectionCounts match_components(const BinaryMask& pred, const BinaryMask& gt,
                                        double dist_thresh) {
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("pd_fa: mask shapes differ");
  DetectionCounts out;
  out.total_pixels = static_cast<long long>(pred.h) * pred.w;

  ComponentLabels lp = label_components(pred);
  ComponentLabels lg = label_components(gt);
  out.targets = lg.count;

  std::vector<std::pair<double, double>> pc(lp.count), gc(lg.count);
  std::vector<long long> psize(lp.count, 0);
  for (int id = 1; id <= lp.count; ++id) pc[id - 1] = component_centroid(lp, id);
  for (int id = 1; id <= lg.count; ++id) gc[id - 1] = component_centroid(lg, id);
  for (int r = 0; r < pred.h; ++r)
    for (int c = 0; c < pred.w; ++c)
      if (lp.at(r, c) > 0) ++psize[lp.at(r, c) - 1];

  std::vector<std::tuple<double, int, int>> cand;  // (distance, target, prediction)
  for (int g = 0; g < lg.count; ++g)
    for (int p = 0; p < lp.count; ++p) {
      double dr = gc[g].first - pc[p].first, dc = gc[g].second - pc[p].second;
      double d = std::sqrt(dr * dr + dc * dc);
      if (d <= dist_thresh) cand.emplace_back(d, g, p);
    }
  std::sort(cand.begin(), cand.end());
  std::vector<bool> gdone(lg.count, false), pdone(lp.count, false);
  for (const auto& [d, g, p] : cand) {
    if (gdone[g] || pdone[p]) continue;
    gdone[g] = true;
    pdone[p] = true;
    ++out.detected;
  }
  for (int p = 0; p < lp.count; ++p)
    if (!pdone[p]) out.false_pixels += psize[p];
  return out;
}

inline DetectionCounts pd_fa_counts(const std::vector<BinaryMask>& preds,
                                    const std::vector<BinaryMask>& gts,
                                    double dist_thresh = 3.0) {
  if (preds.size() != gts.size()) throw ShapeError("pd_fa: list lengths differ");
  DetectionCounts out;
  for (std::size_t i = 0; i < preds.size(); ++i) out.add(match_components(preds[i], gts[i], dist_thresh));
  return out;
}

inline std::pair<double, double> pd_fa(const std::vector<BinaryMask>& preds,
                                       const std::vector<BinaryMask>& gts,
                                       double dist_thresh = 3.0) {
  DetectionCounts c = pd_fa_counts(preds, gts, dist_thresh);
  return {c.pd(), c.fa()};
}

// --- characteristic report ------------------------------------------------

struct SampleEval {
  std::string tag;
  BinaryMask pred;
  BinaryMask gt;
};

struct MetricRow {
  std::string split;
  std::string tag;     // display name: Overall / Salient / ...
  double iou_pct = 0;  // pooled pixel counts
  double niou_pct = 0; // mean of per-image IoU
  double pd_pct = 0;
  double fa_1e6 = 0;   // false-alarm rate in 1e-6 units
  int n = 0;
};

inline std::string display_tag(const std::string& tag) {
  std::string s = tag;
  if (!s.empty()) s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
  return s;
}

namespace detail {

inline MetricRow pooled_row(const std::string& split, const std::string& display,
                            const std::vector<const SampleEval*>& samples, double dist_thresh) {
  MetricRow row;
  row.split = split;
  row.tag = display;
  row.n = static_cast<int>(samples.size());
  PixelCounts px;
  DetectionCounts det;
  double iousum = 0.0;
  for (const SampleEval* s : samples) {
    PixelCounts c = iou_counts(s->pred, s->gt);
    px.inter += c.inter;
    px.uni += c.uni;
    iousum += c.uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(c.uni);
    det.add(match_components(s->pred, s->gt, dist_thresh));
  }
  row.iou_pct = 100.0 * (px.uni == 0 ? 1.0 : static_cast<double>(px.inter) / static_cast<double>(px.uni));
  row.niou_pct = 100.0 * iousum / static_cast<double>(samples.size());
  row.pd_pct = 100.0 * det.pd();
  row.fa_1e6 = 1e6 * det.fa();
  return row;
}

}  // namespace detail

// Overall first, then the tags present, in canonical tag order. Subsets with
// no samples are omitted; a tag outside the canonical set is a data error.
inline std::vector<MetricRow> characteristic_report(const std::string& split,
                                                    const std::vector<SampleEval>& samples,
                                                    double dist_thresh = 3.0) {
  if (samples.empty()) throw DomainError("characteristic_report: no samples");
  std::vector<const SampleEval*> all;
  for (const SampleEval& s : samples) {
    synth::tag_from_name(s.tag);  // validates
    all.push_back(&s);
  }
  std::vector<MetricRow> rows;
  rows.push_back(detail::pooled_row(split, "Overall", all, dist_thresh));
  for (synth::Tag t : synth::all_tags()) {
    std::vector<const SampleEval*> subset;
    for (const SampleEval& s : samples)
      if (s.tag == synth::tag_name(t)) subset.push_back(&s);
    if (!subset.empty())
      rows.push_back(detail::pooled_row(split, display_tag(synth::tag_name(t)), subset, dist_thresh));
  }
  return rows;
}

inline void write_report_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path);
  f << "split,tag,IoU,nIoU,Pd,Fa,n\n";
  char buf[160];
  for (const MetricRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%.4f", r.iou_pct, r.niou_pct, r.pd_pct,
                  r.fa_1e6);
    f << r.split << ',' << r.tag << ',' << buf << ',' << r.n << '\n';
  }
  if (!f.good()) throw IoError("failed writing " + path);
}

// --- attention aggregation -------------------------------------------------

struct AttnRow {
  std::string tag;
  int n = 0;
  double hnorm_mean = 0, hnorm_std = 0;  // percent
  double effn_mean = 0, effn_std = 0;
  double pmax_mean = 0, pmax_std = 0;
};

namespace detail {

inline AttnRow attn_row(const std::string& display, const std::vector<const vfm::AttnStats*>& xs) {
  AttnRow row;
  row.tag = display;
  row.n = static_cast<int>(xs.size());
  auto agg = [&](auto pick, double scale, double* mean, double* stddev) {
    double m = 0;
    for (const vfm::AttnStats* s : xs) m += pick(*s);
    m /= static_cast<double>(xs.size());
    double v = 0;
    for (const vfm::AttnStats* s : xs) v += (pick(*s) - m) * (pick(*s) - m);
    v /= static_cast<double>(xs.size());
    *mean = scale * m;
    *stddev = scale * std::sqrt(v);
  };
  agg([](const vfm::AttnStats& s) { return s.h_norm; }, 100.0, &row.hnorm_mean, &row.hnorm_std);
  agg([](const vfm::AttnStats& s) { return s.eff_n; }, 1.0, &row.effn_mean, &row.effn_std);
  agg([](const vfm::AttnStats& s) { return s.p_max; }, 1.0, &row.pmax_mean, &row.pmax_std);
  return row;
}

}  // namespace detail

inline std::vector<AttnRow> attention_report(
    const std::vector<std::pair<std::string, vfm::AttnStats>>& per_sample) {
  std::vector<AttnRow> rows;
  if (per_sample.empty()) return rows;
  std::vector<const vfm::AttnStats*> all;
  for (const auto& [tag, st] : per_sample) {
    synth::tag_from_name(tag);
    all.push_back(&st);
  }
  rows.push_back(detail::attn_row("Overall", all));
  for (synth::Tag t : synth::all_tags()) {
    std::vector<const vfm::AttnStats*> subset;
    for (const auto& [tag, st] : per_sample)
      if (tag == synth::tag_name(t)) subset.push_back(&st);
    if (!subset.empty()) rows.push_back(detail::attn_row(display_tag(synth::tag_name(t)), subset));
  }
  return rows;
}

inline void write_attn_csv(const std::string& path, const std::vector<AttnRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open " + path);
  f << "tag,n,Hnorm_mean,Hnorm_std,EffN_mean,EffN_std,pmax_mean,pmax_std\n";
  char buf[200];
  for (const AttnRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.4f,%.4f,%.4f,%.4f,%.6f,%.6f", r.hnorm_mean, r.hnorm_std,
                  r.effn_mean, r.effn_std, r.pmax_mean, r.pmax_std);
    f << r.tag << ',' << r.n << ',' << buf << '\n';
  }
  if (!f.good()) throw IoError("failed writing " + path);
}

}  // namespace istdkd::metrics
