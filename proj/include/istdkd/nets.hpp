#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/scam.hpp"
#include "istdkd/tensor.hpp"
#include "istdkd/vfm.hpp"

namespace istdkd::nets {

using ad::Value;

struct ConvParams {
  Value w;  // (Co,Ci,kh,kw)
  Value b;  // (Co)
};

inline ConvParams make_conv(int co, int ci, int k, Rng& rng) {
  Tensor w({co, ci, k, k});
  double s = std::sqrt(2.0 / (ci * k * k));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, s);
  return {Value::param(std::move(w)), Value::param(Tensor({co}, 0.0))};
}

// Small encoder-decoder detector, ~21.5k parameters. Three encoder stages
// (8,16,32 channels) expose relu taps for modulation; the decoder mirrors
// them with additive skips and a 1x1 logit head at input resolution.
struct StudentNet {
  ConvParams e1, e2, e3a, e3b, d2, d1, refine, head;
  static constexpr int kHookChannels[3] = {8, 16, 32};

  static StudentNet init(Rng& rng) {
    StudentNet n;
    n.e1 = make_conv(8, 1, 3, rng);
    n.e2 = make_conv(16, 8, 3, rng);
    n.e3a = make_conv(32, 16, 3, rng);
    n.e3b = make_conv(32, 32, 3, rng);
    n.d2 = make_conv(16, 32, 3, rng);
    n.d1 = make_conv(8, 16, 3, rng);
    n.refine = make_conv(8, 8, 3, rng);
    n.head = make_conv(1, 8, 1, rng);
    return n;
  }

  std::vector<std::pair<std::string, Value>> named_params() const {
    return {{"e1.w", e1.w},         {"e1.b", e1.b},         {"e2.w", e2.w},
            {"e2.b", e2.b},         {"e3a.w", e3a.w},       {"e3a.b", e3a.b},
            {"e3b.w", e3b.w},       {"e3b.b", e3b.b},       {"d2.w", d2.w},
            {"d2.b", d2.b},         {"d1.w", d1.w},         {"d1.b", d1.b},
            {"refine.w", refine.w}, {"refine.b", refine.b}, {"head.w", head.w},
            {"head.b", head.b}};
  }

  std::vector<Value> params() const {
    std::vector<Value> out;
    for (auto& [name, v] : named_params()) out.push_back(v);
    return out;
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& p : params()) n += p.val().size();
    return n;
  }
};

struct ForwardOut {
  Value logits;              // (N,1,H,W)
  std::vector<Value> hooks;  // encoder taps, possibly modulated
};

namespace detail {

inline void stage_check(const Value& v, const char* stage) {
  if (!v.val().all_finite())
    throw NumericError(std::string("forward: non-finite activations at stage ") + stage);
}

// Shared trunk; `mod` rewrites each encoder tap before the graph continues
// (identity for the student).
template <typename Mod>
ForwardOut run_trunk(const StudentNet& net, const Value& x, Mod&& mod) {
  if (x.val().rank() != 4 || x.val().dim(1) != 1)
    throw ShapeError("forward: input must be (N,1,H,W)");
  if (x.val().dim(2) % 4 || x.val().dim(3) % 4)
    throw ShapeError("forward: spatial dims must be divisible by 4");
  if (!x.val().all_finite()) throw NumericError("forward: non-finite input image");
  ForwardOut out;
  Value a1 = mod(ad::relu(ad::conv2d_same(x, net.e1.w, net.e1.b)), 0);
  detail::stage_check(a1, "e1");
  Value a2 = mod(ad::relu(ad::conv2d_same(ad::maxpool2(a1), net.e2.w, net.e2.b)), 1);
  detail::stage_check(a2, "e2");
  Value a3 = ad::relu(ad::conv2d_same(ad::maxpool2(a2), net.e3a.w, net.e3a.b));
  a3 = mod(ad::relu(ad::conv2d_same(a3, net.e3b.w, net.e3b.b)), 2);
  detail::stage_check(a3, "e3");
  Value u2 = ad::add(ad::upsample2(ad::relu(ad::conv2d_same(a3, net.d2.w, net.d2.b))), a2);
  detail::stage_check(u2, "d2");
  Value u1 = ad::add(ad::upsample2(ad::relu(ad::conv2d_same(u2, net.d1.w, net.d1.b))), a1);
  detail::stage_check(u1, "d1");
  Value r = ad::relu(ad::conv2d_same(u1, net.refine.w, net.refine.b));
  out.logits = ad::conv2d_same(r, net.head.w, net.head.b);
  detail::stage_check(out.logits, "head");
  out.hooks = {a1, a2, a3};
  return out;
}

}  // namespace detail

inline ForwardOut student_forward(const StudentNet& net, const Value& x) {
  return detail::run_trunk(net, x, [](const Value& f, int) { return f; });
}

// Inference helper: (H,W) image in [0,1] -> (H,W) probability map, no graph.
inline Tensor student_predict(const StudentNet& net, const Tensor& image) {
  ad::NoGradGuard ng;
  if (image.rank() != 2) throw ShapeError("student_predict: rank-2 image required");
  Tensor x({1, 1, image.dim(0), image.dim(1)});
  std::copy(image.data(), image.data() + image.size(), x.data());
  ForwardOut out = student_forward(net, Value::constant(std::move(x)));
  Value p = ad::sigmoid(out.logits);
  Tensor prob({image.dim(0), image.dim(1)});
  std::copy(p.val().data(), p.val().data() + prob.size(), prob.data());
  return prob;
}

// Teacher wrapper: shares theta by reference, owns phi = SCAM layers plus
// the token-attention head and depth-fusion logits.
struct TeacherNet {
  const StudentNet* student = nullptr;
  std::vector<scam::ScamLayer> layers;
  Value tap_w;        // (d_vfm)
  Value fuse_logits;  // (K)
  int d_vfm = 0;

  std::vector<std::pair<std::string, Value>> named_phi() const {
    std::vector<std::pair<std::string, Value>> out;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      std::string p = "scam" + std::to_string(i) + ".";
      out.emplace_back(p + "w1", layers[i].w1);
      out.emplace_back(p + "b1", layers[i].b1);
      out.emplace_back(p + "w2", layers[i].w2);
      out.emplace_back(p + "b2", layers[i].b2);
      out.emplace_back(p + "gate", layers[i].gate);
    }
    out.emplace_back("tap.w", tap_w);
    out.emplace_back("fuse.logits", fuse_logits);
    return out;
  }

  std::vector<Value> phi_params() const {
    std::vector<Value> out;
    for (auto& [name, v] : named_phi()) out.push_back(v);
    return out;
  }
};

inline TeacherNet make_teacher(const StudentNet& student, int d_vfm, int k_blocks, int hidden,
                               Rng& rng, double gate_init = 0.1) {
  TeacherNet t;
  t.student = &student;
  t.d_vfm = d_vfm;
  for (int i = 0; i < 3; ++i)
    t.layers.push_back(
        scam::make_scam_layer(i, StudentNet::kHookChannels[i], d_vfm, hidden, rng, gate_init));
  // Zero-init scoring head starts TAP at uniform attention (plain GAP) and
  // fusion at uniform depth weights.
  t.tap_w = Value::param(Tensor({d_vfm}, 0.0));
  t.fuse_logits = Value::param(Tensor({k_blocks}, 0.0));
  return t;
}

struct TeacherOut {
  Value logits;
  std::vector<Value> hooks;
  Value g;                  // (N,d) pooled semantic vectors
  std::vector<Value> attn;  // per-image token attention
};

// stacked[i]: K x (N_tok*d) token matrix for batch image i (kept constant in
// the graph); phi enters through fusion logits, the TAP head, and SCAM.
inline TeacherOut teacher_forward(const TeacherNet& t, const Value& x,
                                  const std::vector<const Tensor*>& stacked, int n_tok) {
  if (!t.student) throw StateError("teacher_forward: teacher has no student");
  int n = x.val().dim(0);
  if (static_cast<int>(stacked.size()) != n)
    throw ShapeError("teacher_forward: one token matrix per batch image required");
  TeacherOut out;
  Value pi_row = ad::reshape(ad::softmax_vec(t.fuse_logits), {1, t.fuse_logits.val().dim(0)});
  Value w_col = ad::reshape(t.tap_w, {t.d_vfm, 1});
  std::vector<Value> g_rows;
  g_rows.reserve(stacked.size());
  for (const Tensor* s : stacked) {
    if (s->dim(1) != n_tok * t.d_vfm) throw ShapeError("teacher_forward: token dim mismatch");
    Value tok = Value::constant(*s);
    Value fused = ad::reshape(ad::matmul(pi_row, tok), {n_tok, t.d_vfm});
    Value scores = ad::reshape(ad::matmul(fused, w_col), {n_tok});
    Value a = ad::softmax_vec(scores);
    out.attn.push_back(a);
    g_rows.push_back(ad::matmul(ad::reshape(a, {1, n_tok}), fused));
  }
  out.g = g_rows.size() == 1 ? g_rows[0] : ad::concat_rows(g_rows);
  ad::check_finite(out.g, "teacher_forward pooled vector");

  ForwardOut fo = detail::run_trunk(*t.student, x, [&](const Value& f, int hook) {
    return scam::modulate_with(f, out.g, t.layers[static_cast<std::size_t>(hook)]);
  });
  out.logits = fo.logits;
  out.hooks = fo.hooks;
  return out;
}

}  // namespace istdkd::nets
