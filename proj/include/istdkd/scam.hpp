#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::scam {

using ad::Value;

// Per-layer channel modulation head: a two-layer MLP maps the global semantic
// vector to (gamma_raw, beta); gamma is gated and applied in residual form so
// a zeroed generator is an exact identity.
struct ScamLayer {
  int layer_index = 0;
  int channels = 0;
  Value w1;    // d x hidden
  Value b1;    // hidden
  Value w2;    // hidden x 2C, zero-init
  Value b2;    // 2C, zero-init
  Value gate;  // C

  std::vector<Value> params() const { return {w1, b1, w2, b2, gate}; }
};

inline ScamLayer make_scam_layer(int layer_index, int channels, int d, int hidden, Rng& rng,
                                 double gate_init = 0.1) {
  if (channels < 1 || d < 1 || hidden < 1) throw ConfigError("scam layer: bad dimensions");
  ScamLayer l;
  l.layer_index = layer_index;
  l.channels = channels;
  Tensor w1({d, hidden});
  double s = std::sqrt(2.0 / d);
  for (std::size_t i = 0; i < w1.size(); ++i) w1[i] = rng.normal(0.0, s);
  l.w1 = Value::param(std::move(w1));
  l.b1 = Value::param(Tensor({hidden}, 0.0));
  l.w2 = Value::param(Tensor({hidden, 2 * channels}, 0.0));
  l.b2 = Value::param(Tensor({2 * channels}, 0.0));
  l.gate = Value::param(Tensor({channels}, gate_init));
  return l;
}

// g: (N,d) batch of semantic vectors -> gamma, beta: (N,C) each, with
// gamma = 1 + tanh(gamma_raw * u) confined to (0,2).
inline std::pair<Value, Value> affine_params(const Value& g, const ScamLayer& layer) {
  if (g.val().rank() != 2) throw ShapeError("affine_params: g must be (N,d)");
  if (!g.val().all_finite()) throw NumericError("affine_params: non-finite input");
  Value h = ad::relu(ad::add_rowvec(ad::matmul(g, layer.w1), layer.b1));
  Value out = ad::add_rowvec(ad::matmul(h, layer.w2), layer.b2);
  int c = layer.channels;
  Value gamma_raw = ad::slice_cols(out, 0, c);
  Value beta = ad::slice_cols(out, c, 2 * c);
  Value gamma = ad::add_scalar(ad::vtanh(ad::row_mul_vec(gamma_raw, layer.gate)), 1.0);
  return {gamma, beta};
}

// f: (N,C,H,W); gamma, beta: (N,C). Residual form keeps the identity exact
// when the generator output is zero.
inline Value modulate(const Value& f, const Value& gamma, const Value& beta) {
  Value delta = ad::shift_channels(ad::scale_channels(f, ad::add_scalar(gamma, -1.0)), beta);
  return ad::add(f, delta);
}

inline Value modulate_with(const Value& f, const Value& g, const ScamLayer& layer) {
  auto [gamma, beta] = affine_params(g, layer);
  return modulate(f, gamma, beta);
}

inline Value gate_sparsity(const std::vector<ScamLayer>& layers) {
  if (layers.empty()) throw ConfigError("gate_sparsity: need at least one layer");
  Value r = ad::l1norm(layers[0].gate);
  for (std::size_t i = 1; i < layers.size(); ++i) r = ad::add(r, ad::l1norm(layers[i].gate));
  return r;
}

}  // namespace istdkd::scam
