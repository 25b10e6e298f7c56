#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/scam.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::losses {

using ad::Value;

struct LossWeights {
  double lambda_in = 0.1;
  double lambda_out = 1.0;
  double lambda_gate = 5e-3;
  double tau = 4.0;

  void validate() const {
    if (lambda_in < 0 || lambda_out < 0 || lambda_gate < 0)
      throw ConfigError("loss weights must be non-negative");
    if (tau <= 0) throw ConfigError("kd temperature must be positive");
  }
};

// Mean BCE over all pixels; p holds probabilities (rank 2 or (N,1,H,W)),
// clamped inside bce_per_sample.
inline Value task_loss(const Value& p, const Value& y) {
  if (p.val().shape() != y.val().shape()) throw ShapeError("task_loss: shape mismatch");
  Value p4 = p, y4 = y;
  if (p.val().rank() == 2) {
    p4 = ad::reshape(p, {1, 1, p.val().dim(0), p.val().dim(1)});
    y4 = ad::reshape(y, {1, 1, y.val().dim(0), y.val().dim(1)});
  }
  return ad::mean_all(ad::bce_per_sample(p4, y4));
}

// Mean over elements of (sigmoid(za/tau) - sigmoid(zb/tau))^2; bounded by 1.
inline Value kd_loss(const Value& za, const Value& zb, double tau) {
  if (za.val().shape() != zb.val().shape()) throw ShapeError("kd_loss: shape mismatch");
  if (tau <= 0) throw ConfigError("kd temperature must be positive");
  Value d = ad::sub(ad::sigmoid(ad::mul_scalar(za, 1.0 / tau)),
                    ad::sigmoid(ad::mul_scalar(zb, 1.0 / tau)));
  return ad::mean_all(ad::mul(d, d));
}

namespace detail {

inline void check_batch(const Value& z_a, const Value& z_b, const Value& y, const Value& w,
                        const char* what) {
  if (!w.defined()) throw StateError(std::string(what) + ": missing sample weights");
  if (z_a.val().rank() != 4 || z_a.val().dim(1) != 1)
    throw ShapeError(std::string(what) + ": logits must be (N,1,H,W)");
  require_same_shape(z_b.val(), z_a.val(), what);
  require_same_shape(y.val(), z_a.val(), what);
  if (w.val().rank() != 1 || w.val().dim(0) != z_a.val().dim(0))
    throw ShapeError(std::string(what) + ": one weight per batch sample required");
}

}  // namespace detail

struct InnerParts {
  Value total;  // backward target
  Value task;   // unweighted mean teacher BCE, for logging
  Value kd;     // unweighted mean inner KD
  Value gate;   // R_gate
};

// Teacher-side objective: w * (BCE(p_t, y) + lambda_in * KD(z_t, sg(z_s)))
// averaged over the batch, plus the gate penalty once per batch.
inline InnerParts inner_loss(const Value& z_t, const Value& z_s, const Value& y, const Value& w,
                             const std::vector<scam::ScamLayer>& layers, const LossWeights& lw) {
  lw.validate();
  detail::check_batch(z_t, z_s, y, w, "inner_loss");
  InnerParts parts;
  Value bce = ad::bce_per_sample(ad::sigmoid(z_t), y);
  Value kd = ad::kd_per_sample(z_t, ad::detach(z_s), lw.tau);
  Value per = ad::add(bce, ad::mul_scalar(kd, lw.lambda_in));
  parts.task = ad::mean_all(bce);
  parts.kd = ad::mean_all(kd);
  parts.gate = scam::gate_sparsity(layers);
  parts.total = ad::add(ad::mean_all(ad::mul(w, per)), ad::mul_scalar(parts.gate, lw.lambda_gate));
  return parts;
}

struct OuterParts {
  Value total;
  Value task;  // unweighted mean student BCE
  Value kd;    // unweighted mean outer KD
};

// Student-side objective on validation batches: w * (BCE(p_s, y) +
// lambda_out * KD(z_s, sg(z_t))) averaged over the batch.
inline OuterParts outer_loss(const Value& z_s, const Value& z_t, const Value& y, const Value& w,
                             const LossWeights& lw) {
  lw.validate();
  detail::check_batch(z_s, z_t, y, w, "outer_loss");
  OuterParts parts;
  Value bce = ad::bce_per_sample(ad::sigmoid(z_s), y);
  Value kd = ad::kd_per_sample(z_s, ad::detach(z_t), lw.tau);
  parts.task = ad::mean_all(bce);
  parts.kd = ad::mean_all(kd);
  parts.total = ad::mean_all(ad::mul(w, ad::add(bce, ad::mul_scalar(kd, lw.lambda_out))));
  return parts;
}

// Per-step component log.
class LossCsv {
 public:
  LossCsv() = default;
  explicit LossCsv(const std::string& path) : out_(path) {
    if (!out_) throw IoError("cannot open loss log at " + path);
    out_ << "step,task_t,kd_in,gate,task_s,kd_out,total_in,total_out\n";
  }

  void log(long step, const InnerParts& in, const OuterParts& out) {
    if (!out_.is_open()) return;
    out_ << step << ',' << in.task.val().item() << ',' << in.kd.val().item() << ','
         << in.gate.val().item() << ',' << out.task.val().item() << ',' << out.kd.val().item()
         << ',' << in.total.val().item() << ',' << out.total.val().item() << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace istdkd::losses
