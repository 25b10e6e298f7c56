#pragma once
// Gauss-Newton style hypergradient machinery.
//
// The inner step adapts phi by plain gradient descent on L_in; the outer
// step updates (theta, alpha) on L_out, where the alpha gradient is
// corrected by the alignment coefficient rho instead of unrolling the inner
// update. Gradients are flattened in parameter-name order so rho is
// reproducible across runs.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/optim.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::bilevel {

using ad::Value;

using NamedParams = std::vector<std::pair<std::string, Value>>;

inline std::vector<Value> values(const NamedParams& params) {
  std::vector<Value> out;
  out.reserve(params.size());
  for (const auto& [name, v] : params) out.push_back(v);
  return out;
}

// Concatenates grad buffers in ascending name order.
inline Tensor flatten_grads(const NamedParams& params) {
  std::vector<const std::pair<std::string, Value>*> order;
  order.reserve(params.size());
  for (const auto& p : params) order.push_back(&p);
  std::sort(order.begin(), order.end(),
            [](const auto* a, const auto* b) { return a->first < b->first; });
  std::size_t total = 0;
  for (const auto* p : order) total += p->second.val().size();
  Tensor flat({static_cast<int>(total)});
  std::size_t at = 0;
  for (const auto* p : order) {
    const Tensor& g = p->second.grad();
    if (g.size() != p->second.val().size())
      throw StateError("flatten_grads: gradient missing for " + p->first);
    for (std::size_t i = 0; i < g.size(); ++i) flat[at++] = g[i];
  }
  return flat;
}

// rho = <g_out, g_in> / (|g_in|^2 + eps), over a shared theta flattening.
inline double gn_coefficient(const Tensor& g_out_theta, const Tensor& g_in_theta, double eps) {
  if (g_out_theta.size() != g_in_theta.size())
    throw ShapeError("gn_coefficient: gradient flattenings differ in length");
  double dot = 0.0, nsq = 0.0;
  for (std::size_t i = 0; i < g_in_theta.size(); ++i) {
    dot += g_out_theta[i] * g_in_theta[i];
    nsq += g_in_theta[i] * g_in_theta[i];
  }
  return dot / (nsq + eps);
}

// Corrected alpha gradient: g_out + eta * rho * g_in, elementwise.
inline Tensor hypergradient_alpha(const Tensor& g_out_alpha, const Tensor& g_in_alpha,
                                  double eta, double rho) {
  if (g_out_alpha.size() != g_in_alpha.size())
    throw ShapeError("hypergradient_alpha: gradient lengths differ");
  Tensor out = g_out_alpha;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += eta * rho * g_in_alpha[i];
  return out;
}

struct BilevelState {
  NamedParams theta;
  NamedParams phi;
  Value alpha;

  double eta = 1e-3;  // inner step size; also the eta of the alpha correction
  double eps = 1e-8;
  int epoch = 0;
  int bilevel_period = 5;
  int gn_steps = 4;

  optim::AdamW outer;  // over theta ++ alpha, positional

  long long inner_applied = 0;
  long long inner_skipped = 0;
  long long outer_applied = 0;
  long long outer_skipped = 0;

  std::vector<Value> theta_values() const { return values(theta); }
  std::vector<Value> phi_values() const { return values(phi); }
  std::vector<Value> outer_params() const {
    std::vector<Value> out = values(theta);
    out.push_back(alpha);
    return out;
  }
  std::vector<Value> all_params() const {
    std::vector<Value> out = values(theta);
    for (const auto& [name, v] : phi) out.push_back(v);
    out.push_back(alpha);
    return out;
  }
};

inline BilevelState make_bilevel_state(NamedParams theta, NamedParams phi, Value alpha,
                                       double eta, double outer_lr, double eps = 1e-8,
                                       int bilevel_period = 5, int gn_steps = 4,
                                       double weight_decay = 1e-2) {
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("bilevel: eta must be finite and >= 0");
  if (!(eps > 0.0)) throw ConfigError("bilevel: eps must be positive");
  if (bilevel_period < 1) throw ConfigError("bilevel: bilevel_period must be >= 1");
  if (gn_steps < 1) throw ConfigError("bilevel: gn_steps must be >= 1");
  if (!alpha.defined() || alpha.val().rank() != 1)
    throw ConfigError("bilevel: alpha must be a rank-1 parameter");
  std::unordered_set<const void*> seen;
  for (const auto& [name, v] : theta) seen.insert(v.get());
  for (const auto& [name, v] : phi)
    if (!seen.insert(v.get()).second) throw ConfigError("bilevel: theta and phi share " + name);
  if (seen.count(alpha.get())) throw ConfigError("bilevel: alpha aliases a network parameter");
  BilevelState st;
  auto by_name = [](const auto& a, const auto& b) { return a.first < b.first; };
  std::sort(theta.begin(), theta.end(), by_name);
  std::sort(phi.begin(), phi.end(), by_name);
  st.theta = std::move(theta);
  st.phi = std::move(phi);
  st.alpha = std::move(alpha);
  st.eta = eta;
  st.eps = eps;
  st.bilevel_period = bilevel_period;
  st.gn_steps = gn_steps;
  st.outer.lr = outer_lr;
  st.outer.weight_decay = weight_decay;
  return st;
}

struct StepLog {
  bool applied = false;
  double loss = std::numeric_limits<double>::quiet_NaN();
  double rho = 0.0;
  Tensor alpha_grad;  // corrected gradient handed to the outer optimizer
};

// phi <- phi - eta * grad(L_in). theta and alpha are left bitwise intact;
// a non-finite loss or gradient skips the update and reports !applied.
inline StepLog inner_step(BilevelState& st, const std::function<Value()>& inner_loss) {
  StepLog log;
  optim::zero_grad(st.all_params());
  Value lin = inner_loss();
  log.loss = lin.val().item();
  if (!std::isfinite(log.loss)) {
    ++st.inner_skipped;
    return log;
  }
  ad::backward(lin);
  auto phiv = st.phi_values();
  if (!optim::all_grads_finite(phiv)) {
    ++st.inner_skipped;
    return log;
  }
  optim::Sgd{st.eta}.step(phiv);
  ++st.inner_applied;
  log.applied = true;
  return log;
}

// One adaptive step on (theta, alpha): theta takes the direct outer
// gradient, alpha the rho-corrected one. phi is untouched.
inline StepLog outer_step(BilevelState& st, const std::function<Value()>& inner_loss,
                          const std::function<Value()>& outer_loss) {
  StepLog log;
  optim::zero_grad(st.all_params());
  Value lin = inner_loss();
  double lin_val = lin.val().item();
  if (!std::isfinite(lin_val)) {
    ++st.outer_skipped;
    return log;
  }
  ad::backward(lin);
  Tensor g_in_theta = flatten_grads(st.theta);
  Tensor g_in_alpha = st.alpha.grad();

  optim::zero_grad(st.all_params());
  Value lout = outer_loss();
  log.loss = lout.val().item();
  if (!std::isfinite(log.loss)) {
    ++st.outer_skipped;
    return log;
  }
  ad::backward(lout);
  Tensor g_out_theta = flatten_grads(st.theta);
  Tensor g_out_alpha = st.alpha.grad();

  auto finite = [](const Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
      if (!std::isfinite(t[i])) return false;
    return true;
  };
  if (!finite(g_in_theta) || !finite(g_in_alpha) || !finite(g_out_theta) || !finite(g_out_alpha)) {
    ++st.outer_skipped;
    return log;
  }

  log.rho = gn_coefficient(g_out_theta, g_in_theta, st.eps);
  log.alpha_grad = hypergradient_alpha(g_out_alpha, g_in_alpha, st.eta, log.rho);
  st.alpha.grad() = log.alpha_grad;
  st.outer.step(st.outer_params());
  ++st.outer_applied;
  log.applied = true;
  return log;
}

}  // namespace istdkd::bilevel
