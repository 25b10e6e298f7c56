#pragma once
// Optimizers over flat parameter lists.
//
// State slots are positional: callers must pass the same parameter ordering
// on every step. Gradients are read from each Value's grad buffer, so the
// usual cycle is zero_grad -> backward -> step.

#include <cmath>
#include <cstddef>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::optim {

using ad::Value;

inline void zero_grad(const std::vector<Value>& params) {
  for (const Value& p : params) p.grad() = Tensor(p.val().shape());
}

inline bool all_grads_finite(const std::vector<Value>& params) {
  for (const Value& p : params) {
    const Tensor& g = p.grad();
    if (g.size() != p.val().size()) return false;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!std::isfinite(g[i])) return false;
  }
  return true;
}

inline bool all_values_finite(const std::vector<Value>& params) {
  for (const Value& p : params)
    for (std::size_t i = 0; i < p.val().size(); ++i)
      if (!std::isfinite(p.val()[i])) return false;
  return true;
}

// Plain gradient descent: p -= lr * grad.
struct Sgd {
  double lr = 1e-3;

  void step(const std::vector<Value>& params) const {
    for (const Value& p : params) {
      Tensor& v = p.val();
      const Tensor& g = p.grad();
      if (g.size() != v.size()) throw StateError("sgd: gradient missing for a parameter");
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    }
  }
};

// Adam with decoupled weight decay.
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;

  long long t = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  void step(const std::vector<Value>& params) {
    if (m.empty() && t == 0) {
      for (const Value& p : params) {
        m.emplace_back(p.val().shape());
        v.emplace_back(p.val().shape());
      }
    }
    if (m.size() != params.size() || v.size() != params.size())
      throw StateError("adamw: optimizer state does not match parameter list");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& val = params[i].val();
      const Tensor& g = params[i].grad();
      if (g.size() != val.size()) throw StateError("adamw: gradient missing for a parameter");
      if (m[i].size() != val.size()) throw StateError("adamw: state shape mismatch");
      for (std::size_t j = 0; j < val.size(); ++j) {
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g[j];
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j];
        double mhat = m[i][j] / bc1;
        double vhat = v[i][j] / bc2;
        val[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * val[j]);
      }
    }
  }
};

}  // namespace istdkd::optim
