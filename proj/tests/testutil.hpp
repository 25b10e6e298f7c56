#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/tensor.hpp"

namespace testutil {

inline istdkd::Tensor rand_tensor(istdkd::Rng& rng, std::vector<int> shape, double lo = -1.0,
                                  double hi = 1.0) {
  istdkd::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Central finite differences against reverse-mode gradients. make_loss must
// rebuild the graph from the live parameter nodes on every call.
inline void expect_grad_matches(std::vector<istdkd::ad::Value> params,
                                const std::function<istdkd::ad::Value()>& make_loss,
                                double h = 1e-5, double tol = 1e-6,
                                const std::string& what = "") {
  using istdkd::ad::backward;
  auto loss = make_loss();
  backward(loss);
  std::vector<istdkd::Tensor> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.push_back(p.grad());
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p.val().size(); ++i) {
      double v = p.val()[i];
      p.val()[i] = v + h;
      double lp = make_loss().val().item();
      p.val()[i] = v - h;
      double lm = make_loss().val().item();
      p.val()[i] = v;
      double fd = (lp - lm) / (2.0 * h);
      double ad = grads[pi][i];
      double scale = std::max({1.0, std::abs(fd), std::abs(ad)});
      EXPECT_NEAR(ad, fd, tol * scale)
          << what << " param " << pi << " index " << i;
    }
  }
}

}  // namespace testutil
