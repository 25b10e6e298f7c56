#pragma once

#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "istdkd/autodiff.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/synthdata.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::reweight {

using ad::Value;

inline constexpr int kPriorDim = 5;

// --- hand-crafted priors -----------------------------------------------

// Mean gradient magnitude over the forward-difference grid: for each of the
// (h-1)x(w-1) upper-left cells, sqrt(dx^2 + dy^2).
inline double texture_complexity(const Tensor& img) {
  int h = img.dim(0), w = img.dim(1);
  if (h < 2 || w < 2) return 0.0;
  double acc = 0.0;
  for (int r = 0; r + 1 < h; ++r)
    for (int c = 0; c + 1 < w; ++c) {
      double dx = img.at(r, c + 1) - img.at(r, c);
      double dy = img.at(r + 1, c) - img.at(r, c);
      acc += std::sqrt(dx * dx + dy * dy);
    }
  return acc / (static_cast<double>(h - 1) * (w - 1));
}

namespace detail {

// Row-column complex DFT, O(hw(h+w)). Plenty for desk-scale images.
inline std::vector<std::complex<double>> dft2(const Tensor& img) {
  int h = img.dim(0), w = img.dim(1);
  std::vector<std::complex<double>> rows(static_cast<std::size_t>(h) * w);
  for (int r = 0; r < h; ++r)
    for (int v = 0; v < w; ++v) {
      std::complex<double> acc(0.0, 0.0);
      for (int c = 0; c < w; ++c) {
        double ang = -2.0 * M_PI * v * c / w;
        acc += img.at(r, c) * std::complex<double>(std::cos(ang), std::sin(ang));
      }
      rows[static_cast<std::size_t>(r) * w + v] = acc;
    }
  std::vector<std::complex<double>> out(rows.size());
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      std::complex<double> acc(0.0, 0.0);
      for (int r = 0; r < h; ++r) {
        double ang = -2.0 * M_PI * u * r / h;
        acc += rows[static_cast<std::size_t>(r) * w + v] *
               std::complex<double>(std::cos(ang), std::sin(ang));
      }
      out[static_cast<std::size_t>(u) * w + v] = acc;
    }
  return out;
}

}  // namespace detail

// Fraction of non-DC spectral energy at folded frequencies above half the
// Nyquist rate (Chebyshev band: max(|f_u|,|f_v|) > 0.25 cycles/pixel).
inline double spectral_sharpness(const Tensor& img) {
  int h = img.dim(0), w = img.dim(1);
  auto spec = detail::dft2(img);
  double total = 0.0, high = 0.0;
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      if (u == 0 && v == 0) continue;
      double e = std::norm(spec[static_cast<std::size_t>(u) * w + v]);
      total += e;
      double fu = static_cast<double>(std::min(u, h - u)) / h;
      double fv = static_cast<double>(std::min(v, w - v)) / w;
      if (std::max(fu, fv) > 0.25) high += e;
    }
  // Constant images leave only rounding dust outside DC; call that zero.
  double dc = std::norm(spec[0]);
  if (total <= 1e-15 * std::max(1.0, dc)) return 0.0;
  return high / total;
}

// (mean, std, texture, sharpness, point count). Population std.
inline Tensor prior_features(const synth::Sample& s) {
  const Tensor& img = s.image;
  double mean = img.mean();
  double var = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) var += (img[i] - mean) * (img[i] - mean);
  var /= static_cast<double>(img.size());
  Tensor f({kPriorDim});
  f[0] = mean;
  f[1] = std::sqrt(var);
  f[2] = texture_complexity(img);
  f[3] = spectral_sharpness(img);
  f[4] = static_cast<double>(s.points.size());
  if (!f.all_finite()) throw NumericError("prior features non-finite for sample " + s.id);
  return f;
}

// --- clustering ----------------------------------------------------------

struct ClusterModel {
  Tensor centers;   // k x 5, z-scored feature space
  Tensor mu;        // 5, frozen normalization stats from the fit corpus
  Tensor sigma;     // 5
  Value alpha;      // k, learnable logits
  std::unordered_map<std::string, int> assignment;

  int k() const { return centers.dim(0); }

  Tensor normalize(const Tensor& raw) const {
    Tensor z({kPriorDim});
    for (int j = 0; j < kPriorDim; ++j)
      z[j] = sigma[j] > 1e-12 ? (raw[j] - mu[j]) / sigma[j] : 0.0;
    return z;
  }

  int nearest(const Tensor& z) const {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k(); ++c) {
      double d = 0.0;
      for (int j = 0; j < kPriorDim; ++j) {
        double t = z[j] - centers.at(c, j);
        d += t * t;
      }
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }

  // Assign (and cache) by nearest center; used for val ids after the fit.
  int assign(const std::string& id, const Tensor& raw) {
    auto it = assignment.find(id);
    if (it != assignment.end()) return it->second;
    int c = nearest(normalize(raw));
    assignment.emplace(id, c);
    return c;
  }

  int cluster_of(const std::string& id) const {
    auto it = assignment.find(id);
    if (it == assignment.end()) throw StateError("no cluster assignment for sample " + id);
    return it->second;
  }
};

inline ClusterModel fit_clusters(const Tensor& raw, const std::vector<std::string>& ids, int k_c,
                                 std::uint64_t seed, int max_iter = 50) {
  if (raw.rank() != 2 || raw.dim(1) != kPriorDim)
    throw ShapeError("fit_clusters: features must be M x 5");
  int m = raw.dim(0);
  if (static_cast<int>(ids.size()) != m) throw ShapeError("fit_clusters: one id per feature row");
  if (k_c < 1 || m < k_c)
    throw ConfigError("fit_clusters: need at least k_c=" + std::to_string(k_c) + " samples, got " +
                      std::to_string(m));

  ClusterModel model;
  model.mu = Tensor({kPriorDim}, 0.0);
  model.sigma = Tensor({kPriorDim}, 0.0);
  for (int j = 0; j < kPriorDim; ++j) {
    double mean = 0.0;
    for (int i = 0; i < m; ++i) mean += raw.at(i, j);
    mean /= m;
    double var = 0.0;
    for (int i = 0; i < m; ++i) var += (raw.at(i, j) - mean) * (raw.at(i, j) - mean);
    model.mu[j] = mean;
    model.sigma[j] = std::sqrt(var / m);
  }
  Tensor z({m, kPriorDim});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < kPriorDim; ++j)
      z.at(i, j) = model.sigma[j] > 1e-12 ? (raw.at(i, j) - model.mu[j]) / model.sigma[j] : 0.0;

  auto dist2 = [&](int i, const Tensor& centers, int c) {
    double d = 0.0;
    for (int j = 0; j < kPriorDim; ++j) {
      double t = z.at(i, j) - centers.at(c, j);
      d += t * t;
    }
    return d;
  };

  // k-means++ seeding.
  Rng rng(seed);
  Tensor centers({k_c, kPriorDim});
  int first = rng.uniform_int(0, m - 1);
  for (int j = 0; j < kPriorDim; ++j) centers.at(0, j) = z.at(first, j);
  std::vector<double> best_d2(static_cast<std::size_t>(m));
  for (int c = 1; c < k_c; ++c) {
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
      double d = std::numeric_limits<double>::infinity();
      for (int cc = 0; cc < c; ++cc) d = std::min(d, dist2(i, centers, cc));
      best_d2[static_cast<std::size_t>(i)] = d;
      total += d;
    }
    int pick;
    if (total > 0.0) {
      double r = rng.uniform(0.0, total);
      pick = m - 1;
      double acc = 0.0;
      for (int i = 0; i < m; ++i) {
        acc += best_d2[static_cast<std::size_t>(i)];
        if (r <= acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.uniform_int(0, m - 1);
    }
    for (int j = 0; j < kPriorDim; ++j) centers.at(c, j) = z.at(pick, j);
  }

  // Lloyd iterations; empty clusters grab the farthest point.
  std::vector<int> assign(static_cast<std::size_t>(m), -1);
  for (int iter = 0; iter < max_iter; ++iter) {
    bool changed = false;
    for (int i = 0; i < m; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k_c; ++c) {
        double d = dist2(i, centers, c);
        if (d < bd) {
          bd = d;
          best = c;
        }
      }
      if (assign[static_cast<std::size_t>(i)] != best) {
        assign[static_cast<std::size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;
    Tensor sums({k_c, kPriorDim});
    std::vector<int> counts(static_cast<std::size_t>(k_c), 0);
    for (int i = 0; i < m; ++i) {
      int c = assign[static_cast<std::size_t>(i)];
      ++counts[static_cast<std::size_t>(c)];
      for (int j = 0; j < kPriorDim; ++j) sums.at(c, j) += z.at(i, j);
    }
    for (int c = 0; c < k_c; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) {
        int far = 0;
        double fd = -1.0;
        for (int i = 0; i < m; ++i) {
          double d = dist2(i, centers, assign[static_cast<std::size_t>(i)]);
          if (d > fd) {
            fd = d;
            far = i;
          }
        }
        for (int j = 0; j < kPriorDim; ++j) centers.at(c, j) = z.at(far, j);
      } else {
        for (int j = 0; j < kPriorDim; ++j)
          centers.at(c, j) = sums.at(c, j) / counts[static_cast<std::size_t>(c)];
      }
    }
  }

  model.centers = std::move(centers);
  model.alpha = Value::param(Tensor({k_c}, 0.0));
  for (int i = 0; i < m; ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k_c; ++c) {
      double d = dist2(i, model.centers, c);
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    model.assignment.emplace(ids[static_cast<std::size_t>(i)], best);
  }
  return model;
}

// Eq-style batch weights: w_i = exp(a_{c(i)}) / batch-mean exp(a_{c(k)});
// differentiable in alpha, batch mean exactly 1.
inline Value sample_weights(const std::vector<std::string>& ids, const ClusterModel& model) {
  if (ids.empty()) throw ConfigError("sample_weights: empty batch");
  std::vector<int> idx;
  idx.reserve(ids.size());
  for (const std::string& id : ids) idx.push_back(model.cluster_of(id));
  Value e = ad::vexp(ad::gather(model.alpha, idx));
  return ad::mul_scalar_node(e, ad::recip(ad::mean_all(e)));
}

inline nlohmann::ordered_json clusters_json(const ClusterModel& model) {
  nlohmann::ordered_json j;
  j["k"] = model.k();
  for (int c = 0; c < model.k(); ++c) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int f = 0; f < kPriorDim; ++f) row.push_back(model.centers.at(c, f));
    j["centers"].push_back(row);
  }
  for (int f = 0; f < kPriorDim; ++f) {
    j["mu"].push_back(model.mu[f]);
    j["sigma"].push_back(model.sigma[f]);
  }
  for (int c = 0; c < model.k(); ++c) j["alpha"].push_back(model.alpha.val()[c]);
  std::map<std::string, int> sorted(model.assignment.begin(), model.assignment.end());
  for (const auto& [id, c] : sorted) j["assignments"][id] = c;
  return j;
}

inline ClusterModel clusters_from_json(const nlohmann::json& j) {
  ClusterModel m;
  int k = j.at("k").get<int>();
  if (k < 1) throw DataError("clusters json: bad k");
  m.centers = Tensor({k, kPriorDim});
  for (int c = 0; c < k; ++c)
    for (int f = 0; f < kPriorDim; ++f) m.centers.at(c, f) = j.at("centers").at(c).at(f).get<double>();
  m.mu = Tensor({kPriorDim});
  m.sigma = Tensor({kPriorDim});
  for (int f = 0; f < kPriorDim; ++f) {
    m.mu[f] = j.at("mu").at(f).get<double>();
    m.sigma[f] = j.at("sigma").at(f).get<double>();
  }
  Tensor a({k});
  for (int c = 0; c < k; ++c) a[c] = j.at("alpha").at(c).get<double>();
  m.alpha = Value::param(std::move(a));
  if (j.contains("assignments"))
    for (auto it = j.at("assignments").begin(); it != j.at("assignments").end(); ++it)
      m.assignment.emplace(it.key(), it.value().get<int>());
  return m;
}

}  // namespace istdkd::reweight
