#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::vfm {

struct TokenFeatures {
  std::vector<Tensor> blocks;      // K matrices, each N x d
  std::pair<int, int> patch_grid;  // rows x cols, rows*cols = N
  std::string provider_id;

  int k() const { return static_cast<int>(blocks.size()); }
  int n_tokens() const { return blocks.empty() ? 0 : blocks[0].dim(0); }
  int dim() const { return blocks.empty() ? 0 : blocks[0].dim(1); }
};

class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual TokenFeatures extract(const Tensor& image) const = 0;
  virtual std::string id() const = 0;
  virtual int patch_size() const = 0;
  virtual int blocks() const = 0;
  virtual int dim() const = 0;
  // Frozen-parameter contract: must not change over a provider's lifetime.
  virtual std::uint64_t param_checksum() const = 0;
};

namespace detail {

inline std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Reflect-pad (edge excluded) to the next multiple of `mult`.
inline Tensor reflect_pad_to_multiple(const Tensor& img, int mult) {
  int h = img.dim(0), w = img.dim(1);
  int ph = (mult - h % mult) % mult;
  int pw = (mult - w % mult) % mult;
  if (!ph && !pw) return img;
  if (h < ph + 2 || w < pw + 2) throw ShapeError("reflect pad: image too small for padding");
  Tensor out({h + ph, w + pw});
  for (int r = 0; r < h + ph; ++r) {
    int sr = r < h ? r : h - 2 - (r - h);
    for (int c = 0; c < w + pw; ++c) {
      int sc = c < w ? c : w - 2 - (c - w);
      out.at(r, c) = img.at(sr, sc);
    }
  }
  return out;
}

inline float round_f32(double v) { return static_cast<float>(v); }

}  // namespace detail

// Fixed-seed frozen random patchifier. Each patch is flattened, projected by
// a per-block random matrix to d dims, then passed through tanh. Outputs are
// rounded through 32-bit floats so cached and freshly extracted tokens are
// bit-identical.
class StubProvider : public FeatureProvider {
 public:
  explicit StubProvider(int blocks = 12, int dim = 384, int patch = 16)
      : blocks_(blocks), dim_(dim), patch_(patch) {
    if (blocks < 1 || dim < 1 || patch < 1) throw ConfigError("stub provider: bad geometry");
    Rng rng(0x57ab00f5ULL);
    double scale = 1.0 / std::sqrt(static_cast<double>(patch_ * patch_));
    proj_.reserve(static_cast<std::size_t>(blocks_));
    bias_.reserve(static_cast<std::size_t>(blocks_));
    for (int k = 0; k < blocks_; ++k) {
      Tensor p({patch_ * patch_, dim_});
      for (std::size_t i = 0; i < p.size(); ++i) p[i] = rng.normal(0.0, scale);
      Tensor b({dim_});
      for (std::size_t i = 0; i < b.size(); ++i) b[i] = rng.normal(0.0, 0.2);
      proj_.push_back(std::move(p));
      bias_.push_back(std::move(b));
    }
  }

  TokenFeatures extract(const Tensor& image) const override {
    if (image.rank() != 2) throw ShapeError("extract: rank-2 image required");
    Tensor img = detail::reflect_pad_to_multiple(image, patch_);
    int rows = img.dim(0) / patch_, cols = img.dim(1) / patch_;
    int n = rows * cols;
    TokenFeatures tf;
    tf.patch_grid = {rows, cols};
    tf.provider_id = id();
    tf.blocks.reserve(static_cast<std::size_t>(blocks_));
    std::vector<double> patch(static_cast<std::size_t>(patch_ * patch_));
    for (int k = 0; k < blocks_; ++k) {
      Tensor f({n, dim_});
      for (int pr = 0; pr < rows; ++pr)
        for (int pc = 0; pc < cols; ++pc) {
          for (int y = 0; y < patch_; ++y)
            for (int x = 0; x < patch_; ++x)
              patch[static_cast<std::size_t>(y) * patch_ + x] = img.at(pr * patch_ + y, pc * patch_ + x);
          double* row = f.data() + (static_cast<std::size_t>(pr) * cols + pc) * dim_;
          const double* b = bias_[static_cast<std::size_t>(k)].data();
          const double* P = proj_[static_cast<std::size_t>(k)].data();
          for (int j = 0; j < dim_; ++j) row[j] = b[j];
          for (int i = 0; i < patch_ * patch_; ++i) {
            double pv = patch[static_cast<std::size_t>(i)];
            const double* prow = P + static_cast<std::size_t>(i) * dim_;
            for (int j = 0; j < dim_; ++j) row[j] += pv * prow[j];
          }
          for (int j = 0; j < dim_; ++j) row[j] = detail::round_f32(std::tanh(row[j]));
        }
      if (!f.all_finite()) throw NumericError("stub provider produced non-finite tokens");
      tf.blocks.push_back(std::move(f));
    }
    return tf;
  }

  std::string id() const override { return "stub16"; }
  int patch_size() const override { return patch_; }
  int blocks() const override { return blocks_; }
  int dim() const override { return dim_; }

  std::uint64_t param_checksum() const override {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (int k = 0; k < blocks_; ++k) {
      h = detail::fnv1a(proj_[static_cast<std::size_t>(k)].data(),
                        proj_[static_cast<std::size_t>(k)].size() * sizeof(double), h);
      h = detail::fnv1a(bias_[static_cast<std::size_t>(k)].data(),
                        bias_[static_cast<std::size_t>(k)].size() * sizeof(double), h);
    }
    return h;
  }

  // Exposed for the analytic zero-input oracle in tests.
  const Tensor& block_bias(int k) const { return bias_[static_cast<std::size_t>(k)]; }

 private:
  int blocks_, dim_, patch_;
  std::vector<Tensor> proj_;
  std::vector<Tensor> bias_;
};

// ---------------------------------------------------------------------------
// Fusion, pooling, statistics
// ---------------------------------------------------------------------------

struct FusionWeights {
  Tensor logits;  // K

  explicit FusionWeights(int k) : logits({k}, 0.0) {}
  explicit FusionWeights(Tensor l) : logits(std::move(l)) {
    if (logits.rank() != 1) throw ShapeError("fusion logits must be rank 1");
  }

  Tensor pi() const {
    int k = logits.dim(0);
    Tensor p({k});
    double mx = logits.max();
    double z = 0.0;
    for (int i = 0; i < k; ++i) {
      p.at(i) = std::exp(logits.at(i) - mx);
      z += p.at(i);
    }
    for (int i = 0; i < k; ++i) p.at(i) /= z;
    return p;
  }
};

inline Tensor fuse_depths(const TokenFeatures& tokens, const Tensor& pi) {
  if (pi.rank() != 1 || pi.dim(0) != tokens.k())
    throw ShapeError("fuse_depths: need one weight per block, got " + pi.shape_str() + " for K=" +
                     std::to_string(tokens.k()));
  Tensor out({tokens.n_tokens(), tokens.dim()});
  for (int k = 0; k < tokens.k(); ++k) {
    double w = pi.at(k);
    const Tensor& f = tokens.blocks[static_cast<std::size_t>(k)];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * f[i];
  }
  return out;
}

struct TapResult {
  Tensor g;  // d
  Tensor a;  // N
};

inline TapResult tap_pool(const Tensor& f, const Tensor& w) {
  if (f.rank() != 2 || w.rank() != 1 || w.dim(0) != f.dim(1))
    throw ShapeError("tap_pool: token/score shape mismatch");
  if (!f.all_finite()) throw NumericError("tap_pool: non-finite tokens");
  int n = f.dim(0), d = f.dim(1);
  Tensor scores({n});
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += w.at(c) * f.at(j, c);
    scores.at(j) = s;
  }
  TapResult r;
  r.a = Tensor({n});
  double mx = scores.max();
  double z = 0.0;
  for (int j = 0; j < n; ++j) {
    r.a.at(j) = std::exp(scores.at(j) - mx);
    z += r.a.at(j);
  }
  r.g = Tensor({d});
  for (int j = 0; j < n; ++j) {
    double ej = r.a.at(j);
    for (int c = 0; c < d; ++c) r.g.at(c) += ej * f.at(j, c);
  }
  // Normalize last so that w = 0 reduces to sum/N, bit-exact column means.
  for (int j = 0; j < n; ++j) r.a.at(j) /= z;
  for (int c = 0; c < d; ++c) r.g.at(c) /= z;
  return r;
}

struct AttnStats {
  double h_norm = 0.0;  // fraction in [0,1]
  double eff_n = 1.0;
  double p_max = 1.0;   // fraction in (0,1]
};

inline AttnStats attention_stats(const Tensor& a) {
  if (a.rank() != 1 || a.dim(0) < 1) throw ShapeError("attention_stats: rank-1 vector required");
  int n = a.dim(0);
  double sum = 0.0;
  for (int j = 0; j < n; ++j) {
    if (a.at(j) < 0.0) throw DomainError("attention_stats: negative probability");
    sum += a.at(j);
  }
  if (std::abs(sum - 1.0) > 1e-6) throw DomainError("attention_stats: probabilities must sum to 1");
  double h = 0.0;
  AttnStats s;
  s.p_max = 0.0;
  for (int j = 0; j < n; ++j) {
    double p = a.at(j);
    if (p > 0.0) h -= p * std::log(p);
    s.p_max = std::max(s.p_max, p);
  }
  s.eff_n = std::exp(h);
  s.h_norm = n == 1 ? 0.0 : h / std::log(static_cast<double>(n));
  return s;
}

// ---------------------------------------------------------------------------
// Disk token cache: raw little-endian f32 payload plus a text shape sidecar.
// ---------------------------------------------------------------------------

namespace detail {

inline void write_f32_le(std::ofstream& f, const std::vector<float>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    f.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(float)));
  } else {
    for (float x : v) {
      auto u = std::bit_cast<std::uint32_t>(x);
      char b[4] = {static_cast<char>(u), static_cast<char>(u >> 8), static_cast<char>(u >> 16),
                   static_cast<char>(u >> 24)};
      f.write(b, 4);
    }
  }
}

inline std::vector<float> read_f32_le(std::ifstream& f, std::size_t count) {
  std::vector<float> v(count);
  if constexpr (std::endian::native == std::endian::little) {
    f.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      unsigned char b[4];
      f.read(reinterpret_cast<char*>(b), 4);
      std::uint32_t u = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                        (static_cast<std::uint32_t>(b[2]) << 16) |
                        (static_cast<std::uint32_t>(b[3]) << 24);
      v[i] = std::bit_cast<float>(u);
    }
  }
  if (!f) throw IoError("token cache payload truncated");
  return v;
}

}  // namespace detail

inline std::filesystem::path token_cache_base(const std::filesystem::path& dir,
                                              const std::string& provider_id,
                                              const std::string& image_id) {
  return dir / provider_id / image_id;
}

inline void save_tokens(const std::filesystem::path& dir, const TokenFeatures& tf,
                        const std::string& image_id) {
  namespace fs = std::filesystem;
  fs::path base = token_cache_base(dir, tf.provider_id, image_id);
  std::error_code ec;
  fs::create_directories(base.parent_path(), ec);
  std::ofstream shp(base.string() + ".shape");
  if (!shp) throw IoError("cannot write token shape sidecar at " + base.string());
  shp << tf.k() << " " << tf.n_tokens() << " " << tf.dim() << " " << tf.patch_grid.first << " "
      << tf.patch_grid.second << "\n";
  std::ofstream payload(base.string() + ".f32", std::ios::binary);
  if (!payload) throw IoError("cannot write token payload at " + base.string());
  std::vector<float> buf;
  buf.reserve(static_cast<std::size_t>(tf.k()) * tf.n_tokens() * tf.dim());
  for (const Tensor& b : tf.blocks)
    for (std::size_t i = 0; i < b.size(); ++i) buf.push_back(detail::round_f32(b[i]));
  detail::write_f32_le(payload, buf);
}

inline std::optional<TokenFeatures> load_tokens(const std::filesystem::path& dir,
                                                const std::string& provider_id,
                                                const std::string& image_id) {
  namespace fs = std::filesystem;
  fs::path base = token_cache_base(dir, provider_id, image_id);
  std::ifstream shp(base.string() + ".shape");
  if (!shp) return std::nullopt;
  int k = 0, n = 0, d = 0, rows = 0, cols = 0;
  shp >> k >> n >> d >> rows >> cols;
  if (!shp || k < 1 || n < 1 || d < 1 || rows * cols != n)
    throw DataError("corrupt token shape sidecar at " + base.string());
  std::ifstream payload(base.string() + ".f32", std::ios::binary);
  if (!payload) throw DataError("token payload missing at " + base.string());
  std::vector<float> buf = detail::read_f32_le(payload, static_cast<std::size_t>(k) * n * d);
  TokenFeatures tf;
  tf.provider_id = provider_id;
  tf.patch_grid = {rows, cols};
  std::size_t o = 0;
  for (int b = 0; b < k; ++b) {
    Tensor t({n, d});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = buf[o++];
    tf.blocks.push_back(std::move(t));
  }
  return tf;
}

// In-memory token store with optional disk cache. Also keeps a stacked
// K x (N*d) matrix per image for fusing inside an autodiff graph.
class TokenStore {
 public:
  TokenStore() = default;
  TokenStore(const FeatureProvider* provider, std::filesystem::path cache_dir = {})
      : provider_(provider), cache_dir_(std::move(cache_dir)) {}

  const TokenFeatures& features(const std::string& id, const Tensor& image) {
    auto it = mem_.find(id);
    if (it != mem_.end()) return it->second;
    if (!provider_) throw StateError("token store has no provider");
    if (!cache_dir_.empty()) {
      if (auto tf = load_tokens(cache_dir_, provider_->id(), id)) {
        return mem_.emplace(id, std::move(*tf)).first->second;
      }
    }
    TokenFeatures tf = provider_->extract(image);
    if (!cache_dir_.empty()) save_tokens(cache_dir_, tf, id);
    return mem_.emplace(id, std::move(tf)).first->second;
  }

  // K x (N*d) stacking of the blocks, cached per image id.
  const Tensor& stacked(const std::string& id, const Tensor& image) {
    auto it = stacked_.find(id);
    if (it != stacked_.end()) return it->second;
    const TokenFeatures& tf = features(id, image);
    Tensor s({tf.k(), tf.n_tokens() * tf.dim()});
    for (int k = 0; k < tf.k(); ++k) {
      const Tensor& b = tf.blocks[static_cast<std::size_t>(k)];
      std::memcpy(s.data() + static_cast<std::size_t>(k) * b.size(), b.data(),
                  b.size() * sizeof(double));
    }
    return stacked_.emplace(id, std::move(s)).first->second;
  }

  const FeatureProvider* provider() const { return provider_; }

 private:
  const FeatureProvider* provider_ = nullptr;
  std::filesystem::path cache_dir_;
  std::unordered_map<std::string, TokenFeatures> mem_;
  std::unordered_map<std::string, Tensor> stacked_;
};

}  // namespace istdkd::vfm
