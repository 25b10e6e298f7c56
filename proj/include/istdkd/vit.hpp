#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/tensor.hpp"
#include "istdkd/vfm.hpp"

namespace istdkd::vfm {

// Minimal frozen ViT encoder for the dinov3 provider selection. Weights are
// read from a simple binary tensor archive (see read_tensor_archive); a
// conversion script for upstream checkpoints is described in the README.
// The adapter exposes the outputs of the last (up to) 12 transformer blocks
// as token features, patch tokens only.

namespace detail {

inline std::uint32_t read_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_u32(std::ofstream& f, std::uint32_t v) {
  char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
               static_cast<char>(v >> 24)};
  f.write(b, 4);
}

}  // namespace detail

inline std::map<std::string, Tensor> read_tensor_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ProviderError("cannot open weights archive: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "ITAR") throw ProviderError("bad weights archive magic in " + path.string());
  std::uint32_t version = detail::read_u32(f);
  if (version != 1) throw ProviderError("unsupported weights archive version");
  std::uint32_t count = detail::read_u32(f);
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t name_len = detail::read_u32(f);
    if (name_len > 512) throw ProviderError("corrupt weights archive (name length)");
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    std::uint32_t rank = detail::read_u32(f);
    if (rank > 4) throw ProviderError("corrupt weights archive (rank)");
    std::vector<int> shape;
    std::size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(static_cast<int>(detail::read_u32(f)));
      n *= static_cast<std::size_t>(shape.back());
    }
    Tensor t(shape.empty() ? std::vector<int>{1} : shape);
    std::vector<float> buf(n);
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    if (!f) throw ProviderError("truncated weights archive: " + path.string());
    for (std::size_t j = 0; j < n; ++j) t[j] = buf[j];
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

inline void write_tensor_archive(const std::filesystem::path& path,
                                 const std::map<std::string, Tensor>& tensors) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write weights archive: " + path.string());
  f.write("ITAR", 4);
  detail::write_u32(f, 1);
  detail::write_u32(f, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::write_u32(f, static_cast<std::uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(f, static_cast<std::uint32_t>(t.rank()));
    for (int r = 0; r < t.rank(); ++r) detail::write_u32(f, static_cast<std::uint32_t>(t.dim(r)));
    std::vector<float> buf(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) buf[i] = static_cast<float>(t[i]);
    f.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
}

class VitProvider : public FeatureProvider {
 public:
  explicit VitProvider(const std::filesystem::path& weights_path, int patch = 16)
      : patch_(patch) {
    if (weights_path.empty())
      throw ProviderError("dinov3 provider requires vfm.weights pointing to a converted archive");
    weights_ = read_tensor_archive(weights_path);
    auto need = [&](const std::string& n) -> const Tensor& {
      auto it = weights_.find(n);
      if (it == weights_.end()) throw ProviderError("weights archive missing tensor: " + n);
      return it->second;
    };
    const Tensor& pe = need("patch_embed.w");
    if (pe.rank() != 2 || pe.dim(0) != patch_ * patch_)
      throw ProviderError("patch_embed.w must be (patch*patch) x dim");
    dim_ = pe.dim(1);
    depth_ = 0;
    while (weights_.count("blocks." + std::to_string(depth_) + ".ln1.w")) ++depth_;
    if (depth_ < 1) throw ProviderError("weights archive has no transformer blocks");
    heads_ = static_cast<int>(need("meta.heads").item());
    if (heads_ < 1 || dim_ % heads_ != 0) throw ProviderError("bad head count in weights archive");
    taken_ = std::min(depth_, 12);
    checksum_ = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : weights_) {
      checksum_ = detail::fnv1a(name.data(), name.size(), checksum_);
      checksum_ = detail::fnv1a(t.data(), t.size() * sizeof(double), checksum_);
    }
  }

  TokenFeatures extract(const Tensor& image) const override {
    if (image.rank() != 2) throw ShapeError("extract: rank-2 image required");
    Tensor img = detail::reflect_pad_to_multiple(image, patch_);
    int rows = img.dim(0) / patch_, cols = img.dim(1) / patch_;
    int n = rows * cols;
    Tensor x({n, dim_});
    const Tensor& pw = weights_.at("patch_embed.w");
    const Tensor& pb = weights_.at("patch_embed.b");
    for (int pr = 0; pr < rows; ++pr)
      for (int pc = 0; pc < cols; ++pc) {
        double* row = x.data() + (static_cast<std::size_t>(pr) * cols + pc) * dim_;
        for (int j = 0; j < dim_; ++j) row[j] = pb.at(j);
        for (int y = 0; y < patch_; ++y)
          for (int xx = 0; xx < patch_; ++xx) {
            double v = img.at(pr * patch_ + y, pc * patch_ + xx);
            const double* prow = pw.data() + (static_cast<std::size_t>(y) * patch_ + xx) * dim_;
            for (int j = 0; j < dim_; ++j) row[j] += v * prow[j];
          }
      }
    add_pos_embed(x, rows, cols);

    TokenFeatures tf;
    tf.patch_grid = {rows, cols};
    tf.provider_id = id();
    for (int b = 0; b < depth_; ++b) {
      block_forward(x, b);
      if (b >= depth_ - taken_) {
        Tensor f = x;
        for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<float>(f[i]);
        if (!f.all_finite()) throw NumericError("vit provider produced non-finite tokens");
        tf.blocks.push_back(std::move(f));
      }
    }
    return tf;
  }

  std::string id() const override { return "dinov3_vits16"; }
  int patch_size() const override { return patch_; }
  int blocks() const override { return taken_; }
  int dim() const override { return dim_; }
  std::uint64_t param_checksum() const override { return checksum_; }

 private:
  void add_pos_embed(Tensor& x, int rows, int cols) const {
    auto it = weights_.find("pos_embed");
    if (it == weights_.end()) return;
    const Tensor& pe = it->second;  // (gr*gc) x dim with meta.pos_grid rows
    int gr = static_cast<int>(weights_.at("meta.pos_grid").item());
    int gc = pe.dim(0) / gr;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) {
        // Bilinear interpolation over the stored grid.
        double fy = rows == 1 ? 0.0 : static_cast<double>(r) * (gr - 1) / (rows - 1);
        double fx = cols == 1 ? 0.0 : static_cast<double>(c) * (gc - 1) / (cols - 1);
        int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
        int y1 = std::min(y0 + 1, gr - 1), x1 = std::min(x0 + 1, gc - 1);
        double wy = fy - y0, wx = fx - x0;
        double* row = x.data() + (static_cast<std::size_t>(r) * cols + c) * dim_;
        for (int j = 0; j < dim_; ++j) {
          double v00 = pe.at(y0 * gc + x0, j), v01 = pe.at(y0 * gc + x1, j);
          double v10 = pe.at(y1 * gc + x0, j), v11 = pe.at(y1 * gc + x1, j);
          row[j] += (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        }
      }
  }

  static void layer_norm(Tensor& x, const Tensor& w, const Tensor& b) {
    int n = x.dim(0), d = x.dim(1);
    for (int i = 0; i < n; ++i) {
      double* row = x.data() + static_cast<std::size_t>(i) * d;
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += row[j];
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
      var /= d;
      double inv = 1.0 / std::sqrt(var + 1e-6);
      for (int j = 0; j < d; ++j) row[j] = (row[j] - mean) * inv * w.at(j) + b.at(j);
    }
  }

  static Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    int n = x.dim(0), din = x.dim(1), dout = w.dim(1);
    if (w.dim(0) != din) throw ProviderError("vit weight shape mismatch");
    Tensor y({n, dout});
    for (int i = 0; i < n; ++i) {
      double* yr = y.data() + static_cast<std::size_t>(i) * dout;
      for (int j = 0; j < dout; ++j) yr[j] = b.at(j);
      const double* xr = x.data() + static_cast<std::size_t>(i) * din;
      for (int k = 0; k < din; ++k) {
        double v = xr[k];
        const double* wr = w.data() + static_cast<std::size_t>(k) * dout;
        for (int j = 0; j < dout; ++j) yr[j] += v * wr[j];
      }
    }
    return y;
  }

  void block_forward(Tensor& x, int b) const {
    const std::string p = "blocks." + std::to_string(b) + ".";
    int n = x.dim(0), d = dim_, dh = dim_ / heads_;
    Tensor h = x;
    layer_norm(h, weights_.at(p + "ln1.w"), weights_.at(p + "ln1.b"));
    Tensor qkv = linear(h, weights_.at(p + "attn.qkv.w"), weights_.at(p + "attn.qkv.b"));
    Tensor attn_out({n, d});
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> logits(static_cast<std::size_t>(n));
    for (int head = 0; head < heads_; ++head) {
      int qo = head * dh, ko = d + head * dh, vo = 2 * d + head * dh;
      for (int i = 0; i < n; ++i) {
        const double* qi = qkv.data() + static_cast<std::size_t>(i) * 3 * d + qo;
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
          const double* kj = qkv.data() + static_cast<std::size_t>(j) * 3 * d + ko;
          double s = 0.0;
          for (int c = 0; c < dh; ++c) s += qi[c] * kj[c];
          logits[static_cast<std::size_t>(j)] = s * scale;
          mx = std::max(mx, logits[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
          logits[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)] - mx);
          z += logits[static_cast<std::size_t>(j)];
        }
        double* out = attn_out.data() + static_cast<std::size_t>(i) * d + head * dh;
        for (int c = 0; c < dh; ++c) out[c] = 0.0;
        for (int j = 0; j < n; ++j) {
          double aj = logits[static_cast<std::size_t>(j)] / z;
          const double* vj = qkv.data() + static_cast<std::size_t>(j) * 3 * d + vo;
          for (int c = 0; c < dh; ++c) out[c] += aj * vj[c];
        }
      }
    }
    Tensor proj = linear(attn_out, weights_.at(p + "attn.proj.w"), weights_.at(p + "attn.proj.b"));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

    Tensor m = x;
    layer_norm(m, weights_.at(p + "ln2.w"), weights_.at(p + "ln2.b"));
    Tensor f1 = linear(m, weights_.at(p + "mlp.fc1.w"), weights_.at(p + "mlp.fc1.b"));
    for (std::size_t i = 0; i < f1.size(); ++i)
      f1[i] = 0.5 * f1[i] * (1.0 + std::erf(f1[i] / std::sqrt(2.0)));
    Tensor f2 = linear(f1, weights_.at(p + "mlp.fc2.w"), weights_.at(p + "mlp.fc2.b"));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += f2[i];
  }

  int patch_, dim_ = 0, depth_ = 0, heads_ = 0, taken_ = 0;
  std::map<std::string, Tensor> weights_;
  std::uint64_t checksum_ = 0;
};

inline std::unique_ptr<FeatureProvider> make_provider(const std::string& name,
                                                      const std::string& weights_path) {
  if (name == "stub") return std::make_unique<StubProvider>();
  if (name == "dinov3") return std::make_unique<VitProvider>(weights_path);
  throw ConfigError("unknown vfm.provider: " + name + " (expected stub or dinov3)");
}

}  // namespace istdkd::vfm
