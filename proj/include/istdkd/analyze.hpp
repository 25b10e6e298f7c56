#pragma once
// Post-hoc inspection of a trained teacher: per-tag token-attention
// statistics (attn.csv) and a qualitative panel per test sample showing the
// input, each hook's channel-mean feature map before and after modulation,
// the token attention rendered over the patch grid, the teacher prediction,
// and the hidden ground truth.

#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/checkpoint.hpp"
#include "istdkd/config.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/metrics.hpp"
#include "istdkd/nets.hpp"
#include "istdkd/png_io.hpp"
#include "istdkd/scam.hpp"
#include "istdkd/synthdata.hpp"
#include "istdkd/vfm.hpp"
#include "istdkd/vit.hpp"

namespace istdkd::analyze {

using ad::Value;

struct AnalyzeResult {
  std::filesystem::path attn_csv;
  std::vector<std::filesystem::path> panels;
};

namespace detail {

// (1,C,H',W') activation -> (H',W') channel mean.
inline Tensor channel_mean(const Tensor& a) {
  if (a.rank() != 4 || a.dim(0) != 1) throw ShapeError("channel_mean: (1,C,H,W) required");
  int ch = a.dim(1), h = a.dim(2), w = a.dim(3);
  Tensor out({h, w});
  for (int c = 0; c < ch; ++c)
    for (int r = 0; r < h; ++r)
      for (int cc = 0; cc < w; ++cc) out.at(r, cc) += a.at(0, c, r, cc);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= ch;
  return out;
}

inline Tensor upsample_nearest(const Tensor& a, int h, int w) {
  Tensor out({h, w});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      out.at(r, c) = a.at(r * a.dim(0) / h, c * a.dim(1) / w);
  return out;
}

inline void minmax_normalize(Tensor& t) {
  double lo = t[0], hi = t[0];
  for (std::size_t i = 0; i < t.size(); ++i) {
    lo = std::min(lo, t[i]);
    hi = std::max(hi, t[i]);
  }
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = hi > lo ? (t[i] - lo) / (hi - lo) : 0.5;
}

// Tile a 2 x 5 grid of equally sized [0,1] maps into one 8-bit image.
inline void write_panel(const std::filesystem::path& path, const std::vector<Tensor>& tiles) {
  const int rows = 2, cols = 5, sep = 2;
  int th = tiles[0].dim(0), tw = tiles[0].dim(1);
  int H = rows * th + (rows + 1) * sep, W = cols * tw + (cols + 1) * sep;
  std::vector<std::uint8_t> pix(static_cast<std::size_t>(H) * W, 32);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    int r0 = sep + static_cast<int>(i) / cols * (th + sep);
    int c0 = sep + static_cast<int>(i) % cols * (tw + sep);
    for (int r = 0; r < th; ++r)
      for (int c = 0; c < tw; ++c) {
        double v = tiles[i].at(r, c);
        v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        pix[static_cast<std::size_t>(r0 + r) * W + c0 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  }
  pngio::write_gray8(path.string(), pix, H, W);
}

}  // namespace detail

inline AnalyzeResult analyze(const config::RunConfig& cfg, const synth::Dataset& ds,
                             const std::filesystem::path& ckpt_path,
                             const std::filesystem::path& out_dir) {
  cfg.validate();
  ckpt::Checkpoint c = ckpt::load_checkpoint(ckpt_path.string());
  if (c.phi.empty())
    throw DataError("analyze: checkpoint " + ckpt_path.string() + " carries no teacher");

  std::unique_ptr<vfm::FeatureProvider> provider = vfm::make_provider(cfg.provider, cfg.weights);
  if (provider->blocks() != cfg.k_blocks)
    throw ConfigError("analyze: k_blocks=" + std::to_string(cfg.k_blocks) +
                      " but provider supplies " + std::to_string(provider->blocks()));
  std::filesystem::create_directories(out_dir);
  vfm::TokenStore store(provider.get(), cfg.cache_dir.empty()
                                            ? out_dir / "cache"
                                            : std::filesystem::path(cfg.cache_dir));

  Rng rng(cfg.seed);
  nets::StudentNet student = nets::StudentNet::init(rng);
  nets::TeacherNet teacher =
      nets::make_teacher(student, provider->dim(), cfg.k_blocks, cfg.hidden, rng);
  ckpt::apply_params(c.theta, student.named_params());
  ckpt::apply_params(c.phi, teacher.named_phi());

  ad::NoGradGuard ng;
  AnalyzeResult res;
  std::vector<std::pair<std::string, vfm::AttnStats>> per_sample;

  for (const std::string& id : ds.split.test) {
    const synth::Sample& s = ds.by_id(id);
    int h = s.image.dim(0), w = s.image.dim(1);
    Tensor xi({1, 1, h, w});
    std::copy(s.image.data(), s.image.data() + s.image.size(), xi.data());
    Value x = Value::constant(std::move(xi));

    const vfm::TokenFeatures& tf = store.features(id, s.image);
    std::vector<const Tensor*> stacked = {&store.stacked(id, s.image)};
    nets::TeacherOut to = nets::teacher_forward(teacher, x, stacked, tf.n_tokens());
    per_sample.emplace_back(synth::tag_name(s.tag), vfm::attention_stats(to.attn[0].val()));

    // Rerun the trunk with a capturing modulator to get each hook both
    // before and after SCAM. The pooled vector is reused from the pass
    // above, so the modulated maps match it exactly.
    std::vector<Tensor> pre, post;
    nets::detail::run_trunk(student, x, [&](const Value& f, int hook) {
      pre.push_back(detail::channel_mean(f.val()));
      Value m = scam::modulate_with(f, to.g, teacher.layers[static_cast<std::size_t>(hook)]);
      post.push_back(detail::channel_mean(m.val()));
      return m;
    });

    // Token attention over the patch grid, stretched to image size.
    auto [grid_r, grid_c] = tf.patch_grid;
    Tensor attn_map({grid_r, grid_c});
    for (int i = 0; i < grid_r * grid_c; ++i) attn_map[static_cast<std::size_t>(i)] = to.attn[0].val()[static_cast<std::size_t>(i)];

    std::vector<Tensor> tiles;
    tiles.push_back(s.image);
    for (std::size_t l = 0; l < pre.size(); ++l) {
      Tensor a = detail::upsample_nearest(pre[l], h, w);
      Tensor b = detail::upsample_nearest(post[l], h, w);
      detail::minmax_normalize(a);
      detail::minmax_normalize(b);
      tiles.push_back(std::move(a));
      tiles.push_back(std::move(b));
    }
    Tensor dino = detail::upsample_nearest(attn_map, h, w);
    detail::minmax_normalize(dino);
    tiles.push_back(std::move(dino));
    Value pv = ad::sigmoid(to.logits);
    Tensor prob({h, w});
    std::copy(pv.val().data(), pv.val().data() + prob.size(), prob.data());
    tiles.push_back(std::move(prob));
    tiles.push_back(s.gt.to_tensor());

    std::filesystem::path panel = out_dir / ("panel_" + id + ".png");
    detail::write_panel(panel, tiles);
    res.panels.push_back(panel);
  }

  if (per_sample.empty()) throw DataError("analyze: dataset has no test samples");
  res.attn_csv = out_dir / "attn.csv";
  metrics::write_attn_csv(res.attn_csv.string(), metrics::attention_report(per_sample));
  return res;
}

}  // namespace istdkd::analyze
