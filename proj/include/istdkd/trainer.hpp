#pragma once
// Training orchestration. Each epoch: (a) evolve pseudo-masks from teacher
// predictions over the train and val splits, (b) one pass of weighted
// teacher/student training over the train split (L_in adapts phi, the
// weighted student task loss adapts theta), (c) on schedule epochs, gn_steps
// alternations of inner_step on a train batch and outer_step on a val batch
// with the alignment-corrected alpha gradient.
//
// The baseline mode (use_vfm = false) drops the provider, teacher, and
// bilevel machinery entirely: the student trains on weighted BCE against the
// same evolving pseudo-masks, which then evolve from its own predictions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/bilevel.hpp"
#include "istdkd/checkpoint.hpp"
#include "istdkd/config.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/losses.hpp"
#include "istdkd/metrics.hpp"
#include "istdkd/nets.hpp"
#include "istdkd/optim.hpp"
#include "istdkd/pseudo.hpp"
#include "istdkd/reweight.hpp"
#include "istdkd/rng.hpp"
#include "istdkd/synthdata.hpp"
#include "istdkd/vit.hpp"

namespace istdkd::trainer {

using ad::Value;

struct EpochLog {
  int epoch = 0;
  double train_iou = 0.0;
  double test_iou = 0.0;
  double loss_in = 0.0;   // mean teacher objective over the epoch's batches
  double loss_out = 0.0;  // mean weighted student task loss
  double pm_iou = 0.0;    // mean pseudo-mask IoU against hidden GT (train+val)
  int gn_iters = 0;       // bilevel alternations run this epoch
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::filesystem::path run_dir;
  std::filesystem::path log_csv;
  std::filesystem::path final_checkpoint;  // ckpt_final.bin; empty if aborted
  std::filesystem::path latest_checkpoint;
  int bilevel_triggers = 0;
  long long inner_applied = 0, outer_applied = 0;
  long long inner_skipped = 0, outer_skipped = 0;
  bool aborted = false;
  std::string abort_reason;
};

namespace detail {

inline const char* kEpochCsvHeader = "epoch,train_iou,test_iou,loss_in,loss_out,pm_iou,gn_iters";

inline void write_epoch_row(std::ofstream& f, const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%.6f,%.6f,%d", e.epoch, e.train_iou,
                e.test_iou, e.loss_in, e.loss_out, e.pm_iou, e.gn_iters);
  f << buf << '\n';
  f.flush();
}

// Stack sample images into an (N,1,H,W) constant.
inline Tensor batch_images(const synth::Dataset& ds, const std::vector<std::string>& ids) {
  const Tensor& first = ds.by_id(ids.front()).image;
  int h = first.dim(0), w = first.dim(1);
  Tensor x({static_cast<int>(ids.size()), 1, h, w});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const Tensor& img = ds.by_id(ids[i]).image;
    if (img.dim(0) != h || img.dim(1) != w)
      throw ShapeError("train: images in a batch must share a shape");
    std::copy(img.data(), img.data() + img.size(), x.data() + i * img.size());
  }
  return x;
}

inline Tensor batch_masks(const pseudo::PseudoMaskStore& pm, const std::vector<std::string>& ids,
                          int h, int w) {
  Tensor y({static_cast<int>(ids.size()), 1, h, w});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Tensor m = pm.mask_tensor(ids[i]);
    if (m.dim(0) != h || m.dim(1) != w) throw ShapeError("train: mask shape mismatch");
    std::copy(m.data(), m.data() + m.size(), y.data() + i * m.size());
  }
  return y;
}

inline std::vector<std::vector<std::string>> batches_of(const std::vector<std::string>& ids,
                                                        int batch) {
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < ids.size(); i += static_cast<std::size_t>(batch)) {
    std::size_t j = std::min(ids.size(), i + static_cast<std::size_t>(batch));
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(i),
                     ids.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

}  // namespace detail

// Shared context for one training run.
class Trainer {
 public:
  Trainer(const config::RunConfig& cfg, const synth::Dataset& ds, bool use_vfm = true)
      : cfg_(cfg), ds_(ds), use_vfm_(use_vfm), init_rng_(cfg.seed) {
    cfg_.validate();
    if (cfg_.run_dir.empty()) throw ConfigError("train: run_dir must be set");
    if (ds_.split.train.empty()) throw DataError("train: empty train split");
    if (ds_.split.val.empty()) throw DataError("train: empty val split (needed for outer steps)");
    if (ds_.split.test.empty()) throw DataError("train: empty test split");
    run_dir_ = cfg_.run_dir;
    std::filesystem::create_directories(run_dir_);

    student_ = nets::StudentNet::init(init_rng_);
    if (use_vfm_) {
      provider_ = vfm::make_provider(cfg_.provider, cfg_.weights);
      if (provider_->blocks() != cfg_.k_blocks)
        throw ConfigError("train: k_blocks=" + std::to_string(cfg_.k_blocks) +
                          " but provider supplies " + std::to_string(provider_->blocks()));
      std::filesystem::path cache =
          cfg_.cache_dir.empty() ? run_dir_ / "cache" : std::filesystem::path(cfg_.cache_dir);
      std::filesystem::create_directories(cache);
      store_ = vfm::TokenStore(provider_.get(), cache);
      teacher_ = nets::make_teacher(student_, provider_->dim(), cfg_.k_blocks, cfg_.hidden,
                                    init_rng_);
      fit_reweighting();
      state_ = bilevel::make_bilevel_state(student_.named_params(), teacher_.named_phi(),
                                           clusters_.alpha, cfg_.eta_or_lr(), cfg_.lr, cfg_.eps,
                                           cfg_.bilevel_period, cfg_.gn_steps, cfg_.weight_decay);
      phi_opt_.lr = cfg_.lr;
      phi_opt_.weight_decay = cfg_.weight_decay;
    } else {
      theta_opt_.lr = cfg_.lr;
      theta_opt_.weight_decay = cfg_.weight_decay;
    }

    lw_.lambda_in = cfg_.lambda_in;
    lw_.lambda_out = cfg_.lambda_out;
    lw_.lambda_gate = cfg_.lambda_gate;
    lw_.tau = cfg_.tau;

    for (const std::string& id : ds_.split.train) init_mask(id);
    for (const std::string& id : ds_.split.val) init_mask(id);
  }

  // Restore parameters, optimizer state, pseudo-masks, and epoch counter.
  void resume_from(const std::filesystem::path& ckpt_path) {
    ckpt::Checkpoint c = ckpt::load_checkpoint(ckpt_path.string());
    if (c.config_hash != config::config_hash(cfg_))
      throw ConfigError("resume: config hash mismatch with checkpoint " + ckpt_path.string());
    ckpt::apply_params(c.theta, student_.named_params());
    if (use_vfm_) {
      ckpt::apply_params(c.phi, teacher_.named_phi());
      if (!c.alpha.size() || c.alpha.shape() != clusters_.alpha.val().shape())
        throw DataError("resume: alpha missing or wrong length in checkpoint");
      clusters_.alpha.val() = c.alpha;
      state_.outer.t = c.opt_t;
      state_.outer.m = c.opt_m;
      state_.outer.v = c.opt_v;
      phi_opt_.t = c.opt_phi_t;
      phi_opt_.m = c.opt_phi_m;
      phi_opt_.v = c.opt_phi_v;
    } else {
      theta_opt_.t = c.opt_t;
      theta_opt_.m = c.opt_m;
      theta_opt_.v = c.opt_v;
    }
    for (const std::string& id : pm_.ids()) {
      const pseudo::PseudoEntry& e = c.pm.entry(id);  // StateError if absent
      pm_.restore(id, e.mask.h, e.mask.w, e.points, e.components, e.updated_epoch);
    }
    start_epoch_ = c.epoch + 1;
  }

  TrainResult run() {
    TrainResult res;
    res.run_dir = run_dir_;
    res.log_csv = run_dir_ / "epochs.csv";
    if (use_vfm_) write_clusters();

    std::ofstream log;
    if (start_epoch_ == 1) {
      log.open(res.log_csv, std::ios::binary);
      if (!log) throw IoError("train: cannot open " + res.log_csv.string());
      log << detail::kEpochCsvHeader << '\n';
    } else {
      log.open(res.log_csv, std::ios::binary | std::ios::app);
      if (!log) throw IoError("train: cannot open " + res.log_csv.string());
    }

    ckpt::Checkpoint last_good = snapshot(start_epoch_ - 1);
    for (int epoch = start_epoch_; epoch <= cfg_.epochs; ++epoch) {
      EpochLog row;
      row.epoch = epoch;
      try {
        evolve_masks(epoch);
        row.pm_iou = mean_pm_iou();
        train_pass(epoch, row);
        if (epoch % cfg_.bilevel_period == 0 && use_vfm_) {
          bilevel_trigger(epoch, row);
          ++res.bilevel_triggers;
        }
        row.test_iou = split_iou(ds_.split.test);
      } catch (const NumericError& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        res.latest_checkpoint = run_dir_ / "ckpt_latest.bin";
        ckpt::save_checkpoint(res.latest_checkpoint.string(), last_good);
        log.close();
        return finalize(res);
      }
      detail::write_epoch_row(log, row);
      res.epochs.push_back(row);
      if (on_epoch) on_epoch(row);
      last_good = snapshot(epoch);
      if (epoch % cfg_.bilevel_period == 0) {
        res.latest_checkpoint = run_dir_ / "ckpt_latest.bin";
        ckpt::save_checkpoint(res.latest_checkpoint.string(), last_good);
      }
    }
    res.final_checkpoint = run_dir_ / "ckpt_final.bin";
    ckpt::save_checkpoint(res.final_checkpoint.string(), last_good);
    return finalize(res);
  }

  const nets::StudentNet& student() const { return student_; }
  const pseudo::PseudoMaskStore& masks() const { return pm_; }
  const reweight::ClusterModel& clusters() const { return clusters_; }

  std::function<void(const EpochLog&)> on_epoch;  // progress hook

 private:
  void init_mask(const std::string& id) {
    const synth::Sample& s = ds_.by_id(id);
    pm_.init(id, s.points, s.image.dim(0), s.image.dim(1));
  }

  void fit_reweighting() {
    const auto& train_ids = ds_.split.train;
    Tensor raw({static_cast<int>(train_ids.size()), reweight::kPriorDim});
    for (std::size_t i = 0; i < train_ids.size(); ++i) {
      Tensor f = reweight::prior_features(ds_.by_id(train_ids[i]));
      std::copy(f.data(), f.data() + f.size(), raw.data() + i * f.size());
    }
    clusters_ = reweight::fit_clusters(raw, train_ids, cfg_.k_c, cfg_.seed);
    for (const std::string& id : ds_.split.val)
      clusters_.assign(id, reweight::prior_features(ds_.by_id(id)));
  }

  void write_clusters() const {
    std::ofstream f(run_dir_ / "clusters.json", std::ios::binary);
    if (!f) throw IoError("train: cannot write clusters.json");
    f << reweight::clusters_json(clusters_).dump(2) << '\n';
  }

  // Teacher (or student, in baseline mode) probabilities for one id batch.
  std::map<std::string, Tensor> predict_probs(const std::vector<std::string>& ids) {
    ad::NoGradGuard ng;
    std::map<std::string, Tensor> out;
    for (const auto& chunk : detail::batches_of(ids, cfg_.batch)) {
      Value x = Value::constant(detail::batch_images(ds_, chunk));
      Value logits = use_vfm_ ? forward_teacher(chunk, x).logits
                              : nets::student_forward(student_, x).logits;
      Tensor p = ad::sigmoid(logits).val();
      int hw = p.dim(2) * p.dim(3);
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        Tensor m({p.dim(2), p.dim(3)});
        std::copy(p.data() + i * static_cast<std::size_t>(hw),
                  p.data() + (i + 1) * static_cast<std::size_t>(hw), m.data());
        out.emplace(chunk[i], std::move(m));
      }
    }
    return out;
  }

  void evolve_masks(int epoch) {
    std::vector<std::string> ids = ds_.split.train;
    ids.insert(ids.end(), ds_.split.val.begin(), ds_.split.val.end());
    auto probs = predict_probs(ids);
    for (const std::string& id : ids) pm_.evolve(id, probs.at(id), epoch);
  }

  double mean_pm_iou() const {
    std::vector<std::string> ids = ds_.split.train;
    ids.insert(ids.end(), ds_.split.val.begin(), ds_.split.val.end());
    double acc = 0.0;
    for (const std::string& id : ids) acc += metrics::iou(pm_.mask(id), ds_.by_id(id).gt);
    return acc / static_cast<double>(ids.size());
  }

  nets::TeacherOut forward_teacher(const std::vector<std::string>& ids, const Value& x) {
    std::vector<const Tensor*> stacked;
    stacked.reserve(ids.size());
    int n_tok = 0;
    for (const std::string& id : ids) {
      const synth::Sample& s = ds_.by_id(id);
      stacked.push_back(&store_.stacked(id, s.image));
      n_tok = store_.features(id, s.image).n_tokens();
    }
    return nets::teacher_forward(teacher_, x, stacked, n_tok);
  }

  Value weights_for(const std::vector<std::string>& ids) {
    if (!use_vfm_) return Value::constant(Tensor({static_cast<int>(ids.size())}, 1.0));
    return reweight::sample_weights(ids, clusters_);
  }

  std::vector<Value> owned_params() {
    std::vector<Value> all = student_.params();
    if (use_vfm_) {
      for (auto& v : teacher_.phi_params()) all.push_back(v);
      all.push_back(clusters_.alpha);
    }
    return all;
  }

  // One pass of epoch-level weighted training over the shuffled train split.
  void train_pass(int epoch, EpochLog& row) {
    std::vector<std::string> order = ds_.split.train;
    Rng shuffle_rng = Rng::stream(cfg_.seed, "epoch" + std::to_string(epoch));
    shuffle_rng.shuffle(order);

    metrics::PixelCounts train_px;
    double in_sum = 0.0, out_sum = 0.0;
    int n_batches = 0;
    std::vector<Value> all = owned_params();

    for (const auto& batch : detail::batches_of(order, cfg_.batch)) {
      Value x = Value::constant(detail::batch_images(ds_, batch));
      int h = x.val().dim(2), w = x.val().dim(3);
      Value y = Value::constant(detail::batch_masks(pm_, batch, h, w));
      Value wv = weights_for(batch);

      nets::ForwardOut so = nets::student_forward(student_, x);
      if (use_vfm_) {
        nets::TeacherOut to = forward_teacher(batch, x);
        losses::InnerParts in = losses::inner_loss(to.logits, so.logits, y, wv, teacher_.layers, lw_);
        optim::zero_grad(all);
        if (in.total.val().all_finite()) {
          ad::backward(in.total);
          if (optim::all_grads_finite(teacher_.phi_params())) phi_opt_.step(teacher_.phi_params());
        }
        in_sum += in.total.val().item();
      }

      // Weighted student task loss; alpha learns only through outer steps, so
      // its incidental gradient through w is dropped before stepping.
      Value task =
          ad::mean_all(ad::mul(wv, ad::bce_per_sample(ad::sigmoid(so.logits), y)));
      optim::zero_grad(all);
      if (task.val().all_finite()) {
        ad::backward(task);
        if (use_vfm_) {
          clusters_.alpha.grad() = Tensor(clusters_.alpha.val().shape());
          if (optim::all_grads_finite(state_.theta_values()))
            state_.outer.step(state_.outer_params());
        } else {
          if (optim::all_grads_finite(student_.params())) theta_opt_.step(student_.params());
        }
      }
      out_sum += task.val().item();
      ++n_batches;

      // Train-side IoU from this pass's student predictions.
      const Tensor& logits = so.logits.val();
      int hw = h * w;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        BinaryMask pred(h, w);
        const double* z = logits.data() + i * static_cast<std::size_t>(hw);
        for (int j = 0; j < hw; ++j) pred.v[static_cast<std::size_t>(j)] = z[j] > 0.0 ? 1 : 0;
        metrics::PixelCounts pc = metrics::iou_counts(pred, ds_.by_id(batch[i]).gt);
        train_px.inter += pc.inter;
        train_px.uni += pc.uni;
      }
    }
    row.loss_in = n_batches ? in_sum / n_batches : 0.0;
    row.loss_out = n_batches ? out_sum / n_batches : 0.0;
    row.train_iou = train_px.uni == 0 ? 1.0 : static_cast<double>(train_px.inter) /
                                                  static_cast<double>(train_px.uni);
  }

  losses::InnerParts build_inner(const std::vector<std::string>& ids) {
    Value x = Value::constant(detail::batch_images(ds_, ids));
    Value y = Value::constant(detail::batch_masks(pm_, ids, x.val().dim(2), x.val().dim(3)));
    nets::TeacherOut to = forward_teacher(ids, x);
    Value z_s;
    {
      ad::NoGradGuard ng;
      z_s = Value::constant(nets::student_forward(student_, x).logits.val());
    }
    return losses::inner_loss(to.logits, z_s, y, weights_for(ids), teacher_.layers, lw_);
  }

  losses::OuterParts build_outer(const std::vector<std::string>& ids) {
    Value x = Value::constant(detail::batch_images(ds_, ids));
    Value y = Value::constant(detail::batch_masks(pm_, ids, x.val().dim(2), x.val().dim(3)));
    nets::ForwardOut so = nets::student_forward(student_, x);
    Value z_t;
    {
      ad::NoGradGuard ng;
      z_t = Value::constant(forward_teacher(ids, x).logits.val());
    }
    return losses::outer_loss(so.logits, z_t, y, weights_for(ids), lw_);
  }

  void bilevel_trigger(int epoch, EpochLog& row) {
    Rng gn_rng = Rng::stream(cfg_.seed, "gn" + std::to_string(epoch));
    std::vector<std::string> train_ids = ds_.split.train;
    std::vector<std::string> val_ids = ds_.split.val;
    for (int k = 0; k < cfg_.gn_steps; ++k) {
      gn_rng.shuffle(train_ids);
      std::vector<std::string> tb(train_ids.begin(),
                                  train_ids.begin() + std::min<std::size_t>(train_ids.size(),
                                                                            cfg_.batch));
      bilevel::inner_step(state_, [&] { return build_inner(tb).total; });

      gn_rng.shuffle(val_ids);
      std::vector<std::string> vb(val_ids.begin(),
                                  val_ids.begin() + std::min<std::size_t>(val_ids.size(),
                                                                          cfg_.batch));
      // rho aligns the same train batch's inner gradient (at the adapted phi)
      // with the val batch's outer gradient.
      bilevel::outer_step(state_, [&] { return build_inner(tb).total; },
                          [&] { return build_outer(vb).total; });
      ++row.gn_iters;
    }
  }

  double split_iou(const std::vector<std::string>& ids) {
    ad::NoGradGuard ng;
    metrics::PixelCounts px;
    for (const auto& chunk : detail::batches_of(ids, cfg_.batch)) {
      Value x = Value::constant(detail::batch_images(ds_, chunk));
      Value z = nets::student_forward(student_, x).logits;
      const Tensor& logits = z.val();
      int h = logits.dim(2), w = logits.dim(3), hw = h * w;
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        BinaryMask pred(h, w);
        const double* z = logits.data() + i * static_cast<std::size_t>(hw);
        for (int j = 0; j < hw; ++j) pred.v[static_cast<std::size_t>(j)] = z[j] > 0.0 ? 1 : 0;
        metrics::PixelCounts pc = metrics::iou_counts(pred, ds_.by_id(chunk[i]).gt);
        px.inter += pc.inter;
        px.uni += pc.uni;
      }
    }
    return px.uni == 0 ? 1.0 : static_cast<double>(px.inter) / static_cast<double>(px.uni);
  }

  ckpt::Checkpoint snapshot(int epoch) const {
    ckpt::Checkpoint c;
    c.epoch = epoch;
    c.config_hash = config::config_hash(cfg_);
    for (const auto& [name, v] : student_.named_params()) c.theta[name] = v.val();
    if (use_vfm_) {
      for (const auto& [name, v] : teacher_.named_phi()) c.phi[name] = v.val();
      c.alpha = clusters_.alpha.val();
      c.opt_t = state_.outer.t;
      c.opt_m = state_.outer.m;
      c.opt_v = state_.outer.v;
      c.opt_phi_t = phi_opt_.t;
      c.opt_phi_m = phi_opt_.m;
      c.opt_phi_v = phi_opt_.v;
    } else {
      c.opt_t = theta_opt_.t;
      c.opt_m = theta_opt_.m;
      c.opt_v = theta_opt_.v;
    }
    for (const std::string& id : pm_.ids()) {
      const pseudo::PseudoEntry& e = pm_.entry(id);
      c.pm.restore(id, e.mask.h, e.mask.w, e.points, e.components, e.updated_epoch);
    }
    return c;
  }

  TrainResult finalize(TrainResult res) {
    res.inner_applied = use_vfm_ ? state_.inner_applied : 0;
    res.outer_applied = use_vfm_ ? state_.outer_applied : 0;
    res.inner_skipped = use_vfm_ ? state_.inner_skipped : 0;
    res.outer_skipped = use_vfm_ ? state_.outer_skipped : 0;
    return res;
  }

  config::RunConfig cfg_;
  const synth::Dataset& ds_;
  bool use_vfm_;
  Rng init_rng_;
  std::filesystem::path run_dir_;
  std::unique_ptr<vfm::FeatureProvider> provider_;
  vfm::TokenStore store_;
  nets::StudentNet student_;
  nets::TeacherNet teacher_;
  reweight::ClusterModel clusters_;
  bilevel::BilevelState state_;
  optim::AdamW phi_opt_;    // epoch-level phi updates
  optim::AdamW theta_opt_;  // baseline mode only
  losses::LossWeights lw_;
  pseudo::PseudoMaskStore pm_;
  int start_epoch_ = 1;
};

inline TrainResult train(const config::RunConfig& cfg, const synth::Dataset& ds,
                         bool use_vfm = true, const std::filesystem::path& resume = {}) {
  Trainer t(cfg, ds, use_vfm);
  if (!resume.empty()) t.resume_from(resume);
  return t.run();
}

}  // namespace istdkd::trainer
