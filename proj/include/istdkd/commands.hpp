#pragma once
// The batch CLI surface. Each cmd_* takes parsed flags, does the work, and
// returns the process exit code; main() owns only dispatch and the mapping
// from exception class to exit code (0 ok, 2 config, 3 data, 4 numeric).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "istdkd/analyze.hpp"
#include "istdkd/checkpoint.hpp"
#include "istdkd/config.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/metrics.hpp"
#include "istdkd/nets.hpp"
#include "istdkd/plot.hpp"
#include "istdkd/synthdata.hpp"
#include "istdkd/trainer.hpp"

namespace istdkd::cli {

namespace detail {

// Flags are --name value pairs, plus standalone booleans listed in `switches`.
struct Flags {
  std::map<std::string, std::string> kv;
  std::vector<std::string> on;

  const std::string& need(const std::string& name) const {
    auto it = kv.find(name);
    if (it == kv.end()) throw ConfigError("missing required flag --" + name);
    return it->second;
  }
  std::string get(const std::string& name, const std::string& dflt) const {
    auto it = kv.find(name);
    return it == kv.end() ? dflt : it->second;
  }
  bool has(const std::string& name) const { return kv.count(name) != 0; }
  bool flag(const std::string& name) const {
    for (const std::string& s : on)
      if (s == name) return true;
    return false;
  }
};

inline Flags parse_flags(const std::vector<std::string>& args,
                         const std::vector<std::string>& value_flags,
                         const std::vector<std::string>& switches = {}) {
  Flags f;
  for (std::size_t i = 0; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + a + "'");
    std::string name = a.substr(2);
    bool is_switch = false;
    for (const std::string& s : switches)
      if (s == name) is_switch = true;
    if (is_switch) {
      f.on.push_back(name);
      continue;
    }
    bool known = false;
    for (const std::string& s : value_flags)
      if (s == name) known = true;
    if (!known) throw ConfigError("unknown flag --" + name);
    if (i + 1 >= args.size()) throw ConfigError("flag --" + name + " needs a value");
    f.kv[name] = args[++i];
  }
  return f;
}

inline long parse_long(const std::string& s, const std::string& flag) {
  std::size_t used = 0;
  long v = 0;
  try {
    v = std::stol(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("flag --" + flag + ": not an integer: '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("flag --" + flag + ": not an integer: '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s, const std::string& flag) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ConfigError("flag --" + flag + ": not a number: '" + s + "'");
  }
  if (used != s.size()) throw ConfigError("flag --" + flag + ": not a number: '" + s + "'");
  return v;
}

// Deterministic default run directory: the spec-level requirement is one
// directory per configuration; a timestamp would break byte-stable reruns,
// so the config hash alone names the run.
inline std::string default_run_dir(const config::RunConfig& cfg) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(config::config_hash(cfg)));
  return (std::filesystem::path("runs") / ("run_" + std::string(buf))).string();
}

inline void print_metric_rows(const std::vector<metrics::MetricRow>& rows) {
  std::printf("%-8s %-12s %8s %8s %8s %10s %5s\n", "split", "tag", "IoU", "nIoU", "Pd",
              "Fa(1e-6)", "n");
  for (const metrics::MetricRow& r : rows)
    std::printf("%-8s %-12s %8.4f %8.4f %8.4f %10.4f %5d\n", r.split.c_str(), r.tag.c_str(),
                r.iou_pct, r.niou_pct, r.pd_pct, r.fa_1e6, r.n);
}

}  // namespace detail

inline int cmd_generate(const std::vector<std::string>& args) {
  detail::Flags f = detail::parse_flags(
      args, {"out", "n-train", "n-test", "size", "seed", "val-ratio", "max-targets"});
  synth::CorpusSpec spec;
  spec.n_train_pool = static_cast<int>(detail::parse_long(f.need("n-train"), "n-train"));
  spec.n_test = static_cast<int>(detail::parse_long(f.need("n-test"), "n-test"));
  spec.h = spec.w = static_cast<int>(detail::parse_long(f.need("size"), "size"));
  spec.seed = static_cast<std::uint64_t>(detail::parse_long(f.get("seed", "0"), "seed"));
  spec.val_ratio = detail::parse_double(f.get("val-ratio", "0.1"), "val-ratio");
  spec.max_targets = static_cast<int>(detail::parse_long(f.get("max-targets", "3"), "max-targets"));
  std::filesystem::path out = f.need("out");

  synth::Dataset ds = synth::build_corpus(spec);
  synth::save_dataset(ds, out);
  std::printf("wrote %zu samples to %s (train %zu / val %zu / test %zu)\n", ds.samples.size(),
              out.string().c_str(), ds.split.train.size(), ds.split.val.size(),
              ds.split.test.size());
  return 0;
}

inline int cmd_train(const std::vector<std::string>& args) {
  detail::Flags f = detail::parse_flags(args, {"config", "resume"}, {"no-vfm"});
  config::RunConfig cfg = config::load_config(f.need("config"));
  cfg.validate();
  if (cfg.data_dir.empty()) throw ConfigError("config: data_dir must be set for training");
  if (cfg.run_dir.empty()) cfg.run_dir = detail::default_run_dir(cfg);

  synth::Dataset ds = synth::load_dataset(cfg.data_dir);
  trainer::Trainer t(cfg, ds, !f.flag("no-vfm"));
  if (f.has("resume")) t.resume_from(f.need("resume"));
  t.on_epoch = [&](const trainer::EpochLog& e) {
    std::string gn = e.gn_iters ? "  gn " + std::to_string(e.gn_iters) : std::string();
    std::printf("epoch %d/%d  train_iou %.4f  test_iou %.4f  L_in %.4f  L_task %.4f  pm_iou %.4f%s\n",
                e.epoch, cfg.epochs, e.train_iou, e.test_iou, e.loss_in, e.loss_out, e.pm_iou,
                gn.c_str());
    std::fflush(stdout);
  };
  trainer::TrainResult r = t.run();
  if (r.aborted) {
    std::fprintf(stderr, "training aborted: %s\nlast good state: %s\n", r.abort_reason.c_str(),
                 r.latest_checkpoint.string().c_str());
    return 4;
  }
  std::printf("log: %s\nfinal checkpoint: %s\n", r.log_csv.string().c_str(),
              r.final_checkpoint.string().c_str());
  return 0;
}

inline int cmd_eval(const std::vector<std::string>& args) {
  detail::Flags f = detail::parse_flags(args, {"ckpt", "data", "split", "out"});
  std::filesystem::path ckpt_path = f.need("ckpt");
  synth::Dataset ds = synth::load_dataset(f.need("data"));
  std::string split = f.get("split", "test");
  const std::vector<std::string>* ids = nullptr;
  if (split == "train")
    ids = &ds.split.train;
  else if (split == "val")
    ids = &ds.split.val;
  else if (split == "test")
    ids = &ds.split.test;
  else
    throw ConfigError("flag --split: expected train, val, or test, got '" + split + "'");
  if (ids->empty()) throw DataError("eval: split '" + split + "' is empty");

  // Deployment-style evaluation: the student alone, no provider, no teacher.
  std::map<std::string, Tensor> theta = ckpt::load_student_params(ckpt_path.string());
  Rng rng(0);
  nets::StudentNet student = nets::StudentNet::init(rng);
  ckpt::apply_params(theta, student.named_params());

  std::vector<metrics::SampleEval> samples;
  samples.reserve(ids->size());
  for (const std::string& id : *ids) {
    const synth::Sample& s = ds.by_id(id);
    Tensor prob = nets::student_predict(student, s.image);
    samples.push_back({synth::tag_name(s.tag),
                       BinaryMask::from_tensor_threshold(prob, 0.5), s.gt});
  }
  std::vector<metrics::MetricRow> rows = metrics::characteristic_report(split, samples, 3.0);
  std::filesystem::path out = f.get("out", (ckpt_path.parent_path() / "report.csv").string());
  metrics::write_report_csv(out.string(), rows);
  detail::print_metric_rows(rows);
  std::printf("report: %s\n", out.string().c_str());
  return 0;
}

inline int cmd_analyze(const std::vector<std::string>& args) {
  detail::Flags f = detail::parse_flags(args, {"ckpt", "data", "config", "out"});
  std::filesystem::path ckpt_path = f.need("ckpt");
  config::RunConfig cfg;
  if (f.has("config")) cfg = config::load_config(f.need("config"));
  synth::Dataset ds = synth::load_dataset(f.need("data"));
  std::filesystem::path out =
      f.get("out", (ckpt_path.parent_path() / "analysis").string());

  analyze::AnalyzeResult r = analyze::analyze(cfg, ds, ckpt_path, out);
  std::printf("attention stats: %s\n%zu panels under %s\n", r.attn_csv.string().c_str(),
              r.panels.size(), out.string().c_str());
  return 0;
}

inline int cmd_plot(const std::vector<std::string>& args) {
  detail::Flags f = detail::parse_flags(args, {"log", "out"});
  plot::plot_curves(f.need("log"), f.need("out"));
  std::printf("plot: %s\n", f.need("out").c_str());
  return 0;
}

inline int usage() {
  std::fprintf(stderr,
               "usage: istdkd <command> [flags]\n"
               "  generate --out DIR --n-train N --n-test N --size S [--seed S]\n"
               "           [--val-ratio R] [--max-targets K]\n"
               "  train    --config FILE [--resume CKPT] [--no-vfm]\n"
               "  eval     --ckpt FILE --data DIR [--split test] [--out FILE]\n"
               "  analyze  --ckpt FILE --data DIR [--config FILE] [--out DIR]\n"
               "  plot     --log CSV --out PNG\n");
  return 2;
}

inline int dispatch(int argc, char** argv) {
  if (argc < 2) return usage();
  std::string cmd = argv[1];
  std::vector<std::string> args(argv + 2, argv + argc);
  try {
    if (cmd == "generate") return cmd_generate(args);
    if (cmd == "train") return cmd_train(args);
    if (cmd == "eval") return cmd_eval(args);
    if (cmd == "analyze") return cmd_analyze(args);
    if (cmd == "plot") return cmd_plot(args);
    std::fprintf(stderr, "unknown command '%s'\n", cmd.c_str());
    return usage();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ProviderError& e) {
    std::fprintf(stderr, "provider error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const ShapeError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const DomainError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const StateError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  }
}

}  // namespace istdkd::cli
