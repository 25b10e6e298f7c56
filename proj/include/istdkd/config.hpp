#pragma once
// Run configuration: flat "key = value" text with a strict key set.
// Unknown keys are hard errors; silent hyperparameter typos are worse than a
// failed launch. The serialized form is canonical so its hash can gate
// checkpoint resume.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "istdkd/errors.hpp"
#include "istdkd/vfm.hpp"

namespace istdkd::config {

struct RunConfig {
  int epochs = 300;
  int batch = 16;
  double lr = 1e-3;
  double lambda_in = 0.1;
  double lambda_out = 1.0;
  double lambda_gate = 5e-3;
  double tau = 4.0;
  int k_blocks = 12;
  int bilevel_period = 5;
  int gn_steps = 4;
  double val_ratio = 0.1;
  int k_c = 8;
  double eta = 0.0;  // 0 means "use lr"
  double eps = 1e-8;
  double weight_decay = 1e-2;
  int hidden = 64;
  std::string provider = "stub";
  std::string weights;  // provider weights archive, dinov3 only
  std::uint64_t seed = 0;
  std::string data_dir;
  std::string run_dir;
  std::string cache_dir;  // token cache; defaults to <run_dir>/cache

  double eta_or_lr() const { return eta > 0.0 ? eta : lr; }

  void validate() const {
    auto bad = [](const std::string& what) { throw ConfigError("config: " + what); };
    if (epochs < 1) bad("epochs must be >= 1");
    if (batch < 1) bad("batch must be >= 1");
    if (!(lr > 0.0)) bad("lr must be positive");
    if (lambda_in < 0 || lambda_out < 0 || lambda_gate < 0) bad("loss weights must be >= 0");
    if (!(tau > 0.0)) bad("tau must be positive");
    if (k_blocks < 1) bad("k_blocks must be >= 1");
    if (bilevel_period < 1) bad("bilevel_period must be >= 1");
    if (gn_steps < 1) bad("gn_steps must be >= 1");
    if (!(val_ratio > 0.0 && val_ratio < 1.0)) bad("val_ratio must be in (0,1)");
    if (k_c < 1) bad("k_c must be >= 1");
    if (eta < 0.0) bad("eta must be >= 0");
    if (!(eps > 0.0)) bad("eps must be positive");
    if (weight_decay < 0.0) bad("weight_decay must be >= 0");
    if (hidden < 1) bad("hidden must be >= 1");
    if (provider != "stub" && provider != "dinov3") bad("provider must be stub or dinov3");
    if (provider == "dinov3" && weights.empty()) bad("dinov3 provider needs weights=");
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline double parse_num(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: bad numeric value for " + key + ": '" + v + "'");
  }
}

inline int parse_int(const std::string& key, const std::string& v) {
  double x = parse_num(key, v);
  int i = static_cast<int>(x);
  if (static_cast<double>(i) != x) throw ConfigError("config: " + key + " must be an integer");
  return i;
}

inline std::string fmt_num(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace detail

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  using detail::parse_int;
  using detail::parse_num;
  if (key == "epochs") cfg.epochs = parse_int(key, value);
  else if (key == "batch") cfg.batch = parse_int(key, value);
  else if (key == "lr") cfg.lr = parse_num(key, value);
  else if (key == "lambda_in") cfg.lambda_in = parse_num(key, value);
  else if (key == "lambda_out") cfg.lambda_out = parse_num(key, value);
  else if (key == "lambda_gate") cfg.lambda_gate = parse_num(key, value);
  else if (key == "tau") cfg.tau = parse_num(key, value);
  else if (key == "k_blocks") cfg.k_blocks = parse_int(key, value);
  else if (key == "bilevel_period") cfg.bilevel_period = parse_int(key, value);
  else if (key == "gn_steps") cfg.gn_steps = parse_int(key, value);
  else if (key == "val_ratio") cfg.val_ratio = parse_num(key, value);
  else if (key == "k_c") cfg.k_c = parse_int(key, value);
  else if (key == "eta") cfg.eta = parse_num(key, value);
  else if (key == "eps") cfg.eps = parse_num(key, value);
  else if (key == "weight_decay") cfg.weight_decay = parse_num(key, value);
  else if (key == "hidden") cfg.hidden = parse_int(key, value);
  else if (key == "provider") cfg.provider = value;
  else if (key == "weights") cfg.weights = value;
  else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(parse_num(key, value));
  else if (key == "data_dir") cfg.data_dir = value;
  else if (key == "run_dir") cfg.run_dir = value;
  else if (key == "cache_dir") cfg.cache_dir = value;
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = detail::trim(line);
    if (s.empty() || s[0] == '#') continue;
    std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    std::string key = detail::trim(s.substr(0, eq));
    std::string value = detail::trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
    set_key(cfg, key, value);
  }
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

// Canonical hyperparameter serialization. Paths are excluded on purpose: the
// hash protects scientific settings across resume, not storage locations.
inline std::string serialize_config(const RunConfig& cfg) {
  using detail::fmt_num;
  std::ostringstream out;
  out << "epochs = " << cfg.epochs << "\n";
  out << "batch = " << cfg.batch << "\n";
  out << "lr = " << fmt_num(cfg.lr) << "\n";
  out << "lambda_in = " << fmt_num(cfg.lambda_in) << "\n";
  out << "lambda_out = " << fmt_num(cfg.lambda_out) << "\n";
  out << "lambda_gate = " << fmt_num(cfg.lambda_gate) << "\n";
  out << "tau = " << fmt_num(cfg.tau) << "\n";
  out << "k_blocks = " << cfg.k_blocks << "\n";
  out << "bilevel_period = " << cfg.bilevel_period << "\n";
  out << "gn_steps = " << cfg.gn_steps << "\n";
  out << "val_ratio = " << fmt_num(cfg.val_ratio) << "\n";
  out << "k_c = " << cfg.k_c << "\n";
  out << "eta = " << fmt_num(cfg.eta_or_lr()) << "\n";
  out << "eps = " << fmt_num(cfg.eps) << "\n";
  out << "weight_decay = " << fmt_num(cfg.weight_decay) << "\n";
  out << "hidden = " << cfg.hidden << "\n";
  out << "provider = " << cfg.provider << "\n";
  out << "seed = " << cfg.seed << "\n";
  return out.str();
}

inline std::uint64_t config_hash(const RunConfig& cfg) {
  std::string s = serialize_config(cfg);
  return vfm::detail::fnv1a(s.data(), s.size());
}

}  // namespace istdkd::config
