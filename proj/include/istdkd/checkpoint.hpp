#pragma once
// Training checkpoints on top of the tensor archive container. One file holds
// model parameters, outer-optimizer state, and the evolved pseudo-mask
// components, so a resumed run continues exactly where it stopped.
//
// Key layout:
//   meta.version / meta.epoch / meta.kc   scalars
//   meta.config_hash                      u64 as 8 little-endian byte values
//   theta.<name>, phi.<name>, alpha       parameters
//   opt.t, opt.m.<i>, opt.v.<i>           outer AdamW state, i over sorted
//                                         theta names then alpha
//   optp.t, optp.m.<i>, optp.v.<i>        phi AdamW state, i over sorted
//                                         phi names
//   pm.<id>.pts / pm.<id>.ep / pm.<id>.p<k>  pseudo-mask state per sample
// Sample ids never contain '.', so the pm keys split unambiguously.

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "istdkd/autodiff.hpp"
#include "istdkd/errors.hpp"
#include "istdkd/mask.hpp"
#include "istdkd/pseudo.hpp"
#include "istdkd/tensor.hpp"
#include "istdkd/vit.hpp"

namespace istdkd::ckpt {

struct Checkpoint {
  int version = 1;
  int epoch = 0;
  std::uint64_t config_hash = 0;
  std::map<std::string, Tensor> theta;
  std::map<std::string, Tensor> phi;
  Tensor alpha;
  long long opt_t = 0;
  std::vector<Tensor> opt_m;
  std::vector<Tensor> opt_v;
  long long opt_phi_t = 0;
  std::vector<Tensor> opt_phi_m;
  std::vector<Tensor> opt_phi_v;
  pseudo::PseudoMaskStore pm;
};

namespace detail {

inline Tensor scalar(double v) { return Tensor::from({1}, {v}); }

inline double read_scalar(const std::map<std::string, Tensor>& m, const std::string& key) {
  auto it = m.find(key);
  if (it == m.end()) throw DataError("checkpoint: missing key " + key);
  if (it->second.size() != 1) throw DataError("checkpoint: " + key + " is not a scalar");
  return it->second[0];
}

inline Tensor hash_tensor(std::uint64_t h) {
  Tensor t({8});
  for (int i = 0; i < 8; ++i) t[i] = static_cast<double>((h >> (8 * i)) & 0xffu);
  return t;
}

inline std::uint64_t tensor_hash(const Tensor& t) {
  if (t.size() != 8) throw DataError("checkpoint: malformed config hash");
  std::uint64_t h = 0;
  for (int i = 0; i < 8; ++i) {
    double d = t[i];
    if (d < 0 || d > 255 || d != static_cast<double>(static_cast<std::uint64_t>(d)))
      throw DataError("checkpoint: malformed config hash");
    h |= static_cast<std::uint64_t>(d) << (8 * i);
  }
  return h;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  std::map<std::string, Tensor> m;
  m["meta.version"] = detail::scalar(c.version);
  m["meta.epoch"] = detail::scalar(c.epoch);
  m["meta.kc"] = detail::scalar(c.alpha.size() ? c.alpha.dim(0) : 0);
  m["meta.config_hash"] = detail::hash_tensor(c.config_hash);
  for (const auto& [name, t] : c.theta) m["theta." + name] = t;
  for (const auto& [name, t] : c.phi) m["phi." + name] = t;
  if (c.alpha.size()) m["alpha"] = c.alpha;
  m["opt.t"] = detail::scalar(static_cast<double>(c.opt_t));
  for (std::size_t i = 0; i < c.opt_m.size(); ++i) m["opt.m." + std::to_string(i)] = c.opt_m[i];
  for (std::size_t i = 0; i < c.opt_v.size(); ++i) m["opt.v." + std::to_string(i)] = c.opt_v[i];
  m["optp.t"] = detail::scalar(static_cast<double>(c.opt_phi_t));
  for (std::size_t i = 0; i < c.opt_phi_m.size(); ++i)
    m["optp.m." + std::to_string(i)] = c.opt_phi_m[i];
  for (std::size_t i = 0; i < c.opt_phi_v.size(); ++i)
    m["optp.v." + std::to_string(i)] = c.opt_phi_v[i];
  for (const std::string& id : c.pm.ids()) {
    const pseudo::PseudoEntry& e = c.pm.entry(id);
    Tensor pts({static_cast<int>(e.points.size()), 2});
    for (std::size_t p = 0; p < e.points.size(); ++p) {
      pts.at(static_cast<int>(p), 0) = e.points[p].first;
      pts.at(static_cast<int>(p), 1) = e.points[p].second;
    }
    m["pm." + id + ".pts"] = pts;
    m["pm." + id + ".ep"] = detail::scalar(static_cast<double>(e.updated_epoch));
    for (std::size_t p = 0; p < e.components.size(); ++p)
      m["pm." + id + ".p" + std::to_string(p)] = e.components[p].to_tensor();
  }
  vfm::write_tensor_archive(path, m);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::map<std::string, Tensor> m;
  try {
    m = vfm::read_tensor_archive(path);
  } catch (const ProviderError& e) {
    throw DataError("corrupt checkpoint " + path + ": " + e.what());
  }
  Checkpoint c;
  c.version = static_cast<int>(detail::read_scalar(m, "meta.version"));
  if (c.version != 1)
    throw DataError("checkpoint: unsupported version " + std::to_string(c.version));
  c.epoch = static_cast<int>(detail::read_scalar(m, "meta.epoch"));
  auto hit = m.find("meta.config_hash");
  if (hit == m.end()) throw DataError("checkpoint: missing key meta.config_hash");
  c.config_hash = detail::tensor_hash(hit->second);
  int kc = static_cast<int>(detail::read_scalar(m, "meta.kc"));
  c.opt_t = static_cast<long long>(detail::read_scalar(m, "opt.t"));
  c.opt_phi_t = static_cast<long long>(detail::read_scalar(m, "optp.t"));

  struct PmRec {
    std::vector<std::pair<int, int>> points;
    std::map<int, Tensor> comps;
    long epoch = 0;
  };
  std::map<std::string, PmRec> pm;
  for (const auto& [key, t] : m) {
    if (key.rfind("theta.", 0) == 0) {
      c.theta[key.substr(6)] = t;
    } else if (key.rfind("phi.", 0) == 0) {
      c.phi[key.substr(4)] = t;
    } else if (key == "alpha") {
      c.alpha = t;
    } else if (key.rfind("opt.m.", 0) == 0) {
      std::size_t i = std::stoul(key.substr(6));
      if (c.opt_m.size() <= i) c.opt_m.resize(i + 1);
      c.opt_m[i] = t;
    } else if (key.rfind("opt.v.", 0) == 0) {
      std::size_t i = std::stoul(key.substr(6));
      if (c.opt_v.size() <= i) c.opt_v.resize(i + 1);
      c.opt_v[i] = t;
    } else if (key.rfind("optp.m.", 0) == 0) {
      std::size_t i = std::stoul(key.substr(7));
      if (c.opt_phi_m.size() <= i) c.opt_phi_m.resize(i + 1);
      c.opt_phi_m[i] = t;
    } else if (key.rfind("optp.v.", 0) == 0) {
      std::size_t i = std::stoul(key.substr(7));
      if (c.opt_phi_v.size() <= i) c.opt_phi_v.resize(i + 1);
      c.opt_phi_v[i] = t;
    } else if (key.rfind("pm.", 0) == 0) {
      std::size_t dot = key.find('.', 3);
      if (dot == std::string::npos) throw DataError("checkpoint: malformed key " + key);
      std::string id = key.substr(3, dot - 3);
      std::string field = key.substr(dot + 1);
      PmRec& rec = pm[id];
      if (field == "pts") {
        if (t.rank() != 2 || t.dim(1) != 2) throw DataError("checkpoint: malformed " + key);
        for (int p = 0; p < t.dim(0); ++p)
          rec.points.emplace_back(static_cast<int>(t.at(p, 0)), static_cast<int>(t.at(p, 1)));
      } else if (field == "ep") {
        rec.epoch = static_cast<long>(t[0]);
      } else if (field.size() > 1 && field[0] == 'p' &&
                 field.find_first_not_of("0123456789", 1) == std::string::npos) {
        rec.comps[std::stoi(field.substr(1))] = t;
      } else {
        throw DataError("checkpoint: malformed key " + key);
      }
    }
  }
  if (c.alpha.size() && c.alpha.dim(0) != kc)
    throw DataError("checkpoint: alpha length disagrees with meta.kc");
  for (auto& [id, rec] : pm) {
    if (rec.comps.size() != rec.points.size())
      throw DataError("checkpoint: pseudo-mask components incomplete for " + id);
    if (rec.comps.empty()) throw DataError("checkpoint: pseudo-mask entry empty for " + id);
    int h = rec.comps.begin()->second.dim(0);
    int w = rec.comps.begin()->second.dim(1);
    std::vector<BinaryMask> comps;
    for (auto& [p, t] : rec.comps) comps.push_back(BinaryMask::from_tensor_threshold(t, 0.5));
    c.pm.restore(id, h, w, rec.points, std::move(comps), rec.epoch);
  }
  return c;
}

// Copy stored tensors into live parameters by name; every destination must
// be present with a matching shape.
inline void apply_params(const std::map<std::string, Tensor>& src,
                         const std::vector<std::pair<std::string, ad::Value>>& dst) {
  for (const auto& [name, v] : dst) {
    auto it = src.find(name);
    if (it == src.end()) throw DataError("checkpoint: missing parameter " + name);
    if (it->second.shape() != v.val().shape())
      throw DataError("checkpoint: shape mismatch for parameter " + name);
    v.val() = it->second;
  }
}

// Parameters-only view for evaluation: student weights, nothing else.
inline std::map<std::string, Tensor> load_student_params(const std::string& path) {
  std::map<std::string, Tensor> m;
  try {
    m = vfm::read_tensor_archive(path);
  } catch (const ProviderError& e) {
    throw DataError("corrupt checkpoint " + path + ": " + e.what());
  }
  std::map<std::string, Tensor> out;
  for (const auto& [key, t] : m)
    if (key.rfind("theta.", 0) == 0) out[key.substr(6)] = t;
  if (out.empty()) throw DataError("checkpoint: no student parameters in " + path);
  return out;
}

}  // namespace istdkd::ckpt
