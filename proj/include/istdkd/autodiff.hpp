#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "istdkd/errors.hpp"
#include "istdkd/tensor.hpp"

namespace istdkd::ad {

// Reverse-mode autodiff over Tensor. The graph is built eagerly: every op
// returns a node holding its value plus a closure that scatters the node's
// gradient into its parents. backward() zeroes the gradients of the
// subgraph reachable from the root before accumulating, so several losses
// can share one forward graph and be differentiated one after another.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;
  bool req = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> back;
};

inline thread_local bool g_grad_enabled = true;

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
  ~NoGradGuard() { g_grad_enabled = prev; }
};

class Value {
 public:
  Value() = default;
  explicit Value(NodePtr n) : n_(std::move(n)) {}

  static Value constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->req = false;
    return Value(n);
  }

  // Trainable leaf: participates in gradients even when created while
  // grad mode is off.
  static Value param(Tensor t) {
    auto n = std::make_shared<Node>();
    n->val = std::move(t);
    n->req = true;
    return Value(n);
  }

  // Shared-handle semantics: a const Value still exposes the node's
  // mutable tensors, like a const shared_ptr.
  bool defined() const { return n_ != nullptr; }
  Node* get() const { return n_.get(); }
  const NodePtr& node() const { return n_; }
  Tensor& val() const { return n_->val; }
  Tensor& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->req; }

 private:
  NodePtr n_;
};

namespace detail {

inline bool track(std::initializer_list<const Value*> parents) {
  if (!g_grad_enabled) return false;
  for (const Value* p : parents)
    if ((*p).requires_grad()) return true;
  return false;
}

inline Value make(Tensor val, std::initializer_list<const Value*> parents,
                  std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  if (track(parents)) {
    n->req = true;
    n->parents.reserve(parents.size());
    for (const Value* p : parents) n->parents.push_back(p->node());
    n->back = std::move(back);
  }
  return Value(n);
}

inline void topo(Node* root, std::vector<Node*>& order) {
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->req && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
}

}  // namespace detail

// Root must be a single-element tensor. Accumulates into .grad of every
// reachable node that requires grad.
inline void backward(const Value& root) {
  if (root.val().size() != 1) throw ShapeError("backward root must be scalar");
  if (!root.requires_grad()) throw StateError("backward on a graph with no tracked parameters");
  std::vector<Node*> order;
  detail::topo(root.get(), order);
  for (Node* n : order) {
    n->grad = Tensor(n->val.shape());
  }
  root.get()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->back) n->back(*n);
  }
}

inline void check_finite(const Value& v, const char* what) {
  if (!v.val().all_finite()) throw NumericError(std::string(what) + ": non-finite value");
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

inline Value add(const Value& a, const Value& b) {
  require_same_shape(a.val(), b.val(), "add");
  Tensor out = a.val();
  const double* bp = b.val().data();
  double* op = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) op[i] += bp[i];
  return detail::make(std::move(out), {&a, &b}, [a, b](Node& self) {
    const double* g = self.grad.data();
    if (a.requires_grad()) {
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      double* gb = b.grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Value sub(const Value& a, const Value& b) {
  require_same_shape(a.val(), b.val(), "sub");
  Tensor out = a.val();
  const double* bp = b.val().data();
  double* op = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) op[i] -= bp[i];
  return detail::make(std::move(out), {&a, &b}, [a, b](Node& self) {
    const double* g = self.grad.data();
    if (a.requires_grad()) {
      double* ga = a.grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      double* gb = b.grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Value mul(const Value& a, const Value& b) {
  require_same_shape(a.val(), b.val(), "mul");
  Tensor out = a.val();
  const double* bp = b.val().data();
  double* op = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) op[i] *= bp[i];
  return detail::make(std::move(out), {&a, &b}, [a, b](Node& self) {
    const double* g = self.grad.data();
    if (a.requires_grad()) {
      double* ga = a.grad().data();
      const double* bv = b.val().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      double* gb = b.grad().data();
      const double* av = a.val().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Value add_scalar(const Value& a, double c) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c;
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
  });
}

inline Value mul_scalar(const Value& a, double c) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c;
  return detail::make(std::move(out), {&a}, [a, c](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * c;
  });
}

inline Value relu(const Value& a) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    const double* av = a.val().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (av[i] > 0.0) ga[i] += g[i];
  });
}

inline Value vtanh(const Value& a) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    const double* ov = self.val.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * (1.0 - ov[i] * ov[i]);
  });
}

inline double sigmoid_s(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

inline Value sigmoid(const Value& a) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_s(out[i]);
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    const double* ov = self.val.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * ov[i] * (1.0 - ov[i]);
  });
}

inline Value vexp(const Value& a) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(out[i]);
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    const double* ov = self.val.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * ov[i];
  });
}

// Value copy that is cut off from the graph. Gradients never flow through.
inline Value detach(const Value& a) { return Value::constant(a.val()); }

inline Value sum_all(const Value& a) {
  Tensor out = Tensor::scalar(a.val().sum());
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double g = self.grad[0];
    double* ga = a.grad().data();
    for (std::size_t i = 0; i < a.val().size(); ++i) ga[i] += g;
  });
}

inline Value mean_all(const Value& a) {
  double inv = 1.0 / static_cast<double>(a.val().size());
  Tensor out = Tensor::scalar(a.val().sum() * inv);
  return detail::make(std::move(out), {&a}, [a, inv](Node& self) {
    double g = self.grad[0] * inv;
    double* ga = a.grad().data();
    for (std::size_t i = 0; i < a.val().size(); ++i) ga[i] += g;
  });
}

inline Value l1norm(const Value& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.val().size(); ++i) s += std::abs(a.val()[i]);
  return detail::make(Tensor::scalar(s), {&a}, [a](Node& self) {
    double g = self.grad[0];
    double* ga = a.grad().data();
    const double* av = a.val().data();
    for (std::size_t i = 0; i < a.val().size(); ++i) {
      if (av[i] > 0.0)
        ga[i] += g;
      else if (av[i] < 0.0)
        ga[i] -= g;
    }
  });
}

// y = a * s where s is a single-element node (broadcast scalar).
inline Value mul_scalar_node(const Value& a, const Value& s) {
  if (s.val().size() != 1) throw ShapeError("mul_scalar_node: scalar operand must have size 1");
  Tensor out = a.val();
  double sv = s.val()[0];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= sv;
  return detail::make(std::move(out), {&a, &s}, [a, s](Node& self) {
    const double* g = self.grad.data();
    if (a.requires_grad()) {
      double* ga = a.grad().data();
      double sv = s.val()[0];
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i] * sv;
    }
    if (s.requires_grad()) {
      const double* av = a.val().data();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += g[i] * av[i];
      s.grad()[0] += acc;
    }
  });
}

inline Value recip(const Value& a) {
  Tensor out = a.val();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / out[i];
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    const double* ov = self.val.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] -= g[i] * ov[i] * ov[i];
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Value reshape(const Value& a, std::vector<int> shape) {
  Tensor out(shape);
  if (out.size() != a.val().size()) throw ShapeError("reshape: size mismatch");
  out.vec() = a.val().vec();
  return detail::make(std::move(out), {&a}, [a](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += g[i];
  });
}

inline Value slice_cols(const Value& a, int c0, int c1) {
  const Tensor& x = a.val();
  if (x.rank() != 2) throw ShapeError("slice_cols: rank-2 input required");
  int rows = x.dim(0), cols = x.dim(1);
  if (c0 < 0 || c1 > cols || c0 >= c1) throw ShapeError("slice_cols: bad column range");
  Tensor out({rows, c1 - c0});
  for (int r = 0; r < rows; ++r)
    for (int c = c0; c < c1; ++c) out.at(r, c - c0) = x.at(r, c);
  return detail::make(std::move(out), {&a}, [a, c0, c1](Node& self) {
    Tensor& ga = a.grad();
    int rows = ga.dim(0);
    for (int r = 0; r < rows; ++r)
      for (int c = c0; c < c1; ++c) ga.at(r, c) += self.grad.at(r, c - c0);
  });
}

inline Value concat_rows(const std::vector<Value>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  int cols = parts[0].val().dim(1);
  int rows = 0;
  for (const Value& p : parts) {
    if (p.val().rank() != 2 || p.val().dim(1) != cols)
      throw ShapeError("concat_rows: column mismatch");
    rows += p.val().dim(0);
  }
  Tensor out({rows, cols});
  int r0 = 0;
  for (const Value& p : parts) {
    const Tensor& x = p.val();
    for (int r = 0; r < x.dim(0); ++r)
      for (int c = 0; c < cols; ++c) out.at(r0 + r, c) = x.at(r, c);
    r0 += x.dim(0);
  }
  bool any = false;
  if (g_grad_enabled)
    for (const Value& p : parts)
      if (p.requires_grad()) any = true;
  auto n = std::make_shared<Node>();
  n->val = std::move(out);
  if (any) {
    n->req = true;
    for (const Value& p : parts) n->parents.push_back(p.node());
    std::vector<Value> kept = parts;
    n->back = [kept, cols](Node& self) {
      int r0 = 0;
      for (const Value& p : kept) {
        int pr = p.val().dim(0);
        if (p.requires_grad()) {
          Tensor& g = p.grad();
          for (int r = 0; r < pr; ++r)
            for (int c = 0; c < cols; ++c) g.at(r, c) += self.grad.at(r0 + r, c);
        }
        r0 += pr;
      }
    };
  }
  return Value(n);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline void matmul_acc(const double* A, const double* B, double* C, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* a = A + static_cast<std::size_t>(i) * k;
    double* c = C + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = a[p];
      const double* b = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

inline Value matmul(const Value& a, const Value& b) {
  const Tensor& A = a.val();
  const Tensor& B = b.val();
  if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
    throw ShapeError("matmul: incompatible shapes " + A.shape_str() + " x " + B.shape_str());
  int m = A.dim(0), k = A.dim(1), n = B.dim(1);
  Tensor out({m, n});
  matmul_acc(A.data(), B.data(), out.data(), m, k, n);
  return detail::make(std::move(out), {&a, &b}, [a, b, m, k, n](Node& self) {
    const double* G = self.grad.data();
    if (a.requires_grad()) {
      // gA += G * B^T
      double* gA = a.grad().data();
      const double* B_ = b.val().data();
      for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
          double acc = 0.0;
          const double* g = G + static_cast<std::size_t>(i) * n;
          const double* br = B_ + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) acc += g[j] * br[j];
          gA[static_cast<std::size_t>(i) * k + p] += acc;
        }
    }
    if (b.requires_grad()) {
      // gB += A^T * G
      double* gB = b.grad().data();
      const double* A_ = a.val().data();
      for (int p = 0; p < k; ++p)
        for (int i = 0; i < m; ++i) {
          double av = A_[static_cast<std::size_t>(i) * k + p];
          const double* g = G + static_cast<std::size_t>(i) * n;
          double* gb = gB + static_cast<std::size_t>(p) * n;
          for (int j = 0; j < n; ++j) gb[j] += av * g[j];
        }
    }
  });
}

// x: (B, n) plus row vector b: (n), broadcast over rows.
inline Value add_rowvec(const Value& x, const Value& b) {
  const Tensor& X = x.val();
  if (X.rank() != 2 || b.val().rank() != 1 || b.val().dim(0) != X.dim(1))
    throw ShapeError("add_rowvec: shape mismatch");
  Tensor out = X;
  int rows = X.dim(0), cols = X.dim(1);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) += b.val().at(c);
  return detail::make(std::move(out), {&x, &b}, [x, b, rows, cols](Node& self) {
    if (x.requires_grad()) {
      double* gx = x.grad().data();
      const double* g = self.grad.data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += g[i];
    }
    if (b.requires_grad()) {
      for (int c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r) acc += self.grad.at(r, c);
        b.grad().at(c) += acc;
      }
    }
  });
}

// x: (B, C) times vector u: (C), broadcast over rows.
inline Value row_mul_vec(const Value& x, const Value& u) {
  const Tensor& X = x.val();
  if (X.rank() != 2 || u.val().rank() != 1 || u.val().dim(0) != X.dim(1))
    throw ShapeError("row_mul_vec: shape mismatch");
  int rows = X.dim(0), cols = X.dim(1);
  Tensor out = X;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out.at(r, c) *= u.val().at(c);
  return detail::make(std::move(out), {&x, &u}, [x, u, rows, cols](Node& self) {
    if (x.requires_grad()) {
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) x.grad().at(r, c) += self.grad.at(r, c) * u.val().at(c);
    }
    if (u.requires_grad()) {
      for (int c = 0; c < cols; ++c) {
        double acc = 0.0;
        for (int r = 0; r < rows; ++r) acc += self.grad.at(r, c) * x.val().at(r, c);
        u.grad().at(c) += acc;
      }
    }
  });
}

// Numerically stable softmax over a rank-1 tensor.
inline Value softmax_vec(const Value& a) {
  const Tensor& x = a.val();
  if (x.rank() != 1) throw ShapeError("softmax_vec: rank-1 input required");
  int n = x.dim(0);
  Tensor out({n});
  double mx = x.max();
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    out.at(i) = std::exp(x.at(i) - mx);
    z += out.at(i);
  }
  for (int i = 0; i < n; ++i) out.at(i) /= z;
  return detail::make(std::move(out), {&a}, [a, n](Node& self) {
    const double* s = self.val.data();
    const double* g = self.grad.data();
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += g[i] * s[i];
    double* ga = a.grad().data();
    for (int i = 0; i < n; ++i) ga[i] += s[i] * (g[i] - dot);
  });
}

// out[i] = a[idx[i]] for a rank-1 tensor a.
inline Value gather(const Value& a, std::vector<int> idx) {
  const Tensor& x = a.val();
  if (x.rank() != 1) throw ShapeError("gather: rank-1 input required");
  Tensor out({static_cast<int>(idx.size())});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    int j = idx[i];
    if (j < 0 || j >= x.dim(0)) throw ShapeError("gather: index out of range");
    out[i] = x.at(j);
  }
  return detail::make(std::move(out), {&a}, [a, idx](Node& self) {
    double* ga = a.grad().data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < idx.size(); ++i) ga[idx[i]] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Spatial ops (NCHW)
// ---------------------------------------------------------------------------

namespace detail {

// Fused 3x3 tap accumulation for one channel pair. Visits each output row
// once instead of nine times; the per-element tap order matches the generic
// kernel's (ky, kx) pass order, so results are bitwise identical to it.
inline void conv3x3_rows_acc(const double* __restrict__ x, const double t[9],
                             double* __restrict__ y, int H, int W) {
  for (int yy = 0; yy < H; ++yy) {
    const double* r0 = yy > 0 ? x + static_cast<std::size_t>(yy - 1) * W : nullptr;
    const double* r1 = x + static_cast<std::size_t>(yy) * W;
    const double* r2 = yy + 1 < H ? x + static_cast<std::size_t>(yy + 1) * W : nullptr;
    double* o = y + static_cast<std::size_t>(yy) * W;
    if (W == 1) {
      if (r0) o[0] += t[1] * r0[0];
      o[0] += t[4] * r1[0];
      if (r2) o[0] += t[7] * r2[0];
      continue;
    }
    {
      double a = o[0];
      if (r0) { a += t[1] * r0[0]; a += t[2] * r0[1]; }
      a += t[4] * r1[0];
      a += t[5] * r1[1];
      if (r2) { a += t[7] * r2[0]; a += t[8] * r2[1]; }
      o[0] = a;
    }
    if (r0 && r2) {
      for (int xx = 1; xx + 1 < W; ++xx) {
        double a = o[xx];
        a += t[0] * r0[xx - 1]; a += t[1] * r0[xx]; a += t[2] * r0[xx + 1];
        a += t[3] * r1[xx - 1]; a += t[4] * r1[xx]; a += t[5] * r1[xx + 1];
        a += t[6] * r2[xx - 1]; a += t[7] * r2[xx]; a += t[8] * r2[xx + 1];
        o[xx] = a;
      }
    } else {
      for (int xx = 1; xx + 1 < W; ++xx) {
        double a = o[xx];
        if (r0) { a += t[0] * r0[xx - 1]; a += t[1] * r0[xx]; a += t[2] * r0[xx + 1]; }
        a += t[3] * r1[xx - 1]; a += t[4] * r1[xx]; a += t[5] * r1[xx + 1];
        if (r2) { a += t[6] * r2[xx - 1]; a += t[7] * r2[xx]; a += t[8] * r2[xx + 1]; }
        o[xx] = a;
      }
    }
    {
      double a = o[W - 1];
      if (r0) { a += t[0] * r0[W - 2]; a += t[1] * r0[W - 1]; }
      a += t[3] * r1[W - 2];
      a += t[4] * r1[W - 1];
      if (r2) { a += t[6] * r2[W - 2]; a += t[7] * r2[W - 1]; }
      o[W - 1] = a;
    }
  }
}

// Correlation with zero padding keeping the spatial size; shared by the
// forward pass and the input-gradient pass.
inline void conv_same_acc(const double* x, const double* w, double* y, int ci_n, int co_n, int H,
                          int W, int kh, int kw, bool flip) {
  int ph = kh / 2, pw = kw / 2;
  for (int co = 0; co < co_n; ++co) {
    double* yp = y + static_cast<std::size_t>(co) * H * W;
    for (int ci = 0; ci < ci_n; ++ci) {
      const double* xp = x + static_cast<std::size_t>(ci) * H * W;
      const double* wp = w + (static_cast<std::size_t>(co) * ci_n + ci) * kh * kw;
      if (kh == 3 && kw == 3) {
        double t[9];
        for (int k = 0; k < 9; ++k) t[k] = flip ? wp[8 - k] : wp[k];
        conv3x3_rows_acc(xp, t, yp, H, W);
        continue;
      }
      for (int ky = 0; ky < kh; ++ky) {
        for (int kx = 0; kx < kw; ++kx) {
          double wk = flip ? wp[(kh - 1 - ky) * kw + (kw - 1 - kx)] : wp[ky * kw + kx];
          int dy = ky - ph, dx = kx - pw;
          for (int yy = 0; yy < H; ++yy) {
            int sy = yy + dy;
            if (sy < 0 || sy >= H) continue;
            const double* row = xp + static_cast<std::size_t>(sy) * W;
            double* orow = yp + static_cast<std::size_t>(yy) * W;
            int x0 = dx < 0 ? -dx : 0;
            int x1 = dx > 0 ? W - dx : W;
            for (int xx = x0; xx < x1; ++xx) orow[xx] += wk * row[xx + dx];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Same-size convolution, stride 1, zero padding. x: (N,Ci,H,W),
// w: (Co,Ci,kh,kw) with odd kh,kw, b: (Co).
inline Value conv2d_same(const Value& x, const Value& w, const Value& b) {
  const Tensor& X = x.val();
  const Tensor& W_ = w.val();
  if (X.rank() != 4 || W_.rank() != 4) throw ShapeError("conv2d_same: rank-4 inputs required");
  int N = X.dim(0), Ci = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  int Co = W_.dim(0), kh = W_.dim(2), kw = W_.dim(3);
  if (W_.dim(1) != Ci) throw ShapeError("conv2d_same: channel mismatch");
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d_same: kernel dims must be odd");
  if (b.val().rank() != 1 || b.val().dim(0) != Co) throw ShapeError("conv2d_same: bias shape");
  Tensor out({N, Co, H, Wd});
  for (int n = 0; n < N; ++n) {
    double* yp = out.data() + static_cast<std::size_t>(n) * Co * H * Wd;
    for (int co = 0; co < Co; ++co) {
      double bv = b.val().at(co);
      double* c = yp + static_cast<std::size_t>(co) * H * Wd;
      for (int i = 0; i < H * Wd; ++i) c[i] = bv;
    }
    detail::conv_same_acc(X.data() + static_cast<std::size_t>(n) * Ci * H * Wd, W_.data(), yp, Ci,
                          Co, H, Wd, kh, kw, false);
  }
  return detail::make(std::move(out), {&x, &w, &b}, [x, w, b, N, Ci, H, Wd, Co, kh, kw](Node& self) {
    const Tensor& G = self.grad;
    int ph = kh / 2, pw = kw / 2;
    if (b.requires_grad()) {
      double* gb = b.grad().data();
      for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
          const double* g = G.data() + (static_cast<std::size_t>(n) * Co + co) * H * Wd;
          double acc = 0.0;
          for (int i = 0; i < H * Wd; ++i) acc += g[i];
          gb[co] += acc;
        }
    }
    if (w.requires_grad()) {
      double* gw = w.grad().data();
      for (int n = 0; n < N; ++n) {
        const double* xb = x.val().data() + static_cast<std::size_t>(n) * Ci * H * Wd;
        const double* gb_ = G.data() + static_cast<std::size_t>(n) * Co * H * Wd;
        for (int co = 0; co < Co; ++co) {
          const double* g = gb_ + static_cast<std::size_t>(co) * H * Wd;
          for (int ci = 0; ci < Ci; ++ci) {
            const double* xp = xb + static_cast<std::size_t>(ci) * H * Wd;
            double* wp = gw + (static_cast<std::size_t>(co) * Ci + ci) * kh * kw;
            if (kh == 3 && kw == 3) {
              // One pass over the gradient image with nine running tap sums;
              // per-tap element order matches the generic loop's.
              double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
              for (int yy = 0; yy < H; ++yy) {
                const double* grow = g + static_cast<std::size_t>(yy) * Wd;
                const double* x0r = yy > 0 ? xp + static_cast<std::size_t>(yy - 1) * Wd : nullptr;
                const double* x1r = xp + static_cast<std::size_t>(yy) * Wd;
                const double* x2r = yy + 1 < H ? xp + static_cast<std::size_t>(yy + 1) * Wd : nullptr;
                {
                  double gv = grow[0];
                  if (x0r) { acc[1] += gv * x0r[0]; if (Wd > 1) acc[2] += gv * x0r[1]; }
                  acc[4] += gv * x1r[0];
                  if (Wd > 1) acc[5] += gv * x1r[1];
                  if (x2r) { acc[7] += gv * x2r[0]; if (Wd > 1) acc[8] += gv * x2r[1]; }
                }
                for (int xx = 1; xx + 1 < Wd; ++xx) {
                  double gv = grow[xx];
                  if (x0r) { acc[0] += gv * x0r[xx - 1]; acc[1] += gv * x0r[xx]; acc[2] += gv * x0r[xx + 1]; }
                  acc[3] += gv * x1r[xx - 1];
                  acc[4] += gv * x1r[xx];
                  acc[5] += gv * x1r[xx + 1];
                  if (x2r) { acc[6] += gv * x2r[xx - 1]; acc[7] += gv * x2r[xx]; acc[8] += gv * x2r[xx + 1]; }
                }
                if (Wd > 1) {
                  double gv = grow[Wd - 1];
                  if (x0r) { acc[0] += gv * x0r[Wd - 2]; acc[1] += gv * x0r[Wd - 1]; }
                  acc[3] += gv * x1r[Wd - 2];
                  acc[4] += gv * x1r[Wd - 1];
                  if (x2r) { acc[6] += gv * x2r[Wd - 2]; acc[7] += gv * x2r[Wd - 1]; }
                }
              }
              for (int k = 0; k < 9; ++k) wp[k] += acc[k];
              continue;
            }
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                int dy = ky - ph, dx = kx - pw;
                double acc = 0.0;
                for (int yy = 0; yy < H; ++yy) {
                  int sy = yy + dy;
                  if (sy < 0 || sy >= H) continue;
                  const double* row = xp + static_cast<std::size_t>(sy) * Wd;
                  const double* grow = g + static_cast<std::size_t>(yy) * Wd;
                  int x0 = dx < 0 ? -dx : 0;
                  int x1 = dx > 0 ? Wd - dx : Wd;
                  for (int xx = x0; xx < x1; ++xx) acc += grow[xx] * row[xx + dx];
                }
                wp[ky * kw + kx] += acc;
              }
          }
        }
      }
    }
    if (x.requires_grad()) {
      // grad_x = full correlation of G with the flipped, channel-transposed kernel.
      const Tensor& W_ = w.val();
      Tensor wt({Ci, Co, kh, kw});
      for (int co = 0; co < Co; ++co)
        for (int ci = 0; ci < Ci; ++ci)
          for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) wt.at(ci, co, ky, kx) = W_.at(co, ci, ky, kx);
      for (int n = 0; n < N; ++n) {
        double* gx = x.grad().data() + static_cast<std::size_t>(n) * Ci * H * Wd;
        const double* g = G.data() + static_cast<std::size_t>(n) * Co * H * Wd;
        detail::conv_same_acc(g, wt.data(), gx, Co, Ci, H, Wd, kh, kw, true);
      }
    }
  });
}

// 2x2 max pooling, stride 2. Requires even H and W.
inline Value maxpool2(const Value& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeError("maxpool2: rank-4 input required");
  int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  if (H % 2 || W % 2) throw ShapeError("maxpool2: spatial dims must be even");
  int Ho = H / 2, Wo = W / 2;
  Tensor out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::int32_t>>(out.size());
  std::size_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* plane = X.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
      for (int y = 0; y < Ho; ++y)
        for (int xx = 0; xx < Wo; ++xx) {
          int base = 2 * y * W + 2 * xx;
          int best = base;
          double bv = plane[base];
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              int i = base + dy * W + dx;
              if (plane[i] > bv) {
                bv = plane[i];
                best = i;
              }
            }
          out[o] = bv;
          (*argmax)[o] = static_cast<std::int32_t>((static_cast<std::size_t>(n) * C + c) * H * W + best);
          ++o;
        }
    }
  return detail::make(std::move(out), {&x}, [x, argmax](Node& self) {
    double* gx = x.grad().data();
    const double* g = self.grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[(*argmax)[i]] += g[i];
  });
}

// Nearest-neighbour 2x upsampling.
inline Value upsample2(const Value& x) {
  const Tensor& X = x.val();
  if (X.rank() != 4) throw ShapeError("upsample2: rank-4 input required");
  int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  Tensor out({N, C, H * 2, W * 2});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const double* p = X.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
      double* q = out.data() + (static_cast<std::size_t>(n) * C + c) * H * W * 4;
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) {
          double v = p[y * W + xx];
          q[(2 * y) * 2 * W + 2 * xx] = v;
          q[(2 * y) * 2 * W + 2 * xx + 1] = v;
          q[(2 * y + 1) * 2 * W + 2 * xx] = v;
          q[(2 * y + 1) * 2 * W + 2 * xx + 1] = v;
        }
    }
  return detail::make(std::move(out), {&x}, [x, N, C, H, W](Node& self) {
    double* gx = x.grad().data();
    const double* g = self.grad.data();
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const double* q = g + (static_cast<std::size_t>(n) * C + c) * H * W * 4;
        double* p = gx + (static_cast<std::size_t>(n) * C + c) * H * W;
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx)
            p[y * W + xx] += q[(2 * y) * 2 * W + 2 * xx] + q[(2 * y) * 2 * W + 2 * xx + 1] +
                             q[(2 * y + 1) * 2 * W + 2 * xx] + q[(2 * y + 1) * 2 * W + 2 * xx + 1];
      }
  });
}

// f: (N,C,H,W) scaled per channel by s: (N,C).
inline Value scale_channels(const Value& f, const Value& s) {
  const Tensor& F = f.val();
  const Tensor& S = s.val();
  if (F.rank() != 4 || S.rank() != 2 || S.dim(0) != F.dim(0) || S.dim(1) != F.dim(1))
    throw ShapeError("scale_channels: shape mismatch");
  int N = F.dim(0), C = F.dim(1), HW = F.dim(2) * F.dim(3);
  Tensor out = F;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double sv = S.at(n, c);
      double* p = out.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) p[i] *= sv;
    }
  return detail::make(std::move(out), {&f, &s}, [f, s, N, C, HW](Node& self) {
    const double* g = self.grad.data();
    if (f.requires_grad()) {
      double* gf = f.grad().data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          double sv = s.val().at(n, c);
          std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
          for (int i = 0; i < HW; ++i) gf[base + i] += g[base + i] * sv;
        }
    }
    if (s.requires_grad()) {
      const double* fv = f.val().data();
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
          double acc = 0.0;
          for (int i = 0; i < HW; ++i) acc += g[base + i] * fv[base + i];
          s.grad().at(n, c) += acc;
        }
    }
  });
}

// f: (N,C,H,W) shifted per channel by b: (N,C).
inline Value shift_channels(const Value& f, const Value& b) {
  const Tensor& F = f.val();
  const Tensor& B = b.val();
  if (F.rank() != 4 || B.rank() != 2 || B.dim(0) != F.dim(0) || B.dim(1) != F.dim(1))
    throw ShapeError("shift_channels: shape mismatch");
  int N = F.dim(0), C = F.dim(1), HW = F.dim(2) * F.dim(3);
  Tensor out = F;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      double bv = B.at(n, c);
      double* p = out.data() + (static_cast<std::size_t>(n) * C + c) * HW;
      for (int i = 0; i < HW; ++i) p[i] += bv;
    }
  return detail::make(std::move(out), {&f, &b}, [f, b, N, C, HW](Node& self) {
    const double* g = self.grad.data();
    if (f.requires_grad()) {
      double* gf = f.grad().data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gf[i] += g[i];
    }
    if (b.requires_grad()) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
          double acc = 0.0;
          for (int i = 0; i < HW; ++i) acc += g[base + i];
          b.grad().at(n, c) += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Fused per-sample losses. Inputs are (N,1,H,W); outputs are (N).
// ---------------------------------------------------------------------------

inline constexpr double kProbClamp = 1e-7;

// Mean binary cross entropy per sample. p holds probabilities, y holds
// {0,1} targets; p is clamped to [kProbClamp, 1-kProbClamp].
inline Value bce_per_sample(const Value& p, const Value& y) {
  const Tensor& P = p.val();
  const Tensor& Y = y.val();
  require_same_shape(P, Y, "bce_per_sample");
  if (P.rank() != 4) throw ShapeError("bce_per_sample: rank-4 input required");
  int N = P.dim(0);
  std::size_t per = P.size() / static_cast<std::size_t>(N);
  Tensor out({N});
  for (int n = 0; n < N; ++n) {
    const double* pp = P.data() + n * per;
    const double* yy = Y.data() + n * per;
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      double pc = std::min(std::max(pp[i], kProbClamp), 1.0 - kProbClamp);
      acc -= yy[i] * std::log(pc) + (1.0 - yy[i]) * std::log(1.0 - pc);
    }
    out.at(n) = acc / static_cast<double>(per);
  }
  return detail::make(std::move(out), {&p, &y}, [p, y, N, per](Node& self) {
    if (!p.requires_grad()) return;
    double* gp = p.grad().data();
    const double* pp = p.val().data();
    const double* yy = y.val().data();
    const double* g = self.grad.data();
    double inv = 1.0 / static_cast<double>(per);
    for (int n = 0; n < N; ++n) {
      double gn = g[n] * inv;
      for (std::size_t i = 0; i < per; ++i) {
        std::size_t j = n * per + i;
        double pv = pp[j];
        if (pv <= kProbClamp || pv >= 1.0 - kProbClamp) continue;
        gp[j] += gn * (pv - yy[j]) / (pv * (1.0 - pv));
      }
    }
  });
}

// Mean squared difference of temperature-scaled sigmoids, per sample.
// za, zb hold logits.
inline Value kd_per_sample(const Value& za, const Value& zb, double tau) {
  const Tensor& A = za.val();
  const Tensor& B = zb.val();
  require_same_shape(A, B, "kd_per_sample");
  if (A.rank() != 4) throw ShapeError("kd_per_sample: rank-4 input required");
  if (tau <= 0.0) throw DomainError("kd_per_sample: tau must be positive");
  int N = A.dim(0);
  std::size_t per = A.size() / static_cast<std::size_t>(N);
  Tensor out({N});
  for (int n = 0; n < N; ++n) {
    const double* aa = A.data() + n * per;
    const double* bb = B.data() + n * per;
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      double d = sigmoid_s(aa[i] / tau) - sigmoid_s(bb[i] / tau);
      acc += d * d;
    }
    out.at(n) = acc / static_cast<double>(per);
  }
  return detail::make(std::move(out), {&za, &zb}, [za, zb, tau, N, per](Node& self) {
    const double* aa = za.val().data();
    const double* bb = zb.val().data();
    const double* g = self.grad.data();
    double inv = 1.0 / static_cast<double>(per);
    for (int n = 0; n < N; ++n) {
      double gn = g[n] * inv * 2.0 / tau;
      for (std::size_t i = 0; i < per; ++i) {
        std::size_t j = n * per + i;
        double qa = sigmoid_s(aa[j] / tau);
        double qb = sigmoid_s(bb[j] / tau);
        double d = qa - qb;
        if (za.requires_grad()) za.grad().data()[j] += gn * d * qa * (1.0 - qa);
        if (zb.requires_grad()) zb.grad().data()[j] -= gn * d * qb * (1.0 - qb);
      }
    }
  });
}

}  // namespace istdkd::ad
