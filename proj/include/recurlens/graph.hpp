#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "recurlens/error.hpp"
#include "recurlens/tensor.hpp"

namespace recurlens {

class Graph;

/// Handle to a value recorded on a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of executed primitive ops. Nodes are appended in execution order, so
/// every node's inputs precede it and backward simply walks the tape in reverse.
///
/// A graph built with `grad_enabled = false` records values only; it is what the
/// inference paths use. Graphs are confined to one thread.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, Var self)>;

  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Binds an externally owned parameter. When it requires grad, backward()
  /// accumulates into `t.grad()`. The tensor must outlive the graph.
  Var param(Tensor& t) {
    Node n;
    n.external = &t;
    n.bound = grad_enabled_ && t.requires_grad() ? &t : nullptr;
    n.requires_grad = n.bound != nullptr;
    return push(std::move(n));
  }

  /// Read-only reference to an external tensor; never receives gradient.
  Var constant_ref(const Tensor& t) {
    Node n;
    n.external = &t;
    return push(std::move(n));
  }
  Var constant_ref(Tensor&&) = delete;

  /// Graph-owned input. With `requires_grad` its gradient is readable via grad().
  Var input(Tensor t, bool requires_grad = false) {
    Node n;
    n.owned = std::move(t);
    n.requires_grad = grad_enabled_ && requires_grad;
    return push(std::move(n));
  }

  const Tensor& value(Var v) const { return node(v).value(); }

  /// Gradient of the last backward() w.r.t. `v`, or nullptr when none flowed.
  const std::vector<double>* grad(Var v) const {
    const Node& n = node(v);
    return n.grad.empty() ? nullptr : &n.grad;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Appends a node computed by a primitive op. `backward` is dropped when no
  /// input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
    Node n;
    n.owned = std::move(value);
    if (grad_enabled_) {
      for (const Var& in : inputs) {
        check_owner(in);
        if (nodes_[in.id_].requires_grad) n.requires_grad = true;
      }
      if (n.requires_grad) n.backward = std::move(backward);
    }
    return push(std::move(n));
  }

  /// Upstream gradient of a node, valid inside a backward callback.
  std::span<const double> upstream(Var v) const { return node(v).grad; }

  /// Mutable gradient slot of an input, or an empty span when the input does
  /// not require grad.
  std::span<double> accum(Var v) {
    Node& n = nodes_.at(v.id_);
    if (!n.requires_grad) return {};
    if (n.grad.empty()) n.grad.assign(n.value().numel(), 0.0);
    return n.grad;
  }

  /// Reverse-mode sweep from a scalar loss.
  void backward(Var loss) {
    check_owner(loss);
    if (!grad_enabled_) throw ContractError("backward() on a graph recorded without gradients");
    if (backward_done_) throw ContractError("backward() called twice without reset()");
    const Node& l = nodes_.at(loss.id_);
    if (l.value().numel() != 1) {
      throw ContractError("backward() needs a scalar loss, got shape " + shape_str(l.value().shape()));
    }
    backward_done_ = true;
    order_.clear();
    if (!l.requires_grad) return;
    nodes_[loss.id_].grad.assign(1, 1.0);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty()) continue;
      order_.push_back(i);
      if (n.backward) n.backward(*this, Var(this, i));
    }
    for (Node& n : nodes_) {
      if (!n.bound || n.grad.empty()) continue;
      auto& g = n.bound->ensure_grad();
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += n.grad[j];
    }
  }

  /// Clears node gradients so backward() may run again.
  void reset() {
    for (Node& n : nodes_) n.grad.clear();
    backward_done_ = false;
    order_.clear();
  }

  /// Node ids visited by the last backward(), in visiting order.
  const std::vector<std::size_t>& backward_order() const noexcept { return order_; }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Tensor* bound = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    BackwardFn backward;

    const Tensor& value() const { return external ? *external : owned; }
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  void check_owner(Var v) const {
    if (v.graph_ != this || v.id_ >= nodes_.size()) throw ContractError("Var belongs to another graph");
  }

  const Node& node(Var v) const {
    check_owner(v);
    return nodes_[v.id_];
  }

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<std::size_t> order_;
};

inline const Tensor& Var::value() const {
  if (!graph_) throw ContractError("empty Var");
  return graph_->value(*this);
}

namespace ops {

namespace detail {

inline void require_rank2(const Tensor& t, const char* op, const char* arg) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + arg + " must be 2-D, got " + shape_str(t.shape()));
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
  }
}

inline void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite()) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

/// a[m×k] · b[k×n] → [m×n]
inline Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "matmul", "a");
  detail::require_rank2(bv, "matmul", "b");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  Tensor out(Shape{m, n});
  kernels::matmul(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  return a.graph()->record(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, Var self) {
    const auto up = g.upstream(self);
    if (auto da = g.accum(a); !da.empty())
      kernels::matmul_grad_a(up.data(), b.value().data().data(), da.data(), m, k, n);
    if (auto db = g.accum(b); !db.empty())
      kernels::matmul_grad_b(a.value().data().data(), up.data(), db.data(), m, k, n);
  });
}

inline Var add(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  out.set_requires_grad(false);
  out.clear_grad();
  const auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  return a.graph()->record(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const auto up = g.upstream(self);
    for (Var in : {a, b}) {
      if (auto d = g.accum(in); !d.empty())
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += up[i];
    }
  });
}

/// x[L×n] + bias[n] on every row.
inline Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  detail::require_rank2(xv, "add_bias", "x");
  const std::size_t rows = xv.dim(0), n = xv.dim(1);
  if (bv.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not match " +
                         shape_str(xv.shape()));
  }
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  return x.graph()->record(std::move(out), {x, bias}, [x, bias, rows, n](Graph& g, Var self) {
    const auto up = g.upstream(self);
    if (auto dx = g.accum(x); !dx.empty())
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up[i];
    if (auto db = g.accum(bias); !db.empty())
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) db[j] += up[i * n + j];
  });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
  detail::require_same_shape(a.value(), b.value(), "mul");
  const auto ad = a.value().data();
  const auto bd = b.value().data();
  Tensor out(a.value().shape());
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * bd[i];
  return a.graph()->record(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const auto up = g.upstream(self);
    const auto av = a.value().data();
    const auto bv = b.value().data();
    if (auto da = g.accum(a); !da.empty())
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += up[i] * bv[i];
    if (auto db = g.accum(b); !db.empty())
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += up[i] * av[i];
  });
}

inline Var scale(Var a, double factor) {
  Tensor out(a.value().shape());
  const auto ad = a.value().data();
  for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] * factor;
  return a.graph()->record(std::move(out), {a}, [a, factor](Graph& g, Var self) {
    const auto up = g.upstream(self);
    if (auto da = g.accum(a); !da.empty())
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += up[i] * factor;
  });
}

/// Sum of all elements → scalar.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.graph()->record(Tensor::scalar(s), {a}, [a](Graph& g, Var self) {
    const double up = g.upstream(self)[0];
    if (auto da = g.accum(a); !da.empty())
      for (double& v : da) v += up;
  });
}

/// Root-mean-square normalization over the last axis with a learned gain.
inline Var rmsnorm(Var x, Var gain, double eps) {
  const Tensor& xv = x.value();
  const Tensor& gv = gain.value();
  if (xv.rank() == 0 || gv.numel() != xv.cols()) {
    throw DimensionError("rmsnorm: gain " + shape_str(gv.shape()) + " does not match input " +
                         shape_str(xv.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("rmsnorm: eps must be positive");
  detail::require_finite(xv, "rmsnorm");
  const std::size_t d = xv.cols();
  const std::size_t rows = xv.numel() / d;
  Tensor out(xv.shape());
  std::vector<double> inv(rows);
  kernels::rmsnorm(xv.data().data(), gv.data().data(), out.data().data(), rows, d, eps, inv.data());
  return x.graph()->record(
      std::move(out), {x, gain}, [x, gain, rows, d, inv = std::move(inv)](Graph& g, Var self) {
        const auto up = g.upstream(self);
        const auto xd = x.value().data();
        const auto gd = gain.value().data();
        auto dx = g.accum(x);
        auto dg = g.accum(gain);
        for (std::size_t i = 0; i < rows; ++i) {
          const double r = inv[i];
          const double* xi = xd.data() + i * d;
          const double* ui = up.data() + i * d;
          if (!dg.empty())
            for (std::size_t j = 0; j < d; ++j) dg[j] += ui[j] * xi[j] * r;
          if (!dx.empty()) {
            // y_j = x_j r g_j with r = (mean(x²)+eps)^-1/2, so
            // dx_j = r (u_j g_j) - x_j r³/d Σ_k u_k g_k x_k
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += ui[j] * gd[j] * xi[j];
            const double c = dot * r * r * r / static_cast<double>(d);
            double* dxi = dx.data() + i * d;
            for (std::size_t j = 0; j < d; ++j) dxi[j] += r * ui[j] * gd[j] - xi[j] * c;
          }
        }
      });
}

/// Exact erf-form GELU.
inline Var gelu(Var x) {
  const auto xd = x.value().data();
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = kernels::gelu(xd[i]);
  return x.graph()->record(std::move(out), {x}, [x](Graph& g, Var self) {
    const auto up = g.upstream(self);
    const auto xv = x.value().data();
    if (auto dx = g.accum(x); !dx.empty())
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += up[i] * kernels::gelu_derivative(xv[i]);
  });
}

inline Var relu(Var x) {
  const auto xd = x.value().data();
  Tensor out(x.value().shape());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  return x.graph()->record(std::move(out), {x}, [x](Graph& g, Var self) {
    const auto up = g.upstream(self);
    const auto xv = x.value().data();
    if (auto dx = g.accum(x); !dx.empty())
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += xv[i] > 0.0 ? up[i] : 0.0;
  });
}

/// Softmax over the last axis, max-subtracted.
inline Var softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  const std::size_t rows = n ? xv.numel() / n : 0;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xi = xv.data().data() + i * n;
    double* yi = out.data().data() + i * n;
    const double mx = *std::max_element(xi, xi + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= z;
  }
  return x.graph()->record(std::move(out), {x}, [x, rows, n](Graph& g, Var self) {
    const auto up = g.upstream(self);
    const auto y = g.value(self).data();
    auto dx = g.accum(x);
    if (dx.empty()) return;
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += up[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) dx[i * n + j] += y[i * n + j] * (up[i * n + j] - dot);
    }
  });
}

/// Rows of `table[V×d]` selected by token id → [L×d].
inline Var embedding(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  detail::require_rank2(tv, "embedding", "table");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  Tensor out(Shape{ids.size(), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] >= vocab) {
      throw InputError("token id " + std::to_string(ids[t]) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data().data() + ids[t] * d, d, out.data().data() + t * d);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  return table.graph()->record(std::move(out), {table}, [table, d, idv = std::move(idv)](Graph& g, Var self) {
    const auto up = g.upstream(self);
    auto dt = g.accum(table);
    for (std::size_t t = 0; t < idv.size(); ++t)
      for (std::size_t j = 0; j < d; ++j) dt[idv[t] * d + j] += up[t * d + j];
  });
}

/// [L×p] ‖ [L×q] → [L×(p+q)] along the feature axis.
inline Var concat_cols(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  detail::require_rank2(av, "concat_cols", "a");
  detail::require_rank2(bv, "concat_cols", "b");
  if (av.dim(0) != bv.dim(0)) {
    throw DimensionError("concat_cols: row counts differ for " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()));
  }
  const std::size_t rows = av.dim(0), p = av.dim(1), q = bv.dim(1);
  Tensor out(Shape{rows, p + q});
  for (std::size_t i = 0; i < rows; ++i) {
    std::copy_n(av.data().data() + i * p, p, out.data().data() + i * (p + q));
    std::copy_n(bv.data().data() + i * q, q, out.data().data() + i * (p + q) + p);
  }
  return a.graph()->record(std::move(out), {a, b}, [a, b, rows, p, q](Graph& g, Var self) {
    const auto up = g.upstream(self);
    auto da = g.accum(a);
    auto db = g.accum(b);
    for (std::size_t i = 0; i < rows; ++i) {
      if (!da.empty())
        for (std::size_t j = 0; j < p; ++j) da[i * p + j] += up[i * (p + q) + j];
      if (!db.empty())
        for (std::size_t j = 0; j < q; ++j) db[i * q + j] += up[i * (p + q) + p + j];
    }
  });
}

namespace detail {

// Copies the columns of head h out of a [L×d] matrix into a contiguous [L×dh]
// block, or its transpose [dh×L].
inline void gather_head(const double* src, double* dst, std::size_t L, std::size_t d, std::size_t c0,
                        std::size_t dh, bool transpose) {
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < dh; ++c) {
      const double v = src[t * d + c0 + c];
      if (transpose) dst[c * L + t] = v;
      else dst[t * dh + c] = v;
    }
}

inline void scatter_add_head(const double* src, double* dst, std::size_t L, std::size_t d, std::size_t c0,
                             std::size_t dh) {
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < dh; ++c) dst[t * d + c0 + c] += src[t * dh + c];
}

}  // namespace detail

/// Multi-head scaled dot-product attention over already-projected q, k, v
/// [L×d]. Position t attends to positions 0..t; scale is 1/sqrt(d/n_heads).
inline Var attention_core(Var q, Var k, Var v, std::size_t n_heads) {
  const Tensor& qv = q.value();
  detail::require_rank2(qv, "attention", "q");
  detail::require_same_shape(qv, k.value(), "attention");
  detail::require_same_shape(qv, v.value(), "attention");
  const std::size_t L = qv.dim(0), d = qv.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  if (L == 0) throw DimensionError("attention: empty sequence");
  const std::size_t dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool keep = q.graph()->grad_enabled();
  // probs[(h*L + t)*L + u] for u <= t
  std::vector<double> probs(keep ? n_heads * L * L : 0);
  std::vector<double> qh(L * dh), kt(dh * L), vh(L * dh), oh(L * dh), row(L);
  Tensor out(Shape{L, d});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t c0 = h * dh;
    detail::gather_head(qv.data().data(), qh.data(), L, d, c0, dh, false);
    detail::gather_head(k.value().data().data(), kt.data(), L, d, c0, dh, true);
    detail::gather_head(v.value().data().data(), vh.data(), L, d, c0, dh, false);
    std::fill(oh.begin(), oh.end(), 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t n = t + 1;
      double* s = row.data();
      std::fill(s, s + n, 0.0);
      for (std::size_t c = 0; c < dh; ++c) {
        const double qc = qh[t * dh + c] * scale;
        const double* kc = kt.data() + c * L;
        for (std::size_t u = 0; u < n; ++u) s[u] += qc * kc[u];
      }
      const double mx = *std::max_element(s, s + n);
      double z = 0.0;
      for (std::size_t u = 0; u < n; ++u) z += (s[u] = std::exp(s[u] - mx));
      const double inv = 1.0 / z;
      double* ot = oh.data() + t * dh;
      for (std::size_t u = 0; u < n; ++u) {
        const double p = s[u] * inv;
        if (keep) probs[(h * L + t) * L + u] = p;
        const double* vu = vh.data() + u * dh;
        for (std::size_t c = 0; c < dh; ++c) ot[c] += p * vu[c];
      }
    }
    detail::scatter_add_head(oh.data(), out.data().data(), L, d, c0, dh);
  }
  return q.graph()->record(
      std::move(out), {q, k, v},
      [q, k, v, L, d, dh, n_heads, scale, probs = std::move(probs)](Graph& g, Var self) {
        const double* up = g.upstream(self).data();
        auto dq = g.accum(q);
        auto dk = g.accum(k);
        auto dv = g.accum(v);
        std::vector<double> qh(L * dh), kh(L * dh), vt(dh * L), gh(L * dh);
        std::vector<double> dqh(L * dh), dkh(L * dh), dvh(L * dh), dp(L);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t c0 = h * dh;
          detail::gather_head(q.value().data().data(), qh.data(), L, d, c0, dh, false);
          detail::gather_head(k.value().data().data(), kh.data(), L, d, c0, dh, false);
          detail::gather_head(v.value().data().data(), vt.data(), L, d, c0, dh, true);
          detail::gather_head(up, gh.data(), L, d, c0, dh, false);
          std::fill(dqh.begin(), dqh.end(), 0.0);
          std::fill(dkh.begin(), dkh.end(), 0.0);
          std::fill(dvh.begin(), dvh.end(), 0.0);
          for (std::size_t t = 0; t < L; ++t) {
            const std::size_t n = t + 1;
            const double* P = probs.data() + (h * L + t) * L;
            const double* gt = gh.data() + t * dh;
            std::fill(dp.begin(), dp.begin() + static_cast<std::ptrdiff_t>(n), 0.0);
            for (std::size_t c = 0; c < dh; ++c) {
              const double gc = gt[c];
              const double* vc = vt.data() + c * L;
              for (std::size_t u = 0; u < n; ++u) dp[u] += gc * vc[u];
            }
            double dot = 0.0;
#pragma omp simd reduction(+ : dot)
            for (std::size_t u = 0; u < n; ++u) dot += P[u] * dp[u];
            const double* qt = qh.data() + t * dh;
            double* dqt = dqh.data() + t * dh;
            for (std::size_t u = 0; u < n; ++u) {
              const double pu = P[u];
              const double ds = pu * (dp[u] - dot) * scale;
              const double* ku = kh.data() + u * dh;
              double* dku = dkh.data() + u * dh;
              double* dvu = dvh.data() + u * dh;
              for (std::size_t c = 0; c < dh; ++c) {
                dqt[c] += ds * ku[c];
                dku[c] += ds * qt[c];
                dvu[c] += pu * gt[c];
              }
            }
          }
          if (!dq.empty()) detail::scatter_add_head(dqh.data(), dq.data(), L, d, c0, dh);
          if (!dk.empty()) detail::scatter_add_head(dkh.data(), dk.data(), L, d, c0, dh);
          if (!dv.empty()) detail::scatter_add_head(dvh.data(), dv.data(), L, d, c0, dh);
        }
      });
}

/// Causal multi-head self-attention: attention_core(x·wq, x·wk, x·wv)·wo.
inline Var causal_attention(Var x, Var wq, Var wk, Var wv, Var wo, std::size_t n_heads) {
  const std::size_t d = x.value().cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
  Var o = attention_core(matmul(x, wq), matmul(x, wk), matmul(x, wv), n_heads);
  return matmul(o, wo);
}

/// Mean negative log-likelihood of `targets` over the rows selected by `mask`.
inline Var cross_entropy(Var logits, std::span<const std::size_t> targets, const std::vector<bool>& mask) {
  const Tensor& lv = logits.value();
  detail::require_rank2(lv, "cross_entropy", "logits");
  const std::size_t L = lv.dim(0), V = lv.dim(1);
  if (targets.size() != L || mask.size() != L) {
    throw DimensionError("cross_entropy: " + std::to_string(L) + " rows but " +
                         std::to_string(targets.size()) + " targets and " +
                         std::to_string(mask.size()) + " mask entries");
  }
  std::size_t count = 0;
  for (std::size_t t = 0; t < L; ++t) {
    if (!mask[t]) continue;
    if (targets[t] >= V) {
      throw InputError("cross_entropy: target " + std::to_string(targets[t]) +
                       " outside vocabulary of size " + std::to_string(V));
    }
    ++count;
  }
  if (count == 0) throw ContractError("cross_entropy: mask selects no positions");
  std::vector<double> probs(count * V);
  double total = 0.0;
  for (std::size_t t = 0, r = 0; t < L; ++t) {
    if (!mask[t]) continue;
    const double* z = lv.data().data() + t * V;
    const double mx = *std::max_element(z, z + V);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += (probs[r * V + j] = std::exp(z[j] - mx));
    for (std::size_t j = 0; j < V; ++j) probs[r * V + j] /= s;
    total += mx + std::log(s) - z[targets[t]];
    ++r;
  }
  const double inv_count = 1.0 / static_cast<double>(count);
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return logits.graph()->record(
      Tensor::scalar(total * inv_count), {logits},
      [logits, L, V, inv_count, mask, tg = std::move(tg), probs = std::move(probs)](Graph& g, Var self) {
        const double up = g.upstream(self)[0] * inv_count;
        auto dl = g.accum(logits);
        for (std::size_t t = 0, r = 0; t < L; ++t) {
          if (!mask[t]) continue;
          for (std::size_t j = 0; j < V; ++j) dl[t * V + j] += up * probs[r * V + j];
          dl[t * V + tg[t]] -= up;
          ++r;
        }
      });
}
}  // namespace ops

}  // namespace recurlens
