#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lql/common.hpp"

namespace lql {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// One value node of the autodiff tape. Values are immutable once produced
/// by an operation; only leaf (parameter) values may be updated between
/// forward passes. grad stays empty for tensors that never require it.
template <class S>
struct TensorNode {
  Shape shape;
  std::vector<S> value;
  bool requires_grad = false;
  std::vector<S> grad;  // allocated lazily, same length as value
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backward_fn;

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), S(0));
  }
};

template <class S>
class TensorT {
 public:
  using Node = TensorNode<S>;

  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad);
  }

  static TensorT full(Shape shape, S v, bool requires_grad = false) {
    std::vector<S> data(shape_numel(shape), v);
    return from_data(std::move(shape), std::move(data), requires_grad);
  }

  static TensorT scalar(S v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  /// data may be empty (zero fill) or must match the shape extent product.
  static TensorT from_data(Shape shape, std::vector<S> data,
                           bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    if (data.empty()) data.assign(n, S(0));
    if (data.size() != n) {
      throw shape_error("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const S> values() const { return node_->value; }
  /// Mutable view of the raw values. Intended for leaf tensors (parameter
  /// updates, finite-difference probing); interior graph nodes must not be
  /// mutated.
  std::span<S> values_mut() { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const S> grad() const { return node_->grad; }
  std::span<S> grad_mut() { return node_->grad; }

  void zero_grad() {
    if (!node_->grad.empty()) {
      std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }
  }

  S item() const {
    if (numel() != 1) {
      throw contract_error("item() on tensor of shape " + shape_str(shape()));
    }
    return node_->value[0];
  }

  /// Copy of values/shape with no graph history.
  TensorT clone_detached(bool requires_grad = false) const {
    return from_data(node_->shape, node_->value, requires_grad);
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;

/// Builds an operation result node. When no input requires a gradient the
/// result is a plain leaf and the tape records nothing.
template <class S>
TensorT<S> make_op(Shape out_shape, std::vector<S> out_value,
                   const std::vector<TensorT<S>>& inputs,
                   std::function<void(TensorNode<S>&)> backward_fn) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  TensorT<S> out = TensorT<S>::from_data(std::move(out_shape),
                                         std::move(out_value), rg);
  if (rg) {
    auto* n = out.node();
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.handle());
    n->backward_fn = std::move(backward_fn);
  }
  return out;
}

/// Topologically ordered record of the operations reachable from a root;
/// parents always precede the nodes that consume them.
template <class S>
struct ComputeGraph {
  std::vector<TensorNode<S>*> order;
};

template <class S>
ComputeGraph<S> build_graph(const TensorT<S>& root) {
  ComputeGraph<S> g;
  std::unordered_set<TensorNode<S>*> visited;
  // Iterative postorder DFS over parents.
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      TensorNode<S>* child = node->parents[next_child].get();
      ++next_child;
      if (visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      g.order.push_back(node);
      stack.pop_back();
    }
  }
  return g;
}

/// Reverse-mode sweep from a scalar loss. Every requires_grad tensor
/// reachable from the loss ends with a populated grad buffer; frozen
/// tensors receive none. Gradients accumulate across calls, which is what
/// gradient accumulation over micro-batches relies on.
template <class S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1) {
    throw contract_error("backward requires a scalar loss, got shape " +
                         shape_str(loss.shape()));
  }
  ComputeGraph<S> g = build_graph(loss);
  for (auto* n : g.order) {
    if (n->requires_grad) n->ensure_grad();
  }
  loss.node()->grad[0] += S(1);
  for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (n->backward_fn && n->requires_grad) n->backward_fn(*n);
  }
}

namespace detail {

template <class S>
void check_finite(std::span<const S> v, const char* what) {
  for (S x : v) {
    if (!std::isfinite(static_cast<double>(x))) {
      throw numeric_error(std::string(what) + " produced a non-finite value");
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Core operations
// ---------------------------------------------------------------------------

/// a[m,k] * b[k,n] -> [m,n]. Inner products accumulate in double.
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw shape_error("matmul shape mismatch " + shape_str(a.shape()) + " * " +
                      shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  std::vector<S> out(m * n);
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double av = static_cast<double>(pa[i * k + kk]);
      const S* brow = pb + kk * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = static_cast<S>(acc[j]);
  }
  auto an = a.handle();
  auto bn = b.handle();
  return make_op<S>({m, n}, std::move(out), {a, b},
                    [an, bn, m, k, n](TensorNode<S>& self) {
    const S* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      S* ga = an->grad.data();
      const S* pb = bn->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          double s = 0.0;
          const S* grow = g + i * n;
          const S* brow = pb + kk * n;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(grow[j]) * static_cast<double>(brow[j]);
          ga[i * k + kk] += static_cast<S>(s);
        }
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      S* gb = bn->grad.data();
      const S* pa = an->value.data();
      for (std::size_t kk = 0; kk < k; ++kk) {
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += static_cast<double>(pa[i * k + kk]) * static_cast<double>(g[i * n + j]);
          gb[kk * n + j] += static_cast<S>(s);
        }
      }
    }
  });
}

/// a[m,k] * b[n,k]^T -> [m,n]; the natural layout for row-major linear
/// layers whose weights are stored [out,in].
template <class S>
TensorT<S> matmul_nt(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1)) {
    throw shape_error("matmul_nt shape mismatch " + shape_str(a.shape()) +
                      " * " + shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const S* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const S* brow = pb + j * k;
      double s = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) s += static_cast<double>(arow[kk]) * static_cast<double>(brow[kk]);
      out[i * n + j] = static_cast<S>(s);
    }
  }
  auto an = a.handle();
  auto bn = b.handle();
  return make_op<S>({m, n}, std::move(out), {a, b},
                    [an, bn, m, k, n](TensorNode<S>& self) {
    const S* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      S* ga = an->grad.data();
      const S* pb = bn->value.data();
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += static_cast<double>(g[i * n + j]) * static_cast<double>(pb[j * k + kk]);
          ga[i * k + kk] += static_cast<S>(s);
        }
      }
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      S* gb = bn->grad.data();
      const S* pa = an->value.data();
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t kk = 0; kk < k; ++kk) {
          double s = 0.0;
          for (std::size_t i = 0; i < m; ++i) s += static_cast<double>(g[i * n + j]) * static_cast<double>(pa[i * k + kk]);
          gb[j * k + kk] += static_cast<S>(s);
        }
      }
    }
  });
}

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("add shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  std::vector<S> out(a.numel());
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  auto an = a.handle();
  auto bn = b.handle();
  return make_op<S>(a.shape(), std::move(out), {a, b},
                    [an, bn](TensorNode<S>& self) {
    const S* g = self.grad.data();
    for (auto& p : {an, bn}) {
      if (p->requires_grad) {
        p->ensure_grad();
        S* gp = p->grad.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += g[i];
      }
    }
  });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape()) {
    throw shape_error("mul shape mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  }
  std::vector<S> out(a.numel());
  const S* pa = a.values().data();
  const S* pb = b.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  auto an = a.handle();
  auto bn = b.handle();
  return make_op<S>(a.shape(), std::move(out), {a, b},
                    [an, bn](TensorNode<S>& self) {
    const S* g = self.grad.data();
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += g[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += g[i] * an->value[i];
    }
  });
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  std::vector<S> out(a.numel());
  const S* pa = a.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * c;
  auto an = a.handle();
  return make_op<S>(a.shape(), std::move(out), {a}, [an, c](TensorNode<S>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    }
  });
}

template <class S>
TensorT<S> silu(const TensorT<S>& x) {
  std::vector<S> out(x.numel());
  const S* px = x.values().data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(px[i]);
    out[i] = static_cast<S>(v / (1.0 + std::exp(-v)));
  }
  auto xn = x.handle();
  return make_op<S>(x.shape(), std::move(out), {x}, [xn](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = static_cast<double>(xn->value[i]);
      const double sig = 1.0 / (1.0 + std::exp(-v));
      const double d = sig * (1.0 + v * (1.0 - sig));
      xn->grad[i] += static_cast<S>(static_cast<double>(self.grad[i]) * d);
    }
  });
}

/// Reinterprets the value buffer under a new shape with the same extent
/// product. Gradient passes through unchanged.
template <class S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel()) {
    throw shape_error("reshape " + shape_str(x.shape()) + " -> " +
                      shape_str(new_shape) + " changes element count");
  }
  std::vector<S> out(x.values().begin(), x.values().end());
  auto xn = x.handle();
  return make_op<S>(std::move(new_shape), std::move(out), {x},
                    [xn](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

/// Row-wise softmax over the last dimension, numerically stabilized by the
/// row maximum. mask, when present, must match the shape and contain only
/// 0 or -infinity entries; -infinity positions get probability exactly 0.
/// A fully masked row is a degenerate-row error.
template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x,
                        const std::optional<TensorT<S>>& mask = std::nullopt) {
  if (x.ndim() < 1) throw shape_error("softmax_rows on rank-0 tensor");
  if (mask && mask->shape() != x.shape()) {
    throw shape_error("softmax mask shape mismatch");
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const S* px = x.values().data();
  const S* pm = mask ? mask->values().data() : nullptr;
  const S neg_inf = -std::numeric_limits<S>::infinity();
  std::vector<S> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const S* row = px + r * d;
    const S* mrow = pm ? pm + r * d : nullptr;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < d; ++j) {
      if (mrow && mrow[j] == neg_inf) continue;
      any = true;
      mx = std::max(mx, static_cast<double>(row[j]));
    }
    if (!any) throw numeric_error("softmax row " + std::to_string(r) + " is fully masked");
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (mrow && mrow[j] == neg_inf) {
        out[r * d + j] = S(0);
      } else {
        const double e = std::exp(static_cast<double>(row[j]) - mx);
        out[r * d + j] = static_cast<S>(e);
        sum += e;
      }
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = static_cast<S>(static_cast<double>(out[r * d + j]) * inv);
    }
  }
  auto xn = x.handle();
  std::vector<TensorT<S>> inputs = {x};
  if (mask) inputs.push_back(*mask);  // mask itself receives no gradient
  return make_op<S>(x.shape(), std::move(out), inputs,
                    [xn, d, rows](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S* p = self.value.data();
    const S* g = self.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dot += static_cast<double>(g[r * d + j]) * static_cast<double>(p[r * d + j]);
      }
      for (std::size_t j = 0; j < d; ++j) {
        xn->grad[r * d + j] += static_cast<S>(static_cast<double>(p[r * d + j]) *
                                               (static_cast<double>(g[r * d + j]) - dot));
      }
    }
  });
}

template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x, const TensorT<S>& mask) {
  return softmax_rows(x, std::optional<TensorT<S>>(mask));
}

inline constexpr double kRmsNormEps = 1e-5;

/// y_i = weight_i * x_i / sqrt(mean(x^2) + eps), rows over the last dim.
template <class S>
TensorT<S> rms_norm(const TensorT<S>& x, const TensorT<S>& weight) {
  if (weight.ndim() != 1 || x.shape().back() != weight.dim(0)) {
    throw shape_error("rms_norm weight length " + shape_str(weight.shape()) +
                      " does not match last extent of " + shape_str(x.shape()));
  }
  const std::size_t d = x.shape().back();
  const std::size_t rows = x.numel() / d;
  const S* px = x.values().data();
  const S* pw = weight.values().data();
  std::vector<S> out(x.numel());
  std::vector<double> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = static_cast<double>(px[r * d + j]);
      ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsNormEps);
    inv_rms[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = static_cast<S>(static_cast<double>(pw[j]) *
                                      static_cast<double>(px[r * d + j]) * inv);
    }
  }
  auto xn = x.handle();
  auto wn = weight.handle();
  return make_op<S>(x.shape(), std::move(out), {x, weight},
                    [xn, wn, d, rows, inv_rms](TensorNode<S>& self) {
    const S* g = self.grad.data();
    const S* px = xn->value.data();
    const S* pw = wn->value.data();
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double inv = inv_rms[r];
        double dot = 0.0;  // sum_i g_i w_i x_i
        for (std::size_t j = 0; j < d; ++j) {
          dot += static_cast<double>(g[r * d + j]) * static_cast<double>(pw[j]) *
                 static_cast<double>(px[r * d + j]);
        }
        const double c = dot * inv * inv * inv / static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
          xn->grad[r * d + j] += static_cast<S>(
              static_cast<double>(g[r * d + j]) * static_cast<double>(pw[j]) * inv -
              static_cast<double>(px[r * d + j]) * c);
        }
      }
    }
    if (wn->requires_grad) {
      wn->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double inv = inv_rms[r];
        for (std::size_t j = 0; j < d; ++j) {
          wn->grad[j] += static_cast<S>(static_cast<double>(g[r * d + j]) *
                                        static_cast<double>(px[r * d + j]) * inv);
        }
      }
    }
  });
}

/// Gathers rows of table [V,d] by token id -> [n,d].
template <class S>
TensorT<S> embedding_rows(const TensorT<S>& table,
                          std::span<const std::uint32_t> ids) {
  if (table.ndim() != 2) throw shape_error("embedding table must be 2-D");
  const std::size_t v = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id >= v) {
      throw data_error("token id " + std::to_string(id) +
                       " out of vocabulary range " + std::to_string(v));
    }
  }
  std::vector<S> out(ids.size() * d);
  const S* pt = table.values().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(pt + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto tn = table.handle();
  std::vector<std::uint32_t> ids_copy(ids.begin(), ids.end());
  return make_op<S>({ids.size(), d}, std::move(out), {table},
                    [tn, d, ids_copy](TensorNode<S>& self) {
    if (!tn->requires_grad) return;
    tn->ensure_grad();
    for (std::size_t i = 0; i < ids_copy.size(); ++i) {
      S* dst = tn->grad.data() + static_cast<std::size_t>(ids_copy[i]) * d;
      const S* src = self.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
}

template <class S>
TensorT<S> sum(const TensorT<S>& x) {
  double s = 0.0;
  for (S v : x.values()) s += static_cast<double>(v);
  auto xn = x.handle();
  return make_op<S>({1}, {static_cast<S>(s)}, {x}, [xn](TensorNode<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const S g = self.grad[0];
    for (auto& gv : xn->grad) gv += g;
  });
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Central-difference check of the analytic gradient of f with respect to x.
/// f must be a pure scalar function of x (evaluated through fresh graphs).
/// Returns max over coordinates of
///   |analytic - central| / max(|analytic|, |central|, 1e-8).
template <class S, class F>
double finite_difference_check(F&& f, TensorT<S>& x, double step) {
  if (step <= 0) throw contract_error("finite_difference_check: step must be positive");
  if (!x.requires_grad()) {
    throw contract_error("finite_difference_check: x does not require gradients");
  }
  x.zero_grad();
  TensorT<S> loss = f(x);
  if (loss.numel() != 1) throw contract_error("finite_difference_check: f must be scalar");
  backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (x.has_grad()) {
    for (std::size_t i = 0; i < x.numel(); ++i) analytic[i] = static_cast<double>(x.grad()[i]);
  }
  auto eval = [&]() -> double {
    TensorT<S> l = f(x);
    const double v = static_cast<double>(l.item());
    if (!std::isfinite(v)) throw numeric_error("finite_difference_check: non-finite f output");
    return v;
  };
  double max_rel = 0.0;
  auto vals = x.values_mut();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const S orig = vals[i];
    vals[i] = static_cast<S>(static_cast<double>(orig) + step);
    const double fp = eval();
    vals[i] = static_cast<S>(static_cast<double>(orig) - step);
    const double fm = eval();
    vals[i] = orig;
    const double central = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::fabs(analytic[i]), std::fabs(central), 1e-8});
    max_rel = std::max(max_rel, std::fabs(analytic[i] - central) / denom);
  }
  x.zero_grad();
  return max_rel;
}

}  // namespace lql
