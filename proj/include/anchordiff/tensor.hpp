#pragma once

// Reverse-mode autodiff over dense row-major tensors, templated on the
// scalar type: float for training and file formats, double for gradient
// checks and numerical tests. Graphs are DAGs of shared_ptr nodes; backward
// walks a topological order from a scalar root. Ops are deterministic:
// identical inputs give bit-identical values and gradients on one platform.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "anchordiff/rng.hpp"

namespace anchordiff {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

[[noreturn]] inline void tensor_fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

inline void tensor_check(bool ok, const char* op, const std::string& what) {
  if (!ok) tensor_fail(op, what);
}

// Graph construction can be switched off (sampling, frozen encoders, metric
// code): ops then produce plain constants and keep no parent references.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> val;
  std::vector<S> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<S> data) {
    auto n = std::make_shared<TensorNode<S>>();
    tensor_check(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
                 "constant", "data size does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->val = std::move(data);
    return Tensor(n);
  }

  static Tensor zeros(Shape shape) {
    std::vector<S> d(static_cast<std::size_t>(shape_numel(shape)), S(0));
    return constant(std::move(shape), std::move(d));
  }

  static Tensor full(Shape shape, S v) {
    std::vector<S> d(static_cast<std::size_t>(shape_numel(shape)), v);
    return constant(std::move(shape), std::move(d));
  }

  static Tensor scalar(S v) { return constant({1}, {v}); }

  // Leaf with gradient storage; the unit optimizers and grad checks update.
  static Tensor param(Shape shape, std::vector<S> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    t.node_->ensure_grad();
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return shape_numel(node_->shape); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<S>& data() { return node_->val; }
  const std::vector<S>& data() const { return node_->val; }
  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<S>& grad() const { return node_->grad; }

  S item() const {
    tensor_check(numel() == 1, "item", "tensor has " + std::to_string(numel()) + " elements");
    return node_->val[0];
  }

  std::shared_ptr<TensorNode<S>> node() const { return node_; }

  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  // Backpropagate from a scalar. Gradients accumulate into every node with
  // requires_grad, leaves included.
  void backward() const {
    tensor_check(numel() == 1, "backward", "root must be scalar");
    if (!node_->requires_grad) return;
    std::vector<TensorNode<S>*> order;
    topo_sort(order);
    node_->ensure_grad();
    node_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

 private:
  void topo_sort(std::vector<TensorNode<S>*>& order) const {
    std::unordered_set<TensorNode<S>*> seen;
    // Iterative post-order DFS; frame.second is the next parent to visit.
    std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [cur, idx] = stack.back();
      if (idx < cur->parents.size()) {
        TensorNode<S>* p = cur->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(cur);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<S>> node_;
};

namespace detail {

template <typename S>
std::shared_ptr<TensorNode<S>> make_node(const char* op, Shape shape,
                                         std::vector<S> val,
                                         std::vector<Tensor<S>> parents,
                                         std::function<void(TensorNode<S>&)> backward) {
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  n->op = op;
  bool track = false;
  if (grad_mode()) {
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    n->requires_grad = true;
    n->ensure_grad();
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return n;
}

// Right-aligned broadcast of b's shape onto a's: every b dimension must be 1
// or equal to the matching trailing dimension of a.
inline bool broadcast_ok(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  std::size_t off = a.size() - b.size();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (b[i] != 1 && b[i] != a[off + i]) return false;
  }
  return true;
}

// Element strides of b aligned to a's dimensions (0 where b broadcasts).
inline std::vector<std::int64_t> broadcast_strides(const Shape& a, const Shape& b) {
  std::vector<std::int64_t> bs(a.size(), 0);
  std::int64_t stride = 1;
  std::size_t off = a.size() - b.size();
  for (std::size_t i = b.size(); i-- > 0;) {
    bs[off + i] = (b[i] == 1) ? 0 : stride;
    stride *= b[i];
  }
  return bs;
}

// Odometer over a's index space tracking the matching offset into b.
struct BcastIter {
  const Shape& shape;
  std::vector<std::int64_t> bstride;
  std::vector<int> counter;
  std::int64_t boff = 0;

  BcastIter(const Shape& a, const Shape& b)
      : shape(a), bstride(broadcast_strides(a, b)), counter(a.size(), 0) {}

  void advance() {
    for (std::size_t d = shape.size(); d-- > 0;) {
      ++counter[d];
      boff += bstride[d];
      if (counter[d] < shape[d]) return;
      boff -= bstride[d] * shape[d];
      counter[d] = 0;
    }
  }
};

}  // namespace detail

// ---- elementwise binary ops (b broadcasts onto a) ----

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b,
                    FwdFn fwd, BwdFn bwd) {
  tensor_check(detail::broadcast_ok(a.shape(), b.shape()), name,
               "cannot broadcast " + shape_str(b.shape()) + " onto " + shape_str(a.shape()));
  const std::int64_t n = a.numel();
  std::vector<S> out(static_cast<std::size_t>(n));
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  if (a.shape() == b.shape()) {
    for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(pa[i], pb[i]);
  } else if (b.numel() == 1) {
    const S bv = pb[0];
    for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(pa[i], bv);
  } else {
    detail::BcastIter it(a.shape(), b.shape());
    for (std::int64_t i = 0; i < n; ++i, it.advance()) out[i] = fwd(pa[i], pb[it.boff]);
  }
  auto node = detail::make_node<S>(name, a.shape(), std::move(out), {a, b},
      [name, a, b, bwd](TensorNode<S>& self) {
        auto an = a.node();
        auto bn = b.node();
        const std::int64_t n = shape_numel(self.shape);
        const S* g = self.grad.data();
        const S* pa = an->val.data();
        const S* pb = bn->val.data();
        S* ga = an->requires_grad ? (an->ensure_grad(), an->grad.data()) : nullptr;
        S* gb = bn->requires_grad ? (bn->ensure_grad(), bn->grad.data()) : nullptr;
        if (an->shape == bn->shape) {
          for (std::int64_t i = 0; i < n; ++i) {
            auto [da, db] = bwd(pa[i], pb[i], g[i]);
            if (ga) ga[i] += da;
            if (gb) gb[i] += db;
          }
        } else {
          detail::BcastIter it(an->shape, bn->shape);
          for (std::int64_t i = 0; i < n; ++i, it.advance()) {
            auto [da, db] = bwd(pa[i], pb[it.boff], g[i]);
            if (ga) ga[i] += da;
            if (gb) gb[it.boff] += db;
          }
        }
      });
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>("add", a, b, [](S x, S y) { return x + y; },
                      [](S, S, S g) { return std::pair<S, S>(g, g); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>("sub", a, b, [](S x, S y) { return x - y; },
                      [](S, S, S g) { return std::pair<S, S>(g, -g); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>("mul", a, b, [](S x, S y) { return x * y; },
                      [](S x, S y, S g) { return std::pair<S, S>(g * y, g * x); });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op<S>("div", a, b, [](S x, S y) { return x / y; },
                      [](S x, S y, S g) {
                        return std::pair<S, S>(g / y, -g * x / (y * y));
                      });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) { return add(a, b); }
template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) { return sub(a, b); }
template <typename S>
Tensor<S> operator*(const Tensor<S>& a, const Tensor<S>& b) { return mul(a, b); }

// ---- elementwise unary ops ----

template <typename S, typename FwdFn, typename BwdFn>
Tensor<S> unary_op(const char* name, const Tensor<S>& a, FwdFn fwd, BwdFn bwd) {
  const std::int64_t n = a.numel();
  std::vector<S> out(static_cast<std::size_t>(n));
  const S* pa = a.data().data();
  for (std::int64_t i = 0; i < n; ++i) out[i] = fwd(pa[i]);
  auto node = detail::make_node<S>(name, a.shape(), std::move(out), {a},
      [a, bwd](TensorNode<S>& self) {
        auto an = a.node();
        if (!an->requires_grad) return;
        an->ensure_grad();
        const std::int64_t n = shape_numel(self.shape);
        const S* g = self.grad.data();
        const S* x = an->val.data();
        const S* y = self.val.data();
        S* ga = an->grad.data();
        for (std::int64_t i = 0; i < n; ++i) ga[i] += bwd(x[i], y[i], g[i]);
      });
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return unary_op<S>("neg", a, [](S x) { return -x; },
                     [](S, S, S g) { return -g; });
}

template <typename S>
Tensor<S> operator-(const Tensor<S>& a) { return neg(a); }

template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  return unary_op<S>("add_scalar", a, [c](S x) { return x + c; },
                     [](S, S, S g) { return g; });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  return unary_op<S>("mul_scalar", a, [c](S x) { return x * c; },
                     [c](S, S, S g) { return g * c; });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return unary_op<S>("exp", a, [](S x) { return std::exp(x); },
                     [](S, S y, S g) { return g * y; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return unary_op<S>("log", a, [](S x) { return std::log(x); },
                     [](S x, S, S g) { return g / x; });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return unary_op<S>("sqrt", a, [](S x) { return std::sqrt(x); },
                     [](S, S y, S g) { return g / (S(2) * y); });
}

template <typename S>
Tensor<S> square(const Tensor<S>& a) {
  return unary_op<S>("square", a, [](S x) { return x * x; },
                     [](S x, S, S g) { return g * S(2) * x; });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return unary_op<S>("sigmoid", a,
                     [](S x) { return S(1) / (S(1) + std::exp(-x)); },
                     [](S, S y, S g) { return g * y * (S(1) - y); });
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  return unary_op<S>("silu", a,
                     [](S x) { return x / (S(1) + std::exp(-x)); },
                     [](S x, S, S g) {
                       S s = S(1) / (S(1) + std::exp(-x));
                       return g * s * (S(1) + x * (S(1) - s));
                     });
}

template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_op<S>("gelu", a,
                     [=](S x) {
                       return S(0.5) * x * (S(1) + S(std::erf(double(x) * inv_sqrt2)));
                     },
                     [=](S x, S, S g) {
                       double cdf = 0.5 * (1.0 + std::erf(double(x) * inv_sqrt2));
                       double pdf = inv_sqrt2pi * std::exp(-0.5 * double(x) * double(x));
                       return g * S(cdf + double(x) * pdf);
                     });
}

template <typename S>
Tensor<S> softplus(const Tensor<S>& a) {
  // log(1 + e^x), computed as max(x,0) + log1p(e^-|x|) for stability.
  return unary_op<S>("softplus", a,
                     [](S x) {
                       return S(std::max(double(x), 0.0) +
                                std::log1p(std::exp(-std::abs(double(x)))));
                     },
                     [](S x, S, S g) {
                       return g * S(1.0 / (1.0 + std::exp(-double(x))));
                     });
}

template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  return Tensor<S>::constant(a.shape(), a.data());
}

// ---- reductions ----

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S total = S(0);
  for (S v : a.data()) total += v;
  auto node = detail::make_node<S>("sum_all", {1}, {total}, {a},
      [a](TensorNode<S>& self) {
        auto an = a.node();
        if (!an->requires_grad) return;
        an->ensure_grad();
        const S g = self.grad[0];
        for (auto& gv : an->grad) gv += g;
      });
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  return mul_scalar(sum_all(a), S(1) / S(a.numel()));
}

// Reduce one axis, keeping it as size 1.
template <typename S>
Tensor<S> sum_axis(const Tensor<S>& a, int axis) {
  tensor_check(axis >= 0 && axis < a.ndim(), "sum_axis", "axis out of range");
  Shape out_shape = a.shape();
  const int n = out_shape[axis];
  out_shape[axis] = 1;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  std::vector<S> out(static_cast<std::size_t>(outer * inner), S(0));
  const S* pa = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    S* po = out.data() + o * inner;
    const S* px = pa + o * n * inner;
    for (int j = 0; j < n; ++j) {
      const S* row = px + j * inner;
      for (std::int64_t i = 0; i < inner; ++i) po[i] += row[i];
    }
  }
  auto node = detail::make_node<S>("sum_axis", out_shape, std::move(out), {a},
      [a, n, outer, inner](TensorNode<S>& self) {
        auto an = a.node();
        if (!an->requires_grad) return;
        an->ensure_grad();
        const S* g = self.grad.data();
        S* ga = an->grad.data();
        for (std::int64_t o = 0; o < outer; ++o) {
          const S* po = g + o * inner;
          S* px = ga + o * n * inner;
          for (int j = 0; j < n; ++j) {
            S* row = px + j * inner;
            for (std::int64_t i = 0; i < inner; ++i) row[i] += po[i];
          }
        }
      });
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> mean_axis(const Tensor<S>& a, int axis) {
  return mul_scalar(sum_axis(a, axis), S(1) / S(a.dim(axis)));
}

// ---- shape ops ----

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  tensor_check(shape_numel(shape) == a.numel(), "reshape",
               "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  auto node = detail::make_node<S>("reshape", std::move(shape), a.data(), {a},
      [a](TensorNode<S>& self) {
        auto an = a.node();
        if (!an->requires_grad) return;
        an->ensure_grad();
        const std::int64_t n = static_cast<std::int64_t>(self.grad.size());
        for (std::int64_t i = 0; i < n; ++i) an->grad[i] += self.grad[i];
      });
  return Tensor<S>(node);
}

namespace detail {

inline std::vector<std::int64_t> row_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::size_t i = s.size() - 1; i-- > 0;) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// dst[i] = src[perm_index(i)] for a dimension permutation; used for both
// the forward copy and the transposed gradient copy.
template <typename S>
void permute_copy(const Shape& in_shape, const std::vector<int>& perm,
                  const S* src, S* dst, bool accumulate) {
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = in_shape[perm[i]];
  auto in_strides = row_strides(in_shape);
  std::vector<std::int64_t> src_stride(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) src_stride[i] = in_strides[perm[i]];
  std::vector<int> counter(perm.size(), 0);
  const std::int64_t n = shape_numel(in_shape);
  std::int64_t soff = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (accumulate)
      dst[i] += src[soff];
    else
      dst[i] = src[soff];
    for (std::size_t d = perm.size(); d-- > 0;) {
      ++counter[d];
      soff += src_stride[d];
      if (counter[d] < out_shape[d]) break;
      soff -= src_stride[d] * out_shape[d];
      counter[d] = 0;
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> permute(const Tensor<S>& a, std::vector<int> perm) {
  tensor_check(static_cast<int>(perm.size()) == a.ndim(), "permute", "rank mismatch");
  std::vector<bool> used(perm.size(), false);
  for (int p : perm) {
    tensor_check(p >= 0 && p < a.ndim() && !used[p], "permute", "invalid permutation");
    used[p] = true;
  }
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = a.dim(perm[i]);
  std::vector<S> out(static_cast<std::size_t>(a.numel()));
  detail::permute_copy<S>(a.shape(), perm, a.data().data(), out.data(), false);
  auto node = detail::make_node<S>("permute", out_shape, std::move(out), {a},
      [a, perm](TensorNode<S>& self) {
        auto an = a.node();
        if (!an->requires_grad) return;
        an->ensure_grad();
        // Gradient flows through the inverse permutation.
        std::vector<int> inv(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
        detail::permute_copy<S>(self.shape, inv, self.grad.data(), an->grad.data(), true);
      });
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> transpose_last_two(const Tensor<S>& a) {
  tensor_check(a.ndim() >= 2, "transpose_last_two", "needs rank >= 2");
  std::vector<int> perm(a.ndim());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[a.ndim() - 2], perm[a.ndim() - 1]);
  return permute(a, perm);
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  tensor_check(!parts.empty(), "concat", "no inputs");
  const Shape& s0 = parts[0].shape();
  tensor_check(axis >= 0 && axis < static_cast<int>(s0.size()), "concat", "axis out of range");
  Shape out_shape = s0;
  int total = 0;
  for (const auto& p : parts) {
    tensor_check(p.ndim() == static_cast<int>(s0.size()), "concat", "rank mismatch");
    for (int d = 0; d < p.ndim(); ++d) {
      tensor_check(d == axis || p.dim(d) == s0[d], "concat",
                   "shape mismatch at " + shape_str(p.shape()));
    }
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  for (int i = axis + 1; i < static_cast<int>(s0.size()); ++i) inner *= s0[i];
  std::vector<S> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t rows = p.dim(axis) * inner;
    const S* src = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy(src + o * rows, src + (o + 1) * rows,
                out.data() + o * total * inner + off);
    }
    off += rows;
  }
  auto node = detail::make_node<S>("concat", out_shape, std::move(out), parts,
      [parts, axis, outer, inner, total](TensorNode<S>& self) {
        std::int64_t off = 0;
        for (const auto& p : parts) {
          auto pn = p.node();
          const std::int64_t rows = pn->shape[axis] * inner;
          if (pn->requires_grad) {
            pn->ensure_grad();
            for (std::int64_t o = 0; o < outer; ++o) {
              const S* g = self.grad.data() + o * total * inner + off;
              S* dst = pn->grad.data() + o * rows;
              for (std::int64_t i = 0; i < rows; ++i) dst[i] += g[i];
            }
          }
          off += rows;
        }
      });
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, int start, int len) {
  tensor_check(axis >= 0 && axis < a.ndim(), "slice", "axis out of range");
  tensor_check(start >= 0 && len >= 1 && start + len <= a.dim(axis), "slice",
               "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                   ") outside axis of size " + std::to_string(a.dim(axis)));
  Shape out_shape = a.shape();
  out_shape[axis] = len;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  const int n = a.dim(axis);
  std::vector<S> out(static_cast<std::size_t>(outer * len * inner));
  const S* src = a.data().data();
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(src + (o * n + start) * inner, src + (o * n + start + len) * inner,
              out.data() + o * len * inner);
  }
  auto node = detail::make_node<S>("slice", out_shape, std::move(out), {a},
      [a, start, len, n, outer, inner](TensorNode<S>& self) {
        auto an = a.node();
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const S* g = self.grad.data() + o * len * inner;
          S* dst = an->grad.data() + (o * n + start) * inner;
          for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += g[i];
        }
      });
  return Tensor<S>(node);
}

// Zero padding on one axis.
template <typename S>
Tensor<S> pad_axis(const Tensor<S>& a, int axis, int left, int right) {
  tensor_check(axis >= 0 && axis < a.ndim(), "pad_axis", "axis out of range");
  tensor_check(left >= 0 && right >= 0, "pad_axis", "negative padding");
  if (left == 0 && right == 0) return a;
  Shape out_shape = a.shape();
  const int n = a.dim(axis);
  out_shape[axis] = n + left + right;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.ndim(); ++i) inner *= a.dim(i);
  std::vector<S> out(static_cast<std::size_t>(shape_numel(out_shape)), S(0));
  const S* src = a.data().data();
  const int m = n + left + right;
  for (std::int64_t o = 0; o < outer; ++o) {
    std::copy(src + o * n * inner, src + (o + 1) * n * inner,
              out.data() + (o * m + left) * inner);
  }
  auto node = detail::make_node<S>("pad_axis", out_shape, std::move(out), {a},
      [a, left, n, m, outer, inner](TensorNode<S>& self) {
        auto an = a.node();
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o) {
          const S* g = self.grad.data() + (o * m + left) * inner;
          S* dst = an->grad.data() + o * n * inner;
          for (std::int64_t i = 0; i < n * inner; ++i) dst[i] += g[i];
        }
      });
  return Tensor<S>(node);
}

// ---- matmul ----

namespace detail {

// C[MxN] += A[MxK] * B[KxN]
template <typename S>
void gemm_acc(const S* a, const S* b, S* c, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const S* arow = a + static_cast<std::int64_t>(m) * K;
    S* crow = c + static_cast<std::int64_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const S av = arow[k];
      const S* brow = b + static_cast<std::int64_t>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// dA[MxK] += dC[MxN] * B^T  (dot of contiguous rows)
template <typename S>
void gemm_dA(const S* dc, const S* b, S* da, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const S* grow = dc + static_cast<std::int64_t>(m) * N;
    S* darow = da + static_cast<std::int64_t>(m) * K;
    for (int k = 0; k < K; ++k) {
      const S* brow = b + static_cast<std::int64_t>(k) * N;
      S acc = S(0);
      for (int n = 0; n < N; ++n) acc += grow[n] * brow[n];
      darow[k] += acc;
    }
  }
}

// dB[KxN] += A^T * dC
template <typename S>
void gemm_dB(const S* a, const S* dc, S* db, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const S* arow = a + static_cast<std::int64_t>(m) * K;
    const S* grow = dc + static_cast<std::int64_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const S av = arow[k];
      S* dbrow = db + static_cast<std::int64_t>(k) * N;
      for (int n = 0; n < N; ++n) dbrow[n] += av * grow[n];
    }
  }
}

}  // namespace detail

// a: (..., M, K). b: (K, N) shared across batches, or (..., K, N) with
// identical leading dimensions.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  tensor_check(a.ndim() >= 2 && b.ndim() >= 2, "matmul", "needs rank >= 2");
  const int M = a.dim(a.ndim() - 2);
  const int K = a.dim(a.ndim() - 1);
  const int Kb = b.dim(b.ndim() - 2);
  const int N = b.dim(b.ndim() - 1);
  tensor_check(K == Kb, "matmul", "inner dims differ: " + shape_str(a.shape()) +
                                      " x " + shape_str(b.shape()));
  const bool shared_b = (b.ndim() == 2);
  if (!shared_b) {
    tensor_check(a.ndim() == b.ndim(), "matmul", "rank mismatch for batched b");
    for (int i = 0; i < a.ndim() - 2; ++i) {
      tensor_check(a.dim(i) == b.dim(i), "matmul", "batch dims differ");
    }
  }
  std::int64_t batch = 1;
  for (int i = 0; i < a.ndim() - 2; ++i) batch *= a.dim(i);
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(M);
  out_shape.push_back(N);
  std::vector<S> out(static_cast<std::size_t>(batch * M * N), S(0));
  const S* pa = a.data().data();
  const S* pb = b.data().data();
  for (std::int64_t i = 0; i < batch; ++i) {
    detail::gemm_acc(pa + i * M * K, shared_b ? pb : pb + i * K * N,
                     out.data() + i * M * N, M, K, N);
  }
  auto node = detail::make_node<S>("matmul", out_shape, std::move(out), {a, b},
      [a, b, M, K, N, batch, shared_b](TensorNode<S>& self) {
        auto an = a.node();
        auto bn = b.node();
        const S* g = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          for (std::int64_t i = 0; i < batch; ++i) {
            detail::gemm_dA(g + i * M * N,
                            shared_b ? bn->val.data() : bn->val.data() + i * K * N,
                            an->grad.data() + i * M * K, M, K, N);
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::int64_t i = 0; i < batch; ++i) {
            detail::gemm_dB(an->val.data() + i * M * K, g + i * M * N,
                            shared_b ? bn->grad.data() : bn->grad.data() + i * K * N,
                            M, K, N);
          }
        }
      });
  return Tensor<S>(node);
}

// x (..., D) * W (D, O) + bias (O)
template <typename S>
Tensor<S> affine(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  Tensor<S> y = matmul(x, w);
  return bias.defined() ? add(y, bias) : y;
}

// ---- conv / resample ----

// x: (B, C_in, T). w: (C_out, C_in, K). bias: (C_out) or undefined.
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias,
                 int stride, int pad) {
  tensor_check(x.ndim() == 3 && w.ndim() == 3, "conv1d", "x must be (B,C,T), w (O,C,K)");
  tensor_check(x.dim(1) == w.dim(1), "conv1d", "channel mismatch: " +
                                                   shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  tensor_check(stride >= 1 && pad >= 0, "conv1d", "bad stride/pad");
  const int B = x.dim(0), Ci = x.dim(1), T = x.dim(2);
  const int Co = w.dim(0), K = w.dim(2);
  const int To = (T + 2 * pad - K) / stride + 1;
  tensor_check(To >= 1, "conv1d", "output length < 1");
  if (bias.defined()) {
    tensor_check(bias.numel() == Co, "conv1d", "bias size mismatch");
  }
  std::vector<S> out(static_cast<std::size_t>(B) * Co * To, S(0));
  const S* px = x.data().data();
  const S* pw = w.data().data();
  for (int b = 0; b < B; ++b) {
    for (int co = 0; co < Co; ++co) {
      S* orow = out.data() + (static_cast<std::int64_t>(b) * Co + co) * To;
      if (bias.defined()) {
        const S bv = bias.data()[co];
        for (int t = 0; t < To; ++t) orow[t] = bv;
      }
      for (int ci = 0; ci < Ci; ++ci) {
        const S* xrow = px + (static_cast<std::int64_t>(b) * Ci + ci) * T;
        const S* wrow = pw + (static_cast<std::int64_t>(co) * Ci + ci) * K;
        for (int k = 0; k < K; ++k) {
          const S wv = wrow[k];
          // valid t range: 0 <= t*stride + k - pad < T
          int lo = std::max(0, (pad - k + stride - 1) / stride);
          int hi = std::min(To - 1, (T - 1 + pad - k) / stride);
          const S* xs = xrow + lo * stride + k - pad;
          if (stride == 1) {
            for (int t = lo; t <= hi; ++t) orow[t] += wv * xs[t - lo];
          } else {
            for (int t = lo; t <= hi; ++t) orow[t] += wv * xs[(t - lo) * stride];
          }
        }
      }
    }
  }
  std::vector<Tensor<S>> parents = {x, w};
  if (bias.defined()) parents.push_back(bias);
  auto node = detail::make_node<S>("conv1d", {B, Co, To}, std::move(out), parents,
      [x, w, bias, stride, pad, B, Ci, T, Co, K, To](TensorNode<S>& self) {
        auto xn = x.node();
        auto wn = w.node();
        const S* g = self.grad.data();
        const bool need_dx = xn->requires_grad;
        const bool need_dw = wn->requires_grad;
        if (need_dx) xn->ensure_grad();
        if (need_dw) wn->ensure_grad();
        for (int b = 0; b < B; ++b) {
          for (int co = 0; co < Co; ++co) {
            const S* grow = g + (static_cast<std::int64_t>(b) * Co + co) * To;
            for (int ci = 0; ci < Ci; ++ci) {
              const S* xrow = xn->val.data() + (static_cast<std::int64_t>(b) * Ci + ci) * T;
              const S* wrow = wn->val.data() + (static_cast<std::int64_t>(co) * Ci + ci) * K;
              S* dxrow = need_dx ? xn->grad.data() + (static_cast<std::int64_t>(b) * Ci + ci) * T
                                 : nullptr;
              S* dwrow = need_dw ? wn->grad.data() + (static_cast<std::int64_t>(co) * Ci + ci) * K
                                 : nullptr;
              for (int k = 0; k < K; ++k) {
                int lo = std::max(0, (pad - k + stride - 1) / stride);
                int hi = std::min(To - 1, (T - 1 + pad - k) / stride);
                if (need_dx) {
                  const S wv = wrow[k];
                  S* xs = dxrow + lo * stride + k - pad;
                  for (int t = lo; t <= hi; ++t) xs[(t - lo) * stride] += wv * grow[t];
                }
                if (need_dw) {
                  const S* xs = xrow + lo * stride + k - pad;
                  S acc = S(0);
                  for (int t = lo; t <= hi; ++t) acc += grow[t] * xs[(t - lo) * stride];
                  dwrow[k] += acc;
                }
              }
            }
          }
        }
        if (bias.defined() && bias.node()->requires_grad) {
          auto bn = bias.node();
          bn->ensure_grad();
          for (int b = 0; b < B; ++b) {
            for (int co = 0; co < Co; ++co) {
              const S* grow = g + (static_cast<std::int64_t>(b) * Co + co) * To;
              S acc = S(0);
              for (int t = 0; t < To; ++t) acc += grow[t];
              bn->grad[co] += acc;
            }
          }
        }
      });
  return Tensor<S>(node);
}

// Nearest-neighbour doubling along time: (B, C, T) -> (B, C, 2T).
template <typename S>
Tensor<S> upsample2(const Tensor<S>& x) {
  tensor_check(x.ndim() == 3, "upsample2", "x must be (B,C,T)");
  const std::int64_t rows = static_cast<std::int64_t>(x.dim(0)) * x.dim(1);
  const int T = x.dim(2);
  std::vector<S> out(static_cast<std::size_t>(rows) * 2 * T);
  const S* px = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* src = px + r * T;
    S* dst = out.data() + r * 2 * T;
    for (int t = 0; t < T; ++t) {
      dst[2 * t] = src[t];
      dst[2 * t + 1] = src[t];
    }
  }
  auto node = detail::make_node<S>("upsample2", {x.dim(0), x.dim(1), 2 * T},
                                   std::move(out), {x},
      [x, rows, T](TensorNode<S>& self) {
        auto xn = x.node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* g = self.grad.data() + r * 2 * T;
          S* dst = xn->grad.data() + r * T;
          for (int t = 0; t < T; ++t) dst[t] += g[2 * t] + g[2 * t + 1];
        }
      });
  return Tensor<S>(node);
}

// ---- normalization / softmax ----

// Layer norm over the last dimension with learnable gain/bias.
template <typename S>
Tensor<S> layernorm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                    S eps = S(1e-5)) {
  const int D = x.dim(x.ndim() - 1);
  tensor_check(gain.numel() == D && bias.numel() == D, "layernorm", "gain/bias size mismatch");
  const std::int64_t rows = x.numel() / D;
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  std::vector<S> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<S> inv_std(static_cast<std::size_t>(rows));
  const S* px = x.data().data();
  const S* pg = gain.data().data();
  const S* pb = bias.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * D;
    S mean = S(0);
    for (int i = 0; i < D; ++i) mean += row[i];
    mean /= S(D);
    S var = S(0);
    for (int i = 0; i < D; ++i) {
      S d = row[i] - mean;
      var += d * d;
    }
    var /= S(D);
    const S inv = S(1) / std::sqrt(var + eps);
    inv_std[r] = inv;
    S* orow = out.data() + r * D;
    S* hrow = xhat.data() + r * D;
    for (int i = 0; i < D; ++i) {
      hrow[i] = (row[i] - mean) * inv;
      orow[i] = pg[i] * hrow[i] + pb[i];
    }
  }
  auto node = detail::make_node<S>("layernorm", x.shape(), std::move(out),
                                   {x, gain, bias},
      [x, gain, bias, D, rows, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](TensorNode<S>& self) {
        auto xn = x.node();
        auto gn = gain.node();
        auto bn = bias.node();
        const S* g = self.grad.data();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* grow = g + r * D;
          const S* hrow = xhat.data() + r * D;
          if (gn->requires_grad || bn->requires_grad) {
            for (int i = 0; i < D; ++i) {
              if (gn->requires_grad) gn->grad[i] += grow[i] * hrow[i];
              if (bn->requires_grad) bn->grad[i] += grow[i];
            }
          }
          if (xn->requires_grad) {
            // dx = inv * (dxh - mean(dxh) - xh * mean(dxh*xh))
            S sum_d = S(0), sum_dh = S(0);
            const S* pg = gain.data().data();
            for (int i = 0; i < D; ++i) {
              S d = grow[i] * pg[i];
              sum_d += d;
              sum_dh += d * hrow[i];
            }
            const S m1 = sum_d / S(D);
            const S m2 = sum_dh / S(D);
            S* dxrow = xn->grad.data() + r * D;
            const S inv = inv_std[r];
            for (int i = 0; i < D; ++i) {
              S d = grow[i] * pg[i];
              dxrow[i] += inv * (d - m1 - hrow[i] * m2);
            }
          }
        }
      });
  return Tensor<S>(node);
}

// Softmax over the last dimension. Callers add any attention mask to the
// logits beforehand; a -1e30 masked logit underflows to exactly zero weight,
// which is what makes padded and unpadded batches bit-identical.
template <typename S>
Tensor<S> softmax_lastdim(const Tensor<S>& x) {
  const int D = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.numel() / D;
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  const S* px = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * D;
    S mx = row[0];
    for (int i = 1; i < D; ++i) mx = std::max(mx, row[i]);
    S sum = S(0);
    S* orow = out.data() + r * D;
    for (int i = 0; i < D; ++i) {
      orow[i] = std::exp(row[i] - mx);
      sum += orow[i];
    }
    const S inv = S(1) / sum;
    for (int i = 0; i < D; ++i) orow[i] *= inv;
  }
  auto node = detail::make_node<S>("softmax", x.shape(), std::move(out), {x},
      [x, D, rows](TensorNode<S>& self) {
        auto xn = x.node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const S* g = self.grad.data();
        const S* y = self.val.data();
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* grow = g + r * D;
          const S* yrow = y + r * D;
          S dot = S(0);
          for (int i = 0; i < D; ++i) dot += grow[i] * yrow[i];
          S* dxrow = xn->grad.data() + r * D;
          for (int i = 0; i < D; ++i) dxrow[i] += yrow[i] * (grow[i] - dot);
        }
      });
  return Tensor<S>(node);
}

template <typename S>
Tensor<S> log_softmax_lastdim(const Tensor<S>& x) {
  const int D = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.numel() / D;
  std::vector<S> out(static_cast<std::size_t>(x.numel()));
  const S* px = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * D;
    S mx = row[0];
    for (int i = 1; i < D; ++i) mx = std::max(mx, row[i]);
    S sum = S(0);
    for (int i = 0; i < D; ++i) sum += std::exp(row[i] - mx);
    const S lse = mx + std::log(sum);
    S* orow = out.data() + r * D;
    for (int i = 0; i < D; ++i) orow[i] = row[i] - lse;
  }
  auto node = detail::make_node<S>("log_softmax", x.shape(), std::move(out), {x},
      [x, D, rows](TensorNode<S>& self) {
        auto xn = x.node();
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        const S* g = self.grad.data();
        const S* y = self.val.data();
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* grow = g + r * D;
          const S* yrow = y + r * D;
          S gsum = S(0);
          for (int i = 0; i < D; ++i) gsum += grow[i];
          S* dxrow = xn->grad.data() + r * D;
          for (int i = 0; i < D; ++i) dxrow[i] += grow[i] - std::exp(yrow[i]) * gsum;
        }
      });
  return Tensor<S>(node);
}

// ---- embedding lookup ----

// table: (V, D). ids: flat index list; out shape is prefix + {D}.
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids, Shape prefix) {
  tensor_check(table.ndim() == 2, "embedding", "table must be (V,D)");
  tensor_check(shape_numel(prefix) == static_cast<std::int64_t>(ids.size()), "embedding",
               "prefix shape does not cover id count");
  const int V = table.dim(0), D = table.dim(1);
  for (int id : ids) {
    tensor_check(id >= 0 && id < V, "embedding",
                 "id " + std::to_string(id) + " outside vocab of " + std::to_string(V));
  }
  Shape out_shape = prefix;
  out_shape.push_back(D);
  std::vector<S> out(ids.size() * static_cast<std::size_t>(D));
  const S* pt = table.data().data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy(pt + static_cast<std::int64_t>(ids[i]) * D,
              pt + static_cast<std::int64_t>(ids[i] + 1) * D, out.data() + i * D);
  }
  auto node = detail::make_node<S>("embedding", out_shape, std::move(out), {table},
      [table, ids, D](TensorNode<S>& self) {
        auto tn = table.node();
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (std::size_t i = 0; i < ids.size(); ++i) {
          const S* g = self.grad.data() + i * D;
          S* dst = tn->grad.data() + static_cast<std::int64_t>(ids[i]) * D;
          for (int d = 0; d < D; ++d) dst[d] += g[d];
        }
      });
  return Tensor<S>(node);
}

// ---- random constants ----

template <typename S>
Tensor<S> randn(Shape shape, Rng& rng) {
  std::vector<S> d(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : d) v = static_cast<S>(rng.normal());
  return Tensor<S>::constant(std::move(shape), std::move(d));
}

}  // namespace anchordiff
