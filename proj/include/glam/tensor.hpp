#pragma once

// Dense row-major tensor with reverse-mode automatic differentiation.
// T is double in checking mode (all property and gradient tests) and float
// in training mode; one computation graph uses a single scalar type
// throughout. The backward graph is built per forward pass and freed by
// backward().

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "glam/common.hpp"
#include "glam/rng.hpp"

namespace glam {

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // sized on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;

  i64 numel() const { return static_cast<i64>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
inline void gemm_nn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (i64 t = 0; t < k; ++t) {
      T av = ai[t];
      const T* bt = b + t * n;
      for (i64 j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
inline void gemm_nt(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (i64 j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc = T(0);
      for (i64 t = 0; t < k; ++t) acc += ai[t] * bj[t];
      ci[j] += acc;
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
inline void gemm_tn(const T* a, const T* b, T* c, i64 m, i64 k, i64 n) {
  for (i64 i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    const T* bi = b + i * n;
    for (i64 t = 0; t < k; ++t) {
      T av = ai[t];
      T* ct = c + t * n;
      for (i64 j = 0; j < n; ++j) ct[j] += av * bi[j];
    }
  }
}

inline int norm_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw IndexError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return a;
}

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor from_values(Shape shape, std::vector<T> v) {
    for (i64 e : shape)
      if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape));
    if (shape_numel(shape) != static_cast<i64>(v.size()))
      throw ShapeError("shape " + shape_str(shape) + " does not match " +
                       std::to_string(v.size()) + " values");
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(v);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    i64 n = shape_numel(shape);
    return from_values(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), T(0)));
  }

  static Tensor full(Shape shape, T v) {
    i64 n = shape_numel(shape);
    return from_values(std::move(shape), std::vector<T>(static_cast<std::size_t>(n), v));
  }

  static Tensor scalar(T v) { return from_values({1}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    i64 n = shape_numel(shape);
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return from_values(std::move(shape), std::move(v));
  }

  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
    i64 n = shape_numel(shape);
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return from_values(std::move(shape), std::move(v));
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev) {
    i64 n = shape_numel(shape);
    std::vector<T> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = static_cast<T>(rng.trunc_normal(stddev));
    return from_values(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  int rank() const { return static_cast<int>(node().shape.size()); }
  i64 numel() const { return node().numel(); }
  i64 dim(int i) const {
    return node().shape[static_cast<std::size_t>(detail::norm_axis(i, rank()))];
  }

  const std::vector<T>& values() const { return node().value; }
  // In-place edits of leaf values (optimizer steps, perturbation tests).
  // Only meaningful between graphs.
  std::vector<T>& mutable_values() { return node().value; }

  T item() const {
    if (numel() != 1)
      throw ContractError("item() on non-scalar tensor of shape " + shape_str(shape()));
    return node().value[0];
  }

  T at(const std::vector<i64>& idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size())
      throw IndexError("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                       std::to_string(s.size()));
    i64 flat = 0;
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (idx[d] < 0 || idx[d] >= s[d])
        throw IndexError("index " + std::to_string(idx[d]) + " out of range for extent " +
                         std::to_string(s[d]));
      flat = flat * s[d] + idx[d];
    }
    return node().value[static_cast<std::size_t>(flat)];
  }

  Tensor& set_requires_grad(bool b) {
    node().requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return node().requires_grad; }

  bool has_grad() const { return defined() && !node().grad.empty(); }
  const std::vector<T>& grad() const {
    if (node().grad.empty())
      throw ContractError("grad requested before backward populated it");
    return node().grad;
  }
  void zero_grad() { node().grad.assign(node().value.size(), T(0)); }

  // Same values, fresh leaf, no history.
  Tensor detach() const { return from_values(shape(), values()); }

  detail::Node<T>& node() const {
    if (!node_) throw ContractError("use of undefined tensor");
    return *node_;
  }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value,
                      std::initializer_list<Tensor<T>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p.node().requires_grad) n->requires_grad = true;
  }
  if (n->requires_grad) {
    for (const auto& p : parents) n->parents.push_back(p.node_ptr());
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
bool suffix_match(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  for (std::size_t i = 0; i < b.size(); ++i)
    if (b[i] != a[a.size() - b.size() + i]) return false;
  return true;
}

}  // namespace detail

// ---- elementwise ----------------------------------------------------------

// out = a + b, with b broadcast when its shape is a suffix of a's.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::suffix_match<T>(a.shape(), b.shape()))
    throw ShapeError("add: shape " + shape_str(b.shape()) + " is not a suffix of " +
                     shape_str(a.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  i64 bn = b.numel();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] + bv[i % static_cast<std::size_t>(bn)];
  FlopCounter::add(static_cast<u64>(av.size()));
  Tensor<T> r = detail::make_result<T>(a.shape(), std::move(out), {a, b});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    auto* pb = b.node_ptr().get();
    r.node().backprop = [pa, pb, bn](detail::Node<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i % static_cast<std::size_t>(bn)] += self.grad[i];
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::suffix_match<T>(a.shape(), b.shape()))
    throw ShapeError("sub: shape " + shape_str(b.shape()) + " is not a suffix of " +
                     shape_str(a.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  i64 bn = b.numel();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] - bv[i % static_cast<std::size_t>(bn)];
  FlopCounter::add(static_cast<u64>(av.size()));
  Tensor<T> r = detail::make_result<T>(a.shape(), std::move(out), {a, b});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    auto* pb = b.node_ptr().get();
    r.node().backprop = [pa, pb, bn](detail::Node<T>& self) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i % static_cast<std::size_t>(bn)] -= self.grad[i];
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (!detail::suffix_match<T>(a.shape(), b.shape()))
    throw ShapeError("mul: shape " + shape_str(b.shape()) + " is not a suffix of " +
                     shape_str(a.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  i64 bn = b.numel();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i)
    out[i] = av[i] * bv[i % static_cast<std::size_t>(bn)];
  FlopCounter::add(static_cast<u64>(av.size()));
  Tensor<T> r = detail::make_result<T>(a.shape(), std::move(out), {a, b});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    auto* pb = b.node_ptr().get();
    r.node().backprop = [pa, pb, bn](detail::Node<T>& self) {
      std::size_t bs = static_cast<std::size_t>(bn);
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i % bs];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i % bs] += self.grad[i] * pa->value[i];
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  FlopCounter::add(static_cast<u64>(av.size()));
  Tensor<T> r = detail::make_result<T>(a.shape(), std::move(out), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa, c](detail::Node<T>& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * c;
    };
  }
  return r;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
  for (std::size_t i = 0; i < av.size(); ++i) {
    double x = static_cast<double>(av[i]);
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
  }
  FlopCounter::add(6ull * av.size());
  Tensor<T> r = detail::make_result<T>(a.shape(), std::move(out), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa](detail::Node<T>& self) {
      constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        double x = static_cast<double>(pa->value[i]);
        double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440084436210485));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        pa->grad[i] += self.grad[i] * static_cast<T>(cdf + x * pdf);
      }
    };
  }
  return r;
}

// ---- matmul ---------------------------------------------------------------

// a: [..., m, k]. b: either [k, n] (shared weight) or [..., k, n] with
// identical leading dims (batched). No other broadcasting.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2)
    throw ShapeError("matmul: rank must be >= 2, got " + shape_str(as) + " x " +
                     shape_str(bs));
  i64 m = as[as.size() - 2];
  i64 k = as[as.size() - 1];
  bool weight_case = bs.size() == 2 && as.size() > 2;
  if (bs.size() == 2 && as.size() == 2) weight_case = true;
  if (!weight_case) {
    if (bs.size() != as.size() ||
        !std::equal(as.begin(), as.end() - 2, bs.begin()))
      throw ShapeError("matmul: incompatible batch dims " + shape_str(as) + " x " +
                       shape_str(bs));
  }
  i64 kb = bs[bs.size() - 2];
  i64 n = bs[bs.size() - 1];
  if (k != kb)
    throw ShapeError("matmul: inner extents differ, " + shape_str(as) + " x " +
                     shape_str(bs));

  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  i64 batch = 1;
  for (std::size_t i = 0; i + 2 < as.size(); ++i) batch *= as[i];

  std::vector<T> out(static_cast<std::size_t>(batch * m * n), T(0));
  const T* ap = a.values().data();
  const T* bp = b.values().data();
  if (weight_case) {
    detail::gemm_nn(ap, bp, out.data(), batch * m, k, n);
  } else {
    for (i64 s = 0; s < batch; ++s)
      detail::gemm_nn(ap + s * m * k, bp + s * k * n, out.data() + s * m * n, m, k, n);
  }
  FlopCounter::add(2ull * static_cast<u64>(batch * m) * static_cast<u64>(k) *
                   static_cast<u64>(n));

  Tensor<T> r = detail::make_result<T>(std::move(out_shape), std::move(out), {a, b});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    auto* pb = b.node_ptr().get();
    r.node().backprop = [pa, pb, m, k, n, batch, weight_case](detail::Node<T>& self) {
      const T* g = self.grad.data();
      if (pa->requires_grad) {
        pa->ensure_grad();
        if (weight_case) {
          detail::gemm_nt(g, pb->value.data(), pa->grad.data(), batch * m, n, k);
        } else {
          for (i64 s = 0; s < batch; ++s)
            detail::gemm_nt(g + s * m * n, pb->value.data() + s * k * n,
                            pa->grad.data() + s * m * k, m, n, k);
        }
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        if (weight_case) {
          detail::gemm_tn(pa->value.data(), g, pb->grad.data(), batch * m, k, n);
        } else {
          for (i64 s = 0; s < batch; ++s)
            detail::gemm_tn(pa->value.data() + s * m * k, g + s * m * n,
                            pb->grad.data() + s * k * n, m, k, n);
        }
      }
    };
  }
  return r;
}

// ---- data movement --------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                     " changes element count");
  Tensor<T> r = detail::make_result<T>(std::move(shape), a.values(), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa](detail::Node<T>& self) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
    };
  }
  return r;
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ShapeError("transpose_last2: rank < 2, " + shape_str(s));
  i64 m = s[s.size() - 2];
  i64 n = s[s.size() - 1];
  i64 batch = a.numel() / (m * n);
  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  std::vector<T> out(a.values().size());
  const T* ap = a.values().data();
  for (i64 b = 0; b < batch; ++b) {
    const T* src = ap + b * m * n;
    T* dst = out.data() + b * m * n;
    for (i64 i = 0; i < m; ++i)
      for (i64 j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  Tensor<T> r = detail::make_result<T>(std::move(out_shape), std::move(out), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa, m, n, batch](detail::Node<T>& self) {
      pa->ensure_grad();
      for (i64 b = 0; b < batch; ++b) {
        const T* g = self.grad.data() + b * m * n;  // g is [n, m]
        T* dst = pa->grad.data() + b * m * n;
        for (i64 j = 0; j < n; ++j)
          for (i64 i = 0; i < m; ++i) dst[i * n + j] += g[j * m + i];
      }
    };
  }
  return r;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  if (parts.size() == 1) return parts[0];
  int rank = parts[0].rank();
  int ax = detail::norm_axis(axis, rank);
  Shape out_shape = parts[0].shape();
  i64 total_axis = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    if (static_cast<int>(ps.size()) != rank)
      throw ShapeError("concat: rank mismatch " + shape_str(ps));
    for (int d = 0; d < rank; ++d)
      if (d != ax && ps[d] != out_shape[d])
        throw ShapeError("concat: shape mismatch " + shape_str(ps) + " vs " +
                         shape_str(out_shape) + " on axis " + std::to_string(d));
    total_axis += ps[ax];
  }
  out_shape[ax] = total_axis;

  i64 outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= out_shape[d];
  for (int d = ax + 1; d < rank; ++d) inner *= out_shape[d];

  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  i64 offset = 0;  // in axis units
  for (const auto& p : parts) {
    i64 pa = p.shape()[ax];
    const T* src = p.values().data();
    for (i64 o = 0; o < outer; ++o)
      std::copy(src + o * pa * inner, src + (o + 1) * pa * inner,
                out.data() + (o * total_axis + offset) * inner);
    offset += pa;
  }

  auto n = std::make_shared<detail::Node<T>>();
  n->shape = std::move(out_shape);
  n->value = std::move(out);
  for (const auto& p : parts)
    if (p.node().requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    std::vector<detail::Node<T>*> raw;
    for (const auto& p : parts) {
      n->parents.push_back(p.node_ptr());
      raw.push_back(p.node_ptr().get());
    }
    i64 ta = total_axis;
    n->backprop = [raw, outer, inner, ta](detail::Node<T>& self) {
      i64 offset = 0;
      for (auto* p : raw) {
        i64 pa = p->numel() / (outer * inner);
        if (p->requires_grad) {
          p->ensure_grad();
          for (i64 o = 0; o < outer; ++o) {
            const T* g = self.grad.data() + (o * ta + offset) * inner;
            T* dst = p->grad.data() + o * pa * inner;
            for (i64 i = 0; i < pa * inner; ++i) dst[i] += g[i];
          }
        }
        offset += pa;
      }
    };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, i64 start, i64 len) {
  const Shape& s = a.shape();
  int ax = detail::norm_axis(axis, a.rank());
  if (start < 0 || len <= 0 || start + len > s[ax])
    throw IndexError("slice [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of range for extent " +
                     std::to_string(s[ax]));
  i64 outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= s[d];
  for (int d = ax + 1; d < a.rank(); ++d) inner *= s[d];
  i64 ext = s[ax];

  Shape out_shape = s;
  out_shape[ax] = len;
  std::vector<T> out(static_cast<std::size_t>(outer * len * inner));
  const T* src = a.values().data();
  for (i64 o = 0; o < outer; ++o)
    std::copy(src + (o * ext + start) * inner, src + (o * ext + start + len) * inner,
              out.data() + o * len * inner);

  Tensor<T> r = detail::make_result<T>(std::move(out_shape), std::move(out), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa, outer, inner, ext, start, len](detail::Node<T>& self) {
      pa->ensure_grad();
      for (i64 o = 0; o < outer; ++o) {
        const T* g = self.grad.data() + o * len * inner;
        T* dst = pa->grad.data() + (o * ext + start) * inner;
        for (i64 i = 0; i < len * inner; ++i) dst[i] += g[i];
      }
    };
  }
  return r;
}

// Gather along an axis; indices may repeat (backward scatter-adds).
template <typename T>
Tensor<T> index_select(const Tensor<T>& a, int axis, const std::vector<i64>& indices) {
  const Shape& s = a.shape();
  int ax = detail::norm_axis(axis, a.rank());
  i64 ext = s[ax];
  for (i64 idx : indices)
    if (idx < 0 || idx >= ext)
      throw IndexError("index_select: index " + std::to_string(idx) +
                       " out of range for extent " + std::to_string(ext));
  i64 outer = 1, inner = 1;
  for (int d = 0; d < ax; ++d) outer *= s[d];
  for (int d = ax + 1; d < a.rank(); ++d) inner *= s[d];
  i64 len = static_cast<i64>(indices.size());

  Shape out_shape = s;
  out_shape[ax] = len;
  std::vector<T> out(static_cast<std::size_t>(outer * len * inner));
  const T* src = a.values().data();
  for (i64 o = 0; o < outer; ++o)
    for (i64 i = 0; i < len; ++i)
      std::copy(src + (o * ext + indices[i]) * inner,
                src + (o * ext + indices[i] + 1) * inner,
                out.data() + (o * len + i) * inner);

  Tensor<T> r = detail::make_result<T>(std::move(out_shape), std::move(out), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    auto idx_copy = indices;
    r.node().backprop = [pa, outer, inner, ext, idx_copy](detail::Node<T>& self) {
      pa->ensure_grad();
      i64 len = static_cast<i64>(idx_copy.size());
      for (i64 o = 0; o < outer; ++o)
        for (i64 i = 0; i < len; ++i) {
          const T* g = self.grad.data() + (o * len + i) * inner;
          T* dst = pa->grad.data() + (o * ext + idx_copy[i]) * inner;
          for (i64 t = 0; t < inner; ++t) dst[t] += g[t];
        }
    };
  }
  return r;
}

// Tile a tensor over new leading dimensions, e.g. [Ng, C] -> [B, Nr, Ng, C].
template <typename T>
Tensor<T> expand_leading(const Tensor<T>& a, const Shape& leading) {
  i64 copies = 1;
  for (i64 e : leading) {
    if (e <= 0) throw ShapeError("expand_leading: non-positive extent");
    copies *= e;
  }
  Shape out_shape = leading;
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  i64 an = a.numel();
  std::vector<T> out(static_cast<std::size_t>(copies * an));
  for (i64 c = 0; c < copies; ++c)
    std::copy(a.values().begin(), a.values().end(), out.begin() + c * an);
  Tensor<T> r = detail::make_result<T>(std::move(out_shape), std::move(out), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa, copies, an](detail::Node<T>& self) {
      pa->ensure_grad();
      for (i64 c = 0; c < copies; ++c) {
        const T* g = self.grad.data() + c * an;
        for (i64 i = 0; i < an; ++i) pa->grad[i] += g[i];
      }
    };
  }
  return r;
}

// ---- normalization / softmax ----------------------------------------------

// Row softmax over the last axis with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  const Shape& s = a.shape();
  i64 n = s.back();
  i64 rows = a.numel() / n;
  const auto& av = a.values();
  for (T v : av)
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("softmax_rows: non-finite input");
  std::vector<T> out(av.size());
  for (i64 rIdx = 0; rIdx < rows; ++rIdx) {
    const T* x = av.data() + rIdx * n;
    T* y = out.data() + rIdx * n;
    T mx = x[0];
    for (i64 j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    T sum = T(0);
    for (i64 j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      sum += y[j];
    }
    T inv = T(1) / sum;
    for (i64 j = 0; j < n; ++j) y[j] *= inv;
  }
  FlopCounter::add(5ull * av.size());
  Tensor<T> r = detail::make_result<T>(s, std::move(out), {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa, n, rows](detail::Node<T>& self) {
      pa->ensure_grad();
      for (i64 rIdx = 0; rIdx < rows; ++rIdx) {
        const T* y = self.value.data() + rIdx * n;
        const T* dy = self.grad.data() + rIdx * n;
        T* dx = pa->grad.data() + rIdx * n;
        T dot = T(0);
        for (i64 j = 0; j < n; ++j) dot += dy[j] * y[j];
        for (i64 j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
      }
    };
  }
  return r;
}

// Per-token layer norm over the last axis, affine params gamma/beta of
// shape [C]. Epsilon 1e-5 inside the square root.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5) {
  const Shape& s = x.shape();
  i64 c = s.back();
  if (gamma.rank() != 1 || gamma.dim(0) != c || beta.rank() != 1 || beta.dim(0) != c)
    throw ShapeError("layer_norm: params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match channels " +
                     std::to_string(c));
  i64 rows = x.numel() / c;
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<T> out(xv.size());
  std::vector<T> xhat(xv.size());
  std::vector<T> istd(static_cast<std::size_t>(rows));
  for (i64 t = 0; t < rows; ++t) {
    const T* xr = xv.data() + t * c;
    double mean = 0;
    for (i64 j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<double>(c);
    double var = 0;
    for (i64 j = 0; j < c; ++j) {
      double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    double inv = 1.0 / std::sqrt(var + eps);
    istd[t] = static_cast<T>(inv);
    T* xh = xhat.data() + t * c;
    T* y = out.data() + t * c;
    for (i64 j = 0; j < c; ++j) {
      xh[j] = static_cast<T>((xr[j] - mean) * inv);
      y[j] = xh[j] * gv[j] + bv[j];
    }
  }
  FlopCounter::add(8ull * xv.size());
  Tensor<T> r = detail::make_result<T>(s, std::move(out), {x, gamma, beta});
  if (r.requires_grad()) {
    auto* px = x.node_ptr().get();
    auto* pg = gamma.node_ptr().get();
    auto* pb = beta.node_ptr().get();
    r.node().backprop = [px, pg, pb, rows, c, xhat = std::move(xhat),
                         istd = std::move(istd)](detail::Node<T>& self) {
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      if (px->requires_grad) px->ensure_grad();
      for (i64 t = 0; t < rows; ++t) {
        const T* dy = self.grad.data() + t * c;
        const T* xh = xhat.data() + t * c;
        if (pg->requires_grad)
          for (i64 j = 0; j < c; ++j) pg->grad[j] += dy[j] * xh[j];
        if (pb->requires_grad)
          for (i64 j = 0; j < c; ++j) pb->grad[j] += dy[j];
        if (px->requires_grad) {
          T* dx = px->grad.data() + t * c;
          double sum_dyh = 0, sum_dyh_xh = 0;
          for (i64 j = 0; j < c; ++j) {
            double dyh = static_cast<double>(dy[j]) * pg->value[j];
            sum_dyh += dyh;
            sum_dyh_xh += dyh * xh[j];
          }
          double mean_dyh = sum_dyh / static_cast<double>(c);
          double mean_dyh_xh = sum_dyh_xh / static_cast<double>(c);
          for (i64 j = 0; j < c; ++j) {
            double dyh = static_cast<double>(dy[j]) * pg->value[j];
            dx[j] += static_cast<T>(istd[t] * (dyh - mean_dyh - xh[j] * mean_dyh_xh));
          }
        }
      }
    };
  }
  return r;
}

// ---- reductions / loss ----------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  const auto& av = a.values();
  T s = T(0);
  for (T v : av) s += v;
  FlopCounter::add(static_cast<u64>(av.size()));
  Tensor<T> r = detail::make_result<T>({1}, {s}, {a});
  if (r.requires_grad()) {
    auto* pa = a.node_ptr().get();
    r.node().backprop = [pa](detail::Node<T>& self) {
      pa->ensure_grad();
      T g = self.grad[0];
      for (auto& v : pa->grad) v += g;
    };
  }
  return r;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), static_cast<T>(1.0 / static_cast<double>(a.numel())));
}

// Mean softmax cross-entropy over all rows whose label is not ignore_index.
// logits: [..., K]; labels.size() == numel / K. An all-ignored batch yields
// loss 0 with zero gradient.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                                int ignore_index = -1) {
  const Shape& s = logits.shape();
  i64 k = s.back();
  i64 rows = logits.numel() / k;
  if (static_cast<i64>(labels.size()) != rows)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(rows) + " rows");
  const auto& lv = logits.values();
  for (T v : lv)
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError("cross_entropy: non-finite logits");
  i64 counted = 0;
  double total = 0;
  for (i64 t = 0; t < rows; ++t) {
    int y = labels[t];
    if (y == ignore_index) continue;
    if (y < 0 || y >= k)
      throw ContractError("cross_entropy: label " + std::to_string(y) +
                          " outside [0, " + std::to_string(k) + ")");
    const T* x = lv.data() + t * k;
    double mx = x[0];
    for (i64 j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(x[j]));
    double se = 0;
    for (i64 j = 0; j < k; ++j) se += std::exp(static_cast<double>(x[j]) - mx);
    total += mx + std::log(se) - static_cast<double>(x[y]);
    ++counted;
  }
  T loss = counted ? static_cast<T>(total / static_cast<double>(counted)) : T(0);
  Tensor<T> r = detail::make_result<T>({1}, {loss}, {logits});
  if (r.requires_grad()) {
    auto* pl = logits.node_ptr().get();
    auto labels_copy = labels;
    r.node().backprop = [pl, labels_copy, k, rows, counted,
                         ignore_index](detail::Node<T>& self) {
      pl->ensure_grad();
      if (!counted) return;
      T g = self.grad[0] / static_cast<T>(counted);
      for (i64 t = 0; t < rows; ++t) {
        int y = labels_copy[t];
        if (y == ignore_index) continue;
        const T* x = pl->value.data() + t * k;
        T* dx = pl->grad.data() + t * k;
        double mx = x[0];
        for (i64 j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(x[j]));
        double se = 0;
        for (i64 j = 0; j < k; ++j) se += std::exp(static_cast<double>(x[j]) - mx);
        for (i64 j = 0; j < k; ++j) {
          double p = std::exp(static_cast<double>(x[j]) - mx) / se;
          dx[j] += g * static_cast<T>(p - (j == y ? 1.0 : 0.0));
        }
      }
    };
  }
  return r;
}

// ---- backward -------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Visits each node exactly once in
// reverse topological order, then frees the graph (parent links and
// closures); leaf gradients are kept for the optimizer.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1)
    throw ContractError("backward on non-scalar tensor of shape " +
                        shape_str(loss.shape()));
  using NodeT = detail::Node<T>;
  NodeT* root = loss.node_ptr().get();
  if (!root->requires_grad) return;

  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
  for (NodeT* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
  }
}

// ---- sugar ----------------------------------------------------------------

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

}  // namespace glam
