// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
//
// Dense float tensors with tape-based reverse-mode differentiation.
//
// Design notes:
//  - BasicTensor<T> is a cheap handle onto an immutable Node. Ops never
//    mutate consumed nodes, so read-only sharing across threads is safe.
//  - The op set is fixed: matmul, transpose, elementwise add/sub/mul/div,
//    scalar ops, exp, log, sigmoid, gelu, silu, maximum, abs, sum/mean over
//    an axis, layer_norm over the last axis, reverse, concat, slice.
//  - Elementwise ops broadcast a scalar (numel 1) or a shape that is a
//    suffix of the other operand's shape (a leading batch axis).
//  - backward() walks nodes in reverse creation order, which is a valid
//    topological order because the graph is append-only.
//  - The whole core is templated on the scalar type. The product uses
//    float; the double instantiation exists for the finite-difference
//    oracle in grad_check.

#pragma once

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "axlstm/common.hpp"

namespace axlstm::num {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

/// When set, every op validates that its output is finite and throws a
/// flagged error otherwise. Off by default; selftest turns it on.
inline std::atomic<bool> g_debug_checks{false};

template <class T>
struct Node;

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Routes leaf gradients into an external map instead of the shared leaf
/// nodes, so independent tapes can run backward concurrently while sharing
/// parameter nodes.
template <class T>
using LeafGradMap = std::unordered_map<const Node<T>*, std::vector<T>>;

template <class T>
struct GradSink {
  LeafGradMap<T>* external = nullptr;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  uint64_t id = 0;
  std::vector<NodePtr<T>> parents;
  std::function<void(Node<T>&, GradSink<T>&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool is_leaf() const { return parents.empty(); }
};

template <class T>
inline uint64_t next_node_id() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

template <class T>
class BasicTensor {
 public:
  BasicTensor() = default;
  explicit BasicTensor(NodePtr<T> node) : node_(std::move(node)) {}

  static BasicTensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
  static BasicTensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static BasicTensor full(Shape shape, T value) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data.assign(shape_numel(n->shape), value);
    n->id = next_node_id<T>();
    return BasicTensor(std::move(n));
  }

  static BasicTensor from_vector(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("from_vector: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->id = next_node_id<T>();
    return BasicTensor(std::move(n));
  }

  static BasicTensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return from_vector(std::move(shape), std::move(v));
  }

  static BasicTensor rand_uniform(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return from_vector(std::move(shape), std::move(v));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return node_->numel(); }

  const std::vector<T>& data() const { return node_->data; }

  /// Direct mutation is only allowed on leaves (optimizer updates, fd
  /// perturbations). Interior nodes are frozen once created.
  std::vector<T>& mutable_data() {
    if (!node_->is_leaf()) throw Error("mutable_data: only leaf tensors may be mutated");
    return node_->data;
  }

  T item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
    return node_->data[0];
  }

  T at(int64_t i) const { return node_->data[static_cast<size_t>(i)]; }
  T at(int64_t i, int64_t j) const {
    return node_->data[static_cast<size_t>(i * node_->shape[1] + j)];
  }

  bool requires_grad() const { return node_->requires_grad; }

  BasicTensor& set_requires_grad(bool v) {
    if (!node_->is_leaf()) throw Error("set_requires_grad: not a leaf");
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  const std::vector<T>& grad() const {
    if (node_->grad.empty()) throw Error("grad: no gradient present; run backward first");
    return node_->grad;
  }

  void zero_grad() { node_->grad.clear(); }

  /// A fresh leaf holding a copy of the data, cut off from the tape.
  BasicTensor detach() const {
    auto n = std::make_shared<Node<T>>();
    n->shape = node_->shape;
    n->data = node_->data;
    n->id = next_node_id<T>();
    return BasicTensor(std::move(n));
  }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> v(node_->data.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<U>(node_->data[i]);
    return BasicTensor<U>::from_vector(node_->shape, std::move(v));
  }

  const NodePtr<T>& node() const { return node_; }

 private:
  NodePtr<T> node_;
};

using Tensor = BasicTensor<float>;
using DTensor = BasicTensor<double>;

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

template <class T>
inline void check_finite(const char* op, const Node<T>& n) {
  if (!g_debug_checks.load(std::memory_order_relaxed)) return;
  for (size_t i = 0; i < n.data.size(); ++i)
    if (!std::isfinite(static_cast<double>(n.data[i])))
      throw Error(std::string(op) + ": non-finite output at element " + std::to_string(i));
}

template <class T>
inline std::vector<T>& grad_buffer(Node<T>& n, GradSink<T>& sink) {
  if (sink.external && n.is_leaf() && n.requires_grad) {
    auto& buf = (*sink.external)[&n];
    if (buf.empty()) buf.assign(n.data.size(), T(0));
    return buf;
  }
  if (n.grad.empty()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

template <class T>
inline NodePtr<T> make_node(Shape shape, std::vector<T> data,
                            std::initializer_list<NodePtr<T>> parents,
                            std::function<void(Node<T>&, GradSink<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->id = next_node_id<T>();
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad;
  if (needs) {
    n->requires_grad = true;
    n->parents.assign(parents);
    n->backprop = std::move(fn);
  }
  return n;
}

// Broadcast layout for binary elementwise ops: equal shapes, a scalar on
// either side, or one shape being a suffix of the other.
struct Bcast {
  Shape out;
  int64_t inner = 1;    // numel of the smaller operand
  bool a_small = false; // which side repeats
  bool b_small = false;
};

inline Bcast resolve_bcast(const char* op, const Shape& a, const Shape& b) {
  Bcast r;
  if (a == b) {
    r.out = a;
    r.inner = shape_numel(a);
    return r;
  }
  auto suffix = [](const Shape& big, const Shape& small) {
    if (small.size() >= big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (shape_numel(b) == 1 || suffix(a, b)) {
    r.out = a;
    r.inner = shape_numel(b);
    r.b_small = true;
    return r;
  }
  if (shape_numel(a) == 1 || suffix(b, a)) {
    r.out = b;
    r.inner = shape_numel(a);
    r.a_small = true;
    return r;
  }
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                   " do not broadcast");
}

// Sum `g` (shaped like the broadcast output) down to the small operand.
template <class T>
inline void reduce_into(const std::vector<T>& g, std::vector<T>& dst, int64_t inner) {
  const int64_t repeats = static_cast<int64_t>(g.size()) / inner;
  for (int64_t r = 0; r < repeats; ++r)
    for (int64_t i = 0; i < inner; ++i) dst[static_cast<size_t>(i)] += g[static_cast<size_t>(r * inner + i)];
}

// Entering a libgomp parallel region costs far more than a small GEMM, so
// parallel and serial loops are separate code paths rather than an if-clause
// on the pragma. Worker regions are skipped entirely for small work and when
// already inside a parallel region (batch-level parallelism owns the
// threads then).
inline bool mm_use_threads(int64_t work) { return work >= (1 << 19) && !omp_in_parallel(); }

// Raw GEMM helpers. Row accumulation keeps the inner loop contiguous and
// lets the compiler vectorize; each output element is produced by exactly
// one thread in a fixed order, so results are thread-count independent.
template <class T>
inline void mm_nn_row(const T* a, const T* b, T* c, int64_t i, int64_t k, int64_t n) {
  T* ci = c + i * n;
  for (int64_t j = 0; j < n; ++j) ci[j] = T(0);
  const T* ai = a + i * k;
  for (int64_t p = 0; p < k; ++p) {
    const T aip = ai[p];
    const T* bp = b + p * n;
    for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
  }
}

template <class T>
inline void mm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  if (mm_use_threads(m * k * n)) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a, b, c, i, k, n);
  } else {
    for (int64_t i = 0; i < m; ++i) mm_nn_row(a, b, c, i, k, n);
  }
}

// c (m x n) += a (m x k) * b^T where b is (n x k)
template <class T>
inline void mm_nt_row(const T* a, const T* b, T* c, int64_t i, int64_t k, int64_t n) {
  const T* ai = a + i * k;
  T* ci = c + i * n;
  for (int64_t j = 0; j < n; ++j) {
    const T* bj = b + j * k;
    T acc = T(0);
#pragma omp simd reduction(+ : acc)
    for (int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
    ci[j] += acc;
  }
}

template <class T>
inline void mm_nt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  if (mm_use_threads(m * k * n)) {
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < m; ++i) mm_nt_row(a, b, c, i, k, n);
  } else {
    for (int64_t i = 0; i < m; ++i) mm_nt_row(a, b, c, i, k, n);
  }
}

// c (k x n) += a^T * g where a is (m x k), g is (m x n)
template <class T>
inline void mm_tn_col(const T* a, const T* g, T* c, int64_t p, int64_t m, int64_t k, int64_t n) {
  T* cp = c + p * n;
  for (int64_t i = 0; i < m; ++i) {
    const T aip = a[i * k + p];
    const T* gi = g + i * n;
    for (int64_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
  }
}

template <class T>
inline void mm_tn_acc(const T* a, const T* g, T* c, int64_t m, int64_t k, int64_t n) {
  if (mm_use_threads(m * k * n)) {
#pragma omp parallel for schedule(static)
    for (int64_t p = 0; p < k; ++p) mm_tn_col(a, g, c, p, m, k, n);
  } else {
    for (int64_t p = 0; p < k; ++p) mm_tn_col(a, g, c, p, m, k, n);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <class T>
inline void backward_with_sink(const BasicTensor<T>& loss, GradSink<T> sink) {
  Node<T>* root = loss.node().get();
  if (root->numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(root->shape));
  if (!root->requires_grad) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const Node<T>* a, const Node<T>* b) { return a->id > b->id; });

  for (Node<T>* n : order) {
    auto& buf = detail::grad_buffer(*n, sink);
    std::fill(buf.begin(), buf.end(), T(0));
  }
  detail::grad_buffer(*root, sink)[0] = T(1);
  for (Node<T>* n : order)
    if (n->backprop) n->backprop(*n, sink);
}

/// Populates .grad on every requires_grad leaf reachable from `loss`.
template <class T>
inline void backward(const BasicTensor<T>& loss) {
  backward_with_sink(loss, GradSink<T>{});
}

/// Thread-safe variant: leaf gradients land in `out` instead of the shared
/// leaf nodes. Used for batch parallelism over independent tapes.
template <class T>
inline void backward(const BasicTensor<T>& loss, LeafGradMap<T>& out) {
  backward_with_sink(loss, GradSink<T>{&out});
}

// ---------------------------------------------------------------------------
// ops

template <class T>
inline BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not conform");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<size_t>(m * n));
  detail::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto node = detail::make_node<T>(
      {m, n}, std::move(out), {a.node(), b.node()},
      [m, k, n](Node<T>& self, GradSink<T>& sink) {
        const auto& g = self.grad;
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        if (pa.requires_grad)
          detail::mm_nt_acc(g.data(), pb.data.data(), detail::grad_buffer(pa, sink).data(), m, n, k);
        if (pb.requires_grad)
          detail::mm_tn_acc(pa.data.data(), g.data(), detail::grad_buffer(pb, sink).data(), m, k, n);
      });
  detail::check_finite("matmul", *node);
  return BasicTensor<T>(std::move(node));
}

/// Transpose of the last two axes (rank-2 only in this core).
template <class T>
inline BasicTensor<T> transpose(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const int64_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(static_cast<size_t>(r * c));
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j) out[static_cast<size_t>(j * r + i)] = a.at(i, j);
  auto node = detail::make_node<T>(
      {c, r}, std::move(out), {a.node()}, [r, c](Node<T>& self, GradSink<T>& sink) {
        Node<T>& p = *self.parents[0];
        auto& gp = detail::grad_buffer(p, sink);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            gp[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(j * r + i)];
      });
  return BasicTensor<T>(std::move(node));
}

namespace detail {

// Shared machinery for broadcasting binary elementwise ops.
// fwd(x, y) -> out; bwd(g, x, y, out) -> pair of local grads.
template <class T, class Fwd, class Bwd>
inline BasicTensor<T> binary_op(const char* name, const BasicTensor<T>& a, const BasicTensor<T>& b,
                                Fwd fwd, Bwd bwd) {
  Bcast bc = resolve_bcast(name, a.shape(), b.shape());
  const int64_t total = shape_numel(bc.out);
  const int64_t inner = bc.inner;
  const bool broadcast = bc.a_small || bc.b_small;
  const bool a_small = bc.a_small, b_small = bc.b_small;
  std::vector<T> out(static_cast<size_t>(total));
  {
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    if (!broadcast) {
      for (int64_t i = 0; i < total; ++i) out[static_cast<size_t>(i)] = fwd(pa[i], pb[i]);
    } else {
      // the small operand repeats every `inner` elements
      for (int64_t base = 0; base < total; base += inner)
        for (int64_t i = 0; i < inner; ++i)
          out[static_cast<size_t>(base + i)] =
              fwd(pa[a_small ? i : base + i], pb[b_small ? i : base + i]);
    }
  }
  auto node = detail::make_node<T>(
      bc.out, std::move(out), {a.node(), b.node()},
      [inner, broadcast, a_small, b_small, bwd](Node<T>& self, GradSink<T>& sink) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        const int64_t total = self.numel();
        const T* x = pa.data.data();
        const T* y = pb.data.data();
        T* ga = pa.requires_grad ? grad_buffer(pa, sink).data() : nullptr;
        T* gb = pb.requires_grad ? grad_buffer(pb, sink).data() : nullptr;
        if (!broadcast) {
          for (int64_t i = 0; i < total; ++i) {
            auto [da, db] = bwd(self.grad[static_cast<size_t>(i)], x[i], y[i],
                                self.data[static_cast<size_t>(i)]);
            if (ga) ga[i] += da;
            if (gb) gb[i] += db;
          }
        } else {
          for (int64_t base = 0; base < total; base += inner)
            for (int64_t i = 0; i < inner; ++i) {
              const int64_t ia = a_small ? i : base + i;
              const int64_t ib = b_small ? i : base + i;
              auto [da, db] = bwd(self.grad[static_cast<size_t>(base + i)], x[ia], y[ib],
                                  self.data[static_cast<size_t>(base + i)]);
              if (ga) ga[ia] += da;
              if (gb) gb[ib] += db;
            }
        }
      });
  detail::check_finite(name, *node);
  return BasicTensor<T>(std::move(node));
}

template <class T, class Fwd, class Bwd>
inline BasicTensor<T> unary_op(const char* name, const BasicTensor<T>& a, Fwd fwd, Bwd bwd) {
  std::vector<T> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  auto node = detail::make_node<T>(
      a.shape(), std::move(out), {a.node()}, [bwd](Node<T>& self, GradSink<T>& sink) {
        Node<T>& p = *self.parents[0];
        auto& gp = grad_buffer(p, sink);
        for (size_t i = 0; i < gp.size(); ++i)
          gp[i] += bwd(self.grad[i], p.data[i], self.data[i]);
      });
  detail::check_finite(name, *node);
  return BasicTensor<T>(std::move(node));
}

}  // namespace detail

template <class T>
inline BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; },
      [](T g, T, T, T) { return std::pair<T, T>(g, g); });
}

template <class T>
inline BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; },
      [](T g, T, T, T) { return std::pair<T, T>(g, -g); });
}

template <class T>
inline BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; },
      [](T g, T x, T y, T) { return std::pair<T, T>(g * y, g * x); });
}

template <class T>
inline BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; },
      [](T g, T x, T y, T) { return std::pair<T, T>(g / y, -g * x / (y * y)); });
}

/// Elementwise max; ties route the gradient to the first operand.
template <class T>
inline BasicTensor<T> maximum(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return detail::binary_op<T>(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T g, T x, T y, T) {
        return x >= y ? std::pair<T, T>(g, T(0)) : std::pair<T, T>(T(0), g);
      });
}

template <class T>
inline BasicTensor<T> smul(const BasicTensor<T>& a, double s) {
  const T ts = static_cast<T>(s);
  return detail::unary_op<T>(
      "smul", a, [ts](T x) { return x * ts; }, [ts](T g, T, T) { return g * ts; });
}

template <class T>
inline BasicTensor<T> sadd(const BasicTensor<T>& a, double s) {
  const T ts = static_cast<T>(s);
  return detail::unary_op<T>(
      "sadd", a, [ts](T x) { return x + ts; }, [](T g, T, T) { return g; });
}

template <class T>
inline BasicTensor<T> exp(const BasicTensor<T>& a) {
  return detail::unary_op<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T g, T, T y) { return g * y; });
}

template <class T>
inline BasicTensor<T> log(const BasicTensor<T>& a) {
  return detail::unary_op<T>(
      "log", a, [](T x) { return std::log(x); }, [](T g, T x, T) { return g / x; });
}

template <class T>
inline BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
  return detail::unary_op<T>(
      "sigmoid", a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T g, T, T y) { return g * y * (T(1) - y); });
}

template <class T>
inline BasicTensor<T> gelu(const BasicTensor<T>& a) {
  constexpr double kInvSqrt2 = 0.7071067811865476;
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return detail::unary_op<T>(
      "gelu", a,
      [](T x) {
        return static_cast<T>(0.5 * static_cast<double>(x) *
                              (1.0 + std::erf(static_cast<double>(x) * kInvSqrt2)));
      },
      [](T g, T x, T) {
        const double xd = static_cast<double>(x);
        const double cdf = 0.5 * (1.0 + std::erf(xd * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xd * xd);
        return static_cast<T>(static_cast<double>(g) * (cdf + xd * pdf));
      });
}

template <class T>
inline BasicTensor<T> silu(const BasicTensor<T>& a) {
  return detail::unary_op<T>(
      "silu", a,
      [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T g, T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return g * s * (T(1) + x * (T(1) - s));
      });
}

template <class T>
inline BasicTensor<T> abs(const BasicTensor<T>& a) {
  return detail::unary_op<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T g, T x, T) { return x > T(0) ? g : (x < T(0) ? -g : T(0)); });
}

/// Sum over one axis of a rank-1/2 tensor; the reduced axis stays as size 1.
/// Accumulation runs in double to keep long reductions well conditioned.
template <class T>
inline BasicTensor<T> sum(const BasicTensor<T>& a, int axis) {
  if (a.rank() == 1) {
    if (axis != 0) throw ShapeError("sum: axis out of range for " + shape_str(a.shape()));
    double acc = 0;
    for (T v : a.data()) acc += static_cast<double>(v);
    auto node = detail::make_node<T>(
        {1}, {static_cast<T>(acc)}, {a.node()}, [](Node<T>& self, GradSink<T>& sink) {
          auto& gp = detail::grad_buffer(*self.parents[0], sink);
          for (auto& v : gp) v += self.grad[0];
        });
    return BasicTensor<T>(std::move(node));
  }
  if (a.rank() != 2 || axis < 0 || axis > 1)
    throw ShapeError("sum: unsupported axis for " + shape_str(a.shape()));
  const int64_t r = a.dim(0), c = a.dim(1);
  if (axis == 1) {
    std::vector<T> out(static_cast<size_t>(r));
    for (int64_t i = 0; i < r; ++i) {
      double acc = 0;
      for (int64_t j = 0; j < c; ++j) acc += static_cast<double>(a.at(i, j));
      out[static_cast<size_t>(i)] = static_cast<T>(acc);
    }
    auto node = detail::make_node<T>(
        {r, 1}, std::move(out), {a.node()}, [r, c](Node<T>& self, GradSink<T>& sink) {
          auto& gp = detail::grad_buffer(*self.parents[0], sink);
          for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
              gp[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(i)];
        });
    return BasicTensor<T>(std::move(node));
  }
  std::vector<T> out(static_cast<size_t>(c));
  for (int64_t j = 0; j < c; ++j) {
    double acc = 0;
    for (int64_t i = 0; i < r; ++i) acc += static_cast<double>(a.at(i, j));
    out[static_cast<size_t>(j)] = static_cast<T>(acc);
  }
  auto node = detail::make_node<T>(
      {1, c}, std::move(out), {a.node()}, [r, c](Node<T>& self, GradSink<T>& sink) {
        auto& gp = detail::grad_buffer(*self.parents[0], sink);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            gp[static_cast<size_t>(i * c + j)] += self.grad[static_cast<size_t>(j)];
      });
  return BasicTensor<T>(std::move(node));
}

template <class T>
inline BasicTensor<T> mean(const BasicTensor<T>& a, int axis) {
  const int64_t len = (a.rank() == 1) ? a.numel() : a.dim(axis);
  return smul(sum(a, axis), 1.0 / static_cast<double>(len));
}

template <class T>
inline BasicTensor<T> sum_all(const BasicTensor<T>& a) {
  double acc = 0;
  for (T v : a.data()) acc += static_cast<double>(v);
  auto node = detail::make_node<T>(
      {1}, {static_cast<T>(acc)}, {a.node()}, [](Node<T>& self, GradSink<T>& sink) {
        auto& gp = detail::grad_buffer(*self.parents[0], sink);
        for (auto& v : gp) v += self.grad[0];
      });
  return BasicTensor<T>(std::move(node));
}

template <class T>
inline BasicTensor<T> mean_all(const BasicTensor<T>& a) {
  return smul(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

/// Layer normalization over the last axis with learnable scale and shift.
/// Variance is floored by eps, so a constant row maps to zeros.
template <class T>
inline BasicTensor<T> layer_norm(const BasicTensor<T>& x, const BasicTensor<T>& scale,
                                 const BasicTensor<T>& shift, double eps = 1e-5) {
  const int64_t c = x.rank() == 2 ? x.dim(1) : x.numel();
  const int64_t r = x.rank() == 2 ? x.dim(0) : 1;
  if (scale.numel() != c || shift.numel() != c)
    throw ShapeError("layer_norm: scale/shift " + shape_str(scale.shape()) + "/" +
                     shape_str(shift.shape()) + " do not match " + shape_str(x.shape()));
  std::vector<T> out(static_cast<size_t>(r * c));
  std::vector<T> inv(static_cast<size_t>(r)), mu(static_cast<size_t>(r));
  const T* px = x.data().data();
  const T* ps = scale.data().data();
  const T* pb = shift.data().data();
  for (int64_t i = 0; i < r; ++i) {
    double m = 0;
    for (int64_t j = 0; j < c; ++j) m += static_cast<double>(px[i * c + j]);
    m /= static_cast<double>(c);
    double v = 0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(px[i * c + j]) - m;
      v += d * d;
    }
    v /= static_cast<double>(c);
    const double iv = 1.0 / std::sqrt(v + eps);
    mu[static_cast<size_t>(i)] = static_cast<T>(m);
    inv[static_cast<size_t>(i)] = static_cast<T>(iv);
    for (int64_t j = 0; j < c; ++j) {
      const double xh = (static_cast<double>(px[i * c + j]) - m) * iv;
      out[static_cast<size_t>(i * c + j)] =
          static_cast<T>(xh * static_cast<double>(ps[j]) + static_cast<double>(pb[j]));
    }
  }
  auto node = detail::make_node<T>(
      x.shape(), std::move(out), {x.node(), scale.node(), shift.node()},
      [r, c, inv, mu](Node<T>& self, GradSink<T>& sink) {
        Node<T>& nx = *self.parents[0];
        Node<T>& nscale = *self.parents[1];
        Node<T>& nshift = *self.parents[2];
        std::vector<T>* gx = nx.requires_grad ? &detail::grad_buffer(nx, sink) : nullptr;
        std::vector<T>* gs = nscale.requires_grad ? &detail::grad_buffer(nscale, sink) : nullptr;
        std::vector<T>* gb = nshift.requires_grad ? &detail::grad_buffer(nshift, sink) : nullptr;
        for (int64_t i = 0; i < r; ++i) {
          const double iv = static_cast<double>(inv[static_cast<size_t>(i)]);
          const double m = static_cast<double>(mu[static_cast<size_t>(i)]);
          double mean_gs = 0, mean_gsx = 0;
          for (int64_t j = 0; j < c; ++j) {
            const double xh = (static_cast<double>(nx.data[static_cast<size_t>(i * c + j)]) - m) * iv;
            const double gsj = static_cast<double>(self.grad[static_cast<size_t>(i * c + j)]) *
                               static_cast<double>(nscale.data[static_cast<size_t>(j)]);
            mean_gs += gsj;
            mean_gsx += gsj * xh;
            if (gs)
              (*gs)[static_cast<size_t>(j)] +=
                  static_cast<T>(static_cast<double>(self.grad[static_cast<size_t>(i * c + j)]) * xh);
            if (gb) (*gb)[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i * c + j)];
          }
          mean_gs /= static_cast<double>(c);
          mean_gsx /= static_cast<double>(c);
          if (gx) {
            for (int64_t j = 0; j < c; ++j) {
              const double xh =
                  (static_cast<double>(nx.data[static_cast<size_t>(i * c + j)]) - m) * iv;
              const double gsj = static_cast<double>(self.grad[static_cast<size_t>(i * c + j)]) *
                                 static_cast<double>(nscale.data[static_cast<size_t>(j)]);
              (*gx)[static_cast<size_t>(i * c + j)] +=
                  static_cast<T>(iv * (gsj - mean_gs - xh * mean_gsx));
            }
          }
        }
      });
  detail::check_finite("layer_norm", *node);
  return BasicTensor<T>(std::move(node));
}

template <class T>
inline BasicTensor<T> reverse(const BasicTensor<T>& a, int axis) {
  if (axis < 0 || axis >= a.rank())
    throw ShapeError("reverse: axis out of range for " + shape_str(a.shape()));
  const int64_t r = a.rank() == 2 ? a.dim(0) : a.numel();
  const int64_t c = a.rank() == 2 ? a.dim(1) : 1;
  const bool rev_rows = (a.rank() == 1) || axis == 0;
  auto mirror = [r, c, rev_rows](int64_t i, int64_t j) {
    const int64_t mi = rev_rows ? r - 1 - i : i;
    const int64_t mj = rev_rows ? j : c - 1 - j;
    return mi * c + mj;
  };
  std::vector<T> out(a.data().size());
  for (int64_t i = 0; i < r; ++i)
    for (int64_t j = 0; j < c; ++j)
      out[static_cast<size_t>(i * c + j)] = a.data()[static_cast<size_t>(mirror(i, j))];
  auto node = detail::make_node<T>(
      a.shape(), std::move(out), {a.node()}, [r, c, mirror](Node<T>& self, GradSink<T>& sink) {
        auto& gp = detail::grad_buffer(*self.parents[0], sink);
        for (int64_t i = 0; i < r; ++i)
          for (int64_t j = 0; j < c; ++j)
            gp[static_cast<size_t>(mirror(i, j))] += self.grad[static_cast<size_t>(i * c + j)];
      });
  return BasicTensor<T>(std::move(node));
}

template <class T>
inline BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) throw ShapeError("concat: axis out of range");
  Shape out_shape = parts[0].shape();
  for (size_t i = 1; i < parts.size(); ++i) {
    const Shape& s = parts[i].shape();
    if (static_cast<int>(s.size()) != rank)
      throw ShapeError("concat: rank mismatch between " + shape_str(out_shape) + " and " +
                       shape_str(s));
    for (int d = 0; d < rank; ++d)
      if (d != axis && s[static_cast<size_t>(d)] != out_shape[static_cast<size_t>(d)])
        throw ShapeError("concat: shapes " + shape_str(out_shape) + " and " + shape_str(s) +
                         " disagree off-axis");
    out_shape[static_cast<size_t>(axis)] += s[static_cast<size_t>(axis)];
  }
  const bool row_axis = (rank == 1) || axis == 0;
  const int64_t out_cols = rank == 2 ? out_shape[1] : 1;
  std::vector<int64_t> offsets;  // running offset along the concat axis
  {
    int64_t off = 0;
    for (const auto& p : parts) {
      offsets.push_back(off);
      off += p.shape()[static_cast<size_t>(axis)];
    }
  }
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& p = parts[pi];
    const int64_t pr = rank == 2 ? p.dim(0) : p.numel();
    const int64_t pc = rank == 2 ? p.dim(1) : 1;
    for (int64_t i = 0; i < pr; ++i)
      for (int64_t j = 0; j < pc; ++j) {
        const int64_t oi = row_axis ? i + offsets[pi] : i;
        const int64_t oj = row_axis ? j : j + offsets[pi];
        out[static_cast<size_t>(oi * out_cols + oj)] = p.data()[static_cast<size_t>(i * pc + j)];
      }
  }
  auto node = std::make_shared<Node<T>>();
  node->shape = out_shape;
  node->data = std::move(out);
  node->id = next_node_id<T>();
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parts) node->parents.push_back(p.node());
    node->backprop = [rank, row_axis, out_cols, offsets](Node<T>& self, GradSink<T>& sink) {
      for (size_t pi = 0; pi < self.parents.size(); ++pi) {
        Node<T>& p = *self.parents[pi];
        if (!p.requires_grad) continue;
        auto& gp = detail::grad_buffer(p, sink);
        const int64_t pr = rank == 2 ? p.shape[0] : p.numel();
        const int64_t pc = rank == 2 ? p.shape[1] : 1;
        for (int64_t i = 0; i < pr; ++i)
          for (int64_t j = 0; j < pc; ++j) {
            const int64_t oi = row_axis ? i + offsets[pi] : i;
            const int64_t oj = row_axis ? j : j + offsets[pi];
            gp[static_cast<size_t>(i * pc + j)] += self.grad[static_cast<size_t>(oi * out_cols + oj)];
          }
      }
    };
  }
  return BasicTensor<T>(std::move(node));
}

template <class T>
inline BasicTensor<T> slice(const BasicTensor<T>& a, int axis, int64_t start, int64_t count) {
  if (axis < 0 || axis >= a.rank()) throw ShapeError("slice: axis out of range");
  const int64_t extent = a.dim(axis);
  if (start < 0 || count < 0 || start + count > extent)
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") exceeds axis extent " +
                     std::to_string(extent));
  const int64_t c = a.rank() == 2 ? a.dim(1) : 1;
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = count;
  const int64_t or_ = a.rank() == 2 ? out_shape[0] : shape_numel(out_shape);
  const int64_t oc = a.rank() == 2 ? out_shape[1] : 1;
  std::vector<T> out(static_cast<size_t>(shape_numel(out_shape)));
  const bool row_axis = (a.rank() == 1) || axis == 0;
  for (int64_t i = 0; i < or_; ++i)
    for (int64_t j = 0; j < oc; ++j) {
      const int64_t si = row_axis ? i + start : i;
      const int64_t sj = row_axis ? j : j + start;
      out[static_cast<size_t>(i * oc + j)] = a.data()[static_cast<size_t>(si * c + sj)];
    }
  auto node = detail::make_node<T>(
      out_shape, std::move(out), {a.node()},
      [row_axis, start, or_, oc, c](Node<T>& self, GradSink<T>& sink) {
        auto& gp = detail::grad_buffer(*self.parents[0], sink);
        for (int64_t i = 0; i < or_; ++i)
          for (int64_t j = 0; j < oc; ++j) {
            const int64_t si = row_axis ? i + start : i;
            const int64_t sj = row_axis ? j : j + start;
            gp[static_cast<size_t>(si * c + sj)] += self.grad[static_cast<size_t>(i * oc + j)];
          }
      });
  return BasicTensor<T>(std::move(node));
}

/// Row maxima of a rank-2 tensor as a detached (R,1) constant. Used for
/// log-space stabilization, where the subtracted maximum cancels exactly and
/// carries no gradient.
template <class T>
inline BasicTensor<T> rowmax_detached(const BasicTensor<T>& a) {
  if (a.rank() != 2) throw ShapeError("rowmax: expected rank 2, got " + shape_str(a.shape()));
  const int64_t r = a.dim(0), c = a.dim(1);
  std::vector<T> out(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    T m = a.at(i, 0);
    for (int64_t j = 1; j < c; ++j) m = std::max(m, a.at(i, j));
    out[static_cast<size_t>(i)] = m;
  }
  return BasicTensor<T>::from_vector({r, 1}, std::move(out));
}

// ---------------------------------------------------------------------------
// finite-difference gradient checking

/// Max relative error between the tape gradient of f at x and central finite
/// differences. f must be callable on both float and double tensors; the
/// double path is the oracle. Perturbation size scales with |x_i|.
template <class F>
inline double grad_check(F&& f, const Tensor& x, double eps = 1e-3) {
  if (!(eps > 0.0 && eps < 0.1)) throw ConfigError("grad_check: eps must lie in (0, 0.1)");
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  Tensor y = f(leaf);
  if (y.numel() != 1) throw ShapeError("grad_check: f must return a scalar");
  backward(y);
  const std::vector<float> analytic = leaf.grad();

  DTensor xd = x.cast<double>();
  double max_rel = 0.0;
  for (int64_t i = 0; i < xd.numel(); ++i) {
    const double xi = xd.data()[static_cast<size_t>(i)];
    const double h = eps * std::max(1.0, std::abs(xi));
    DTensor xp = xd.detach();
    DTensor xm = xd.detach();
    xp.mutable_data()[static_cast<size_t>(i)] = xi + h;
    xm.mutable_data()[static_cast<size_t>(i)] = xi - h;
    const double fp = static_cast<double>(f(xp).item());
    const double fm = static_cast<double>(f(xm).item());
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw Error("grad_check: non-finite value while perturbing element " + std::to_string(i));
    const double cd = (fp - fm) / (2.0 * h);
    const double rel =
        std::abs(static_cast<double>(analytic[static_cast<size_t>(i)]) - cd) / (std::abs(cd) + 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace axlstm::num
