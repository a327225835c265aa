// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
//
// mLSTM cell: matrix memory, normalizer state, exponential gating with
// log-space stabilization, in sequential-recurrent and parallel forms.
//
// Two execution paths back each public op:
//  - a differentiable composition of tensor-suite ops (used whenever an
//    input requires gradients; float32);
//  - fused forward kernels with double internal accumulation (used for
//    inference; serial recurrent reference vs OpenMP parallel form).
// The paths are cross-checked in tests, and the two kernel forms are the
// subject of the equivalence suite and the benchmark.
//
// Stabilizer: exponential gates are computed as i' = exp(logi - m),
// f' = exp(logf + m_prev - m) with m the running max of gate log-weights.
// The rescaling cancels identically in the hidden state, so m is kept out
// of the gradient tape.

#pragma once

#include <concepts>
#include <cstdint>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "axlstm/mlstm_kernels.hpp"
#include "axlstm/tensor.hpp"

namespace axlstm::mlstm {

using num::BasicTensor;

enum class Impl { kAuto, kComposed, kFused };
enum class Mode { kRecurrent, kParallel };

template <class T>
struct HeadParams {
  BasicTensor<T> w_query, w_key, w_value, w_ogate;  // (d,d), applied y = x.W
  BasicTensor<T> b_query, b_key, b_value, b_ogate;  // (d)
  BasicTensor<T> w_igate, w_fgate;                  // (d,1)
  BasicTensor<T> b_igate, b_fgate;                  // (1)

  int dim() const { return static_cast<int>(w_query.dim(0)); }

  static HeadParams zeros(int d) {
    HeadParams p;
    p.w_query = BasicTensor<T>::zeros({d, d});
    p.w_key = BasicTensor<T>::zeros({d, d});
    p.w_value = BasicTensor<T>::zeros({d, d});
    p.w_ogate = BasicTensor<T>::zeros({d, d});
    p.b_query = BasicTensor<T>::zeros({d});
    p.b_key = BasicTensor<T>::zeros({d});
    p.b_value = BasicTensor<T>::zeros({d});
    p.b_ogate = BasicTensor<T>::zeros({d});
    p.w_igate = BasicTensor<T>::zeros({d, 1});
    p.w_fgate = BasicTensor<T>::zeros({d, 1});
    p.b_igate = BasicTensor<T>::zeros({1});
    p.b_fgate = BasicTensor<T>::zeros({1});
    return p;
  }

  static HeadParams random(int d, Rng& rng, double w_std = -1.0, double bias_std = 0.1) {
    if (w_std < 0) w_std = 1.0 / std::sqrt(static_cast<double>(d));
    HeadParams p;
    p.w_query = BasicTensor<T>::randn({d, d}, rng, w_std);
    p.w_key = BasicTensor<T>::randn({d, d}, rng, w_std);
    p.w_value = BasicTensor<T>::randn({d, d}, rng, w_std);
    p.w_ogate = BasicTensor<T>::randn({d, d}, rng, w_std);
    p.b_query = BasicTensor<T>::randn({d}, rng, bias_std);
    p.b_key = BasicTensor<T>::randn({d}, rng, bias_std);
    p.b_value = BasicTensor<T>::randn({d}, rng, bias_std);
    p.b_ogate = BasicTensor<T>::randn({d}, rng, bias_std);
    p.w_igate = BasicTensor<T>::randn({d, 1}, rng, w_std);
    p.w_fgate = BasicTensor<T>::randn({d, 1}, rng, w_std);
    p.b_igate = BasicTensor<T>::randn({1}, rng, bias_std);
    p.b_fgate = BasicTensor<T>::randn({1}, rng, bias_std);
    return p;
  }

  template <class U>
  HeadParams<U> cast() const {
    HeadParams<U> p;
    p.w_query = w_query.template cast<U>();
    p.w_key = w_key.template cast<U>();
    p.w_value = w_value.template cast<U>();
    p.w_ogate = w_ogate.template cast<U>();
    p.b_query = b_query.template cast<U>();
    p.b_key = b_key.template cast<U>();
    p.b_value = b_value.template cast<U>();
    p.b_ogate = b_ogate.template cast<U>();
    p.w_igate = w_igate.template cast<U>();
    p.w_fgate = w_fgate.template cast<U>();
    p.b_igate = b_igate.template cast<U>();
    p.b_fgate = b_fgate.template cast<U>();
    return p;
  }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    fn(prefix + ".w_query", w_query);
    fn(prefix + ".w_key", w_key);
    fn(prefix + ".w_value", w_value);
    fn(prefix + ".w_ogate", w_ogate);
    fn(prefix + ".b_query", b_query);
    fn(prefix + ".b_key", b_key);
    fn(prefix + ".b_value", b_value);
    fn(prefix + ".b_ogate", b_ogate);
    fn(prefix + ".w_igate", w_igate);
    fn(prefix + ".w_fgate", w_fgate);
    fn(prefix + ".b_igate", b_igate);
    fn(prefix + ".b_fgate", b_fgate);
  }

  void set_requires_grad(bool v) {
    visit("", [v](const std::string&, BasicTensor<T>& t) { t.set_requires_grad(v); });
  }

  bool any_requires_grad() const {
    bool any = false;
    const_cast<HeadParams*>(this)->visit(
        "", [&any](const std::string&, BasicTensor<T>& t) { any = any || t.requires_grad(); });
    return any;
  }

  kernels::HeadView view() const
    requires std::same_as<T, float>
  {
    kernels::HeadView v;
    v.w_query = w_query.data().data();
    v.w_key = w_key.data().data();
    v.w_value = w_value.data().data();
    v.w_ogate = w_ogate.data().data();
    v.b_query = b_query.data().data();
    v.b_key = b_key.data().data();
    v.b_value = b_value.data().data();
    v.b_ogate = b_ogate.data().data();
    v.w_igate = w_igate.data().data();
    v.w_fgate = w_fgate.data().data();
    v.b_igate = b_igate.data()[0];
    v.b_fgate = b_fgate.data()[0];
    v.dim = dim();
    return v;
  }
};

/// Recurrent state: matrix memory C (d,d), normalizer n (1,d), and the
/// log-space stabilizer m (1,1). m never carries gradients; the triple
/// (C, n, m) jointly represents the mathematical state (C, n) of the
/// unstabilized equations scaled by exp(-m).
template <class T>
struct MlstmState {
  BasicTensor<T> cell, normalizer, stabilizer;

  static MlstmState zeros(int d) {
    return {BasicTensor<T>::zeros({d, d}), BasicTensor<T>::zeros({1, d}),
            BasicTensor<T>::zeros({1, 1})};
  }

  bool is_zero() const {
    auto all_zero = [](const BasicTensor<T>& t) {
      for (T v : t.data())
        if (v != T(0)) return false;
      return true;
    };
    return all_zero(cell) && all_zero(normalizer) && all_zero(stabilizer);
  }
};

template <class T>
struct StepResult {
  MlstmState<T> state;
  BasicTensor<T> hidden;  // (1,d)
};

namespace detail {

template <class T>
struct Gates {
  BasicTensor<T> input, forget;  // effective gates, (1,1)
  BasicTensor<T> m_new;          // detached stabilizer, (1,1)
  BasicTensor<T> floor;          // detached denominator floor, (1,1)
};

template <class T>
Gates<T> step_gates(const BasicTensor<T>& a, const BasicTensor<T>& c,
                    const BasicTensor<T>& m_prev, GateType gate) {
  Gates<T> g;
  if (gate == GateType::kSigmoid) {
    g.input = num::sigmoid(c);
    g.forget = num::sigmoid(a);
    g.m_new = BasicTensor<T>::zeros({1, 1});
    g.floor = BasicTensor<T>::ones({1, 1});
    return g;
  }
  if (g_sabotage_stabilizer.load(std::memory_order_relaxed)) {
    g.input = num::exp(c);
    g.forget = num::exp(a);
    g.m_new = BasicTensor<T>::zeros({1, 1});
    g.floor = BasicTensor<T>::ones({1, 1});
    return g;
  }
  const T m_val = std::max(a.data()[0] + m_prev.data()[0], c.data()[0]);
  g.m_new = BasicTensor<T>::from_vector({1, 1}, {m_val});
  g.floor = BasicTensor<T>::from_vector({1, 1}, {std::exp(-m_val)});
  g.input = num::exp(num::sub(c, g.m_new));
  g.forget = num::exp(num::sub(num::add(a, m_prev), g.m_new));
  return g;
}

/// Stabilized gate-weight matrix for the parallel form, as one fused op.
/// Returns the (L,L) matrix D with D[t][s] = exp(logD[t][s] - m[t]) on the
/// lower triangle and zeros above, plus the detached per-row denominator
/// floor exp(-m[t]) as (L,1).
///
/// Gradients flow to the gate pre-activations a and c; the row stabilizer m
/// cancels identically in the final hidden state and is treated as constant.
template <class T>
std::pair<BasicTensor<T>, BasicTensor<T>> gate_matrix(const BasicTensor<T>& a,
                                                      const BasicTensor<T>& c, GateType gate) {
  const int64_t len = a.dim(0);
  if (a.shape() != num::Shape{len, 1} || c.shape() != num::Shape{len, 1})
    throw ShapeError("gate_matrix: expected (L,1) pre-activations, got " +
                     num::shape_str(a.shape()) + " and " + num::shape_str(c.shape()));
  const bool stabilize =
      gate == GateType::kExponential && !g_sabotage_stabilizer.load(std::memory_order_relaxed);
  const bool sigmoid_gate = gate == GateType::kSigmoid;

  auto log_sig = [](double x) {
    return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
  };

  std::vector<double> A(static_cast<size_t>(len)), logi(static_cast<size_t>(len)),
      mrow(static_cast<size_t>(len));
  {
    double acc = 0.0, m = 0.0;
    for (int64_t t = 0; t < len; ++t) {
      const double av = static_cast<double>(a.data()[static_cast<size_t>(t)]);
      const double cv = static_cast<double>(c.data()[static_cast<size_t>(t)]);
      const double lf = sigmoid_gate ? log_sig(av) : av;
      const double li = sigmoid_gate ? log_sig(cv) : cv;
      acc += lf;
      A[static_cast<size_t>(t)] = acc;
      logi[static_cast<size_t>(t)] = li;
      if (stabilize) m = std::max(lf + m, li);
      mrow[static_cast<size_t>(t)] = stabilize ? m : 0.0;
    }
  }

  std::vector<T> dmat(static_cast<size_t>(len) * static_cast<size_t>(len), T(0));
  std::vector<T> floor_vals(static_cast<size_t>(len));
  for (int64_t t = 0; t < len; ++t) {
    const double at = A[static_cast<size_t>(t)];
    const double mt = mrow[static_cast<size_t>(t)];
    floor_vals[static_cast<size_t>(t)] = static_cast<T>(std::exp(-mt));
    T* row = dmat.data() + t * len;
    for (int64_t s = 0; s <= t; ++s)
      row[s] = static_cast<T>(std::exp(at - A[static_cast<size_t>(s)] + logi[static_cast<size_t>(s)] - mt));
  }

  auto node = num::detail::make_node<T>(
      {len, len}, std::move(dmat), {a.node(), c.node()},
      [len, sigmoid_gate](num::Node<T>& self, num::GradSink<T>& sink) {
        num::Node<T>& na = *self.parents[0];
        num::Node<T>& nc = *self.parents[1];
        std::vector<T>* ga = na.requires_grad ? &num::detail::grad_buffer(na, sink) : nullptr;
        std::vector<T>* gc = nc.requires_grad ? &num::detail::grad_buffer(nc, sink) : nullptr;
        // dL/dlogD[t][s] = g[t][s] * D[t][s]; then
        //   dlogf[u] = sum_{t>=u} sum_{s<u} dlogD[t][s]   (prefix-in-s trick)
        //   dlogi[s] = sum_{t>=s} dlogD[t][s]
        std::vector<double> dlf(static_cast<size_t>(len), 0.0), dli(static_cast<size_t>(len), 0.0);
        for (int64_t t = 0; t < len; ++t) {
          const T* grow = self.grad.data() + t * len;
          const T* drow = self.data.data() + t * len;
          double prefix = 0.0;
          for (int64_t u = 0; u <= t; ++u) {
            dlf[static_cast<size_t>(u)] += prefix;
            const double dlog = static_cast<double>(grow[u]) * static_cast<double>(drow[u]);
            prefix += dlog;
            dli[static_cast<size_t>(u)] += dlog;
          }
        }
        for (int64_t u = 0; u < len; ++u) {
          double da = dlf[static_cast<size_t>(u)];
          double dc = dli[static_cast<size_t>(u)];
          if (sigmoid_gate) {
            const double sa = 1.0 / (1.0 + std::exp(-static_cast<double>(na.data[static_cast<size_t>(u)])));
            const double sc = 1.0 / (1.0 + std::exp(-static_cast<double>(nc.data[static_cast<size_t>(u)])));
            da *= 1.0 - sa;  // dlog(sigmoid(x))/dx = 1 - sigmoid(x)
            dc *= 1.0 - sc;
          }
          if (ga) (*ga)[static_cast<size_t>(u)] += static_cast<T>(da);
          if (gc) (*gc)[static_cast<size_t>(u)] += static_cast<T>(dc);
        }
      });
  return {BasicTensor<T>(std::move(node)),
          BasicTensor<T>::from_vector({len, 1}, std::move(floor_vals))};
}

template <class T>
bool wants_composed(const BasicTensor<T>& seq, const HeadParams<T>& p) {
  return seq.requires_grad() || p.any_requires_grad();
}

}  // namespace detail

/// One stabilized step of the cell; differentiable.
template <class T>
StepResult<T> step(const MlstmState<T>& state, const BasicTensor<T>& x, const HeadParams<T>& p,
                   GateType gate = GateType::kExponential, bool apply_ogate = true) {
  const int d = p.dim();
  if (x.rank() != 2 || x.dim(0) != 1 || x.dim(1) != d)
    throw ShapeError("mlstm step: input " + num::shape_str(x.shape()) + " does not match head dim " +
                     std::to_string(d));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto q = num::add(num::matmul(x, p.w_query), p.b_query);
  auto k = num::add(num::smul(num::matmul(x, p.w_key), inv_sqrt_d), p.b_key);
  auto v = num::add(num::matmul(x, p.w_value), p.b_value);
  auto a = num::add(num::matmul(x, p.w_fgate), p.b_fgate);
  auto c = num::add(num::matmul(x, p.w_igate), p.b_igate);

  auto gates = detail::step_gates(a, c, state.stabilizer, gate);

  auto outer = num::matmul(num::transpose(v), k);  // (d,d) = v^T k
  auto cell = num::add(num::mul(state.cell, gates.forget), num::mul(outer, gates.input));
  auto normalizer = num::add(num::mul(state.normalizer, gates.forget), num::mul(k, gates.input));

  auto dot = num::matmul(q, num::transpose(normalizer));  // (1,1)
  auto denom = num::maximum(num::abs(dot), gates.floor);
  auto retrieved = num::matmul(q, num::transpose(cell));  // (1,d) = (C q)^T
  auto hidden = num::div(retrieved, denom);
  if (apply_ogate) {
    auto o = num::sigmoid(num::add(num::matmul(x, p.w_ogate), p.b_ogate));
    hidden = num::mul(o, hidden);
  }
  num::detail::check_finite("mlstm_step", *hidden.node());
  return {{cell, normalizer, gates.m_new}, hidden};
}

/// Left-to-right fold of step(); the sequential reference form.
template <class T>
BasicTensor<T> recurrent(const BasicTensor<T>& seq, const HeadParams<T>& p,
                         GateType gate = GateType::kExponential,
                         std::type_identity_t<const MlstmState<T>*> init = nullptr,
                         bool apply_ogate = true, Impl impl = Impl::kAuto) {
  const int d = p.dim();
  if (seq.rank() != 2 || seq.dim(1) != d)
    throw ShapeError("mlstm recurrent: sequence " + num::shape_str(seq.shape()) +
                     " does not match head dim " + std::to_string(d));
  const int64_t len = seq.dim(0);
  if (len < 1) throw ShapeError("mlstm recurrent: empty sequence");

  const bool zero_init = init == nullptr || init->is_zero();
  bool composed = impl == Impl::kComposed ||
                  (impl == Impl::kAuto && (detail::wants_composed(seq, p) || !zero_init));
  if constexpr (!std::same_as<T, float>) composed = true;
  if (!composed) {
    if constexpr (std::same_as<T, float>) {
      std::vector<float> out(static_cast<size_t>(len) * d);
      kernels::seq_recurrent(seq.data().data(), len, p.view(), gate, apply_ogate, out.data());
      return BasicTensor<T>::from_vector({len, d}, std::move(out));
    }
  }

  MlstmState<T> state = init ? *init : MlstmState<T>::zeros(d);
  std::vector<BasicTensor<T>> rows;
  rows.reserve(static_cast<size_t>(len));
  for (int64_t t = 0; t < len; ++t) {
    StepResult<T> r;
    try {
      r = step(state, num::slice(seq, 0, t, 1), p, gate, apply_ogate);
    } catch (const Error& e) {
      throw Error("mlstm recurrent: step " + std::to_string(t) + ": " + e.what());
    }
    state = r.state;
    rows.push_back(r.hidden);
  }
  return num::concat(rows, 0);
}

/// Parallel form over the whole sequence; assumes an empty initial memory.
/// Equals recurrent() exactly in exact arithmetic.
template <class T>
BasicTensor<T> parallel(const BasicTensor<T>& seq, const HeadParams<T>& p,
                        GateType gate = GateType::kExponential, bool apply_ogate = true,
                        Impl impl = Impl::kAuto) {
  const int d = p.dim();
  if (seq.rank() != 2 || seq.dim(1) != d)
    throw ShapeError("mlstm parallel: sequence " + num::shape_str(seq.shape()) +
                     " does not match head dim " + std::to_string(d));
  const int64_t len = seq.dim(0);
  if (len < 1) throw ShapeError("mlstm parallel: empty sequence");

  bool composed = impl == Impl::kComposed || (impl == Impl::kAuto && detail::wants_composed(seq, p));
  if constexpr (!std::same_as<T, float>) composed = true;
  if (!composed) {
    if constexpr (std::same_as<T, float>) {
      std::vector<float> out(static_cast<size_t>(len) * d);
      kernels::seq_parallel(seq.data().data(), len, p.view(), gate, apply_ogate, out.data());
      return BasicTensor<T>::from_vector({len, d}, std::move(out));
    }
  }

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto q = num::add(num::matmul(seq, p.w_query), p.b_query);
  auto k = num::add(num::smul(num::matmul(seq, p.w_key), inv_sqrt_d), p.b_key);
  auto v = num::add(num::matmul(seq, p.w_value), p.b_value);
  auto a = num::add(num::matmul(seq, p.w_fgate), p.b_fgate);
  auto c = num::add(num::matmul(seq, p.w_igate), p.b_igate);

  auto [dmat, floor] = detail::gate_matrix(a, c, gate);
  auto scores = num::matmul(q, num::transpose(k));  // (L,L)
  auto weights = num::mul(dmat, scores);
  auto numerator = num::matmul(weights, v);             // (L,d)
  auto row_total = num::sum(weights, 1);                // (L,1)
  auto denom = num::maximum(num::abs(row_total), floor);
  auto denom_full = num::matmul(denom, BasicTensor<T>::ones({1, d}));
  auto hidden = num::div(numerator, denom_full);
  if (apply_ogate) {
    auto o = num::sigmoid(num::add(num::matmul(seq, p.w_ogate), p.b_ogate));
    hidden = num::mul(o, hidden);
  }
  num::detail::check_finite("mlstm_parallel", *hidden.node());
  return hidden;
}

/// Splits channels into contiguous per-head groups, runs each head
/// independently, and concatenates. Heads share no state, so this equals
/// stacking single-head runs.
template <class T>
BasicTensor<T> multihead(const BasicTensor<T>& seq, const std::vector<HeadParams<T>>& heads,
                         GateType gate = GateType::kExponential, Mode mode = Mode::kParallel,
                         bool apply_ogate = true, Impl impl = Impl::kAuto) {
  if (heads.empty()) throw ShapeError("multihead: no heads");
  const int64_t width = seq.dim(1);
  const int64_t n = static_cast<int64_t>(heads.size());
  if (width % n != 0)
    throw ShapeError("multihead: width " + std::to_string(width) + " not divisible by " +
                     std::to_string(n) + " heads");
  const int64_t d = width / n;
  std::vector<BasicTensor<T>> outs;
  outs.reserve(heads.size());
  for (int64_t h = 0; h < n; ++h) {
    if (heads[static_cast<size_t>(h)].dim() != d)
      throw ShapeError("multihead: head " + std::to_string(h) + " has dim " +
                       std::to_string(heads[static_cast<size_t>(h)].dim()) + ", expected " +
                       std::to_string(d));
    auto part = num::slice(seq, 1, h * d, d);
    outs.push_back(mode == Mode::kParallel
                       ? parallel(part, heads[static_cast<size_t>(h)], gate, apply_ogate, impl)
                       : recurrent(part, heads[static_cast<size_t>(h)], gate, nullptr, apply_ogate,
                                   impl));
  }
  return num::concat(outs, 1);
}

}  // namespace axlstm::mlstm
