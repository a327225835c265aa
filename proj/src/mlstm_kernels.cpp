// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0

#include "axlstm/mlstm_kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <vector>

namespace axlstm::mlstm::kernels {

namespace {

// log(sigmoid(x)), stable for large |x|
inline double log_sigmoid(double x) {
  return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Projections {
  std::vector<double> q, k, v, opre;  // len x d
  std::vector<double> a, c;           // forget / input gate pre-activations
};

Projections project(const float* x, int64_t len, const HeadView& p) {
  const int d = p.dim;
  Projections pr;
  pr.q.resize(static_cast<size_t>(len) * d);
  pr.k.resize(static_cast<size_t>(len) * d);
  pr.v.resize(static_cast<size_t>(len) * d);
  pr.opre.resize(static_cast<size_t>(len) * d);
  pr.a.resize(static_cast<size_t>(len));
  pr.c.resize(static_cast<size_t>(len));
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
#pragma omp parallel for schedule(static) if (!omp_in_parallel() && len * d * d > (1 << 17))
  for (int64_t t = 0; t < len; ++t) {
    const float* xt = x + t * d;
    double* qt = pr.q.data() + t * d;
    double* kt = pr.k.data() + t * d;
    double* vt = pr.v.data() + t * d;
    double* ot = pr.opre.data() + t * d;
    for (int j = 0; j < d; ++j) {
      qt[j] = p.b_query[j];
      kt[j] = 0.0;
      vt[j] = p.b_value[j];
      ot[j] = p.b_ogate[j];
    }
    double af = p.b_fgate, ci = p.b_igate;
    for (int i = 0; i < d; ++i) {
      const double xi = xt[i];
      const float* wq = p.w_query + static_cast<int64_t>(i) * d;
      const float* wk = p.w_key + static_cast<int64_t>(i) * d;
      const float* wv = p.w_value + static_cast<int64_t>(i) * d;
      const float* wo = p.w_ogate + static_cast<int64_t>(i) * d;
      for (int j = 0; j < d; ++j) {
        qt[j] += xi * wq[j];
        kt[j] += xi * wk[j];
        vt[j] += xi * wv[j];
        ot[j] += xi * wo[j];
      }
      af += xi * p.w_fgate[i];
      ci += xi * p.w_igate[i];
    }
    for (int j = 0; j < d; ++j) kt[j] = kt[j] * inv_sqrt_d + p.b_key[j];
    pr.a[static_cast<size_t>(t)] = af;
    pr.c[static_cast<size_t>(t)] = ci;
  }
  return pr;
}

}  // namespace

void seq_recurrent(const float* x, int64_t len, const HeadView& p, GateType gate,
                   bool apply_ogate, float* out) {
  const int d = p.dim;
  const bool stabilize =
      gate == GateType::kExponential && !g_sabotage_stabilizer.load(std::memory_order_relaxed);
  Projections pr = project(x, len, p);

  std::vector<double> cell(static_cast<size_t>(d) * d, 0.0);
  std::vector<double> norm(static_cast<size_t>(d), 0.0);
  double m = 0.0;
  for (int64_t t = 0; t < len; ++t) {
    const double* qt = pr.q.data() + t * d;
    const double* kt = pr.k.data() + t * d;
    const double* vt = pr.v.data() + t * d;
    const double* ot = pr.opre.data() + t * d;
    const double af = pr.a[static_cast<size_t>(t)];
    const double ci = pr.c[static_cast<size_t>(t)];

    double i_eff, f_eff, floor;
    if (gate == GateType::kSigmoid) {
      i_eff = sigmoid(ci);
      f_eff = sigmoid(af);
      floor = 1.0;
    } else if (stabilize) {
      const double m_new = std::max(af + m, ci);
      i_eff = std::exp(ci - m_new);
      f_eff = std::exp(af + m - m_new);
      floor = std::exp(-m_new);
      m = m_new;
    } else {
      i_eff = std::exp(ci);
      f_eff = std::exp(af);
      floor = 1.0;
    }

    for (int i = 0; i < d; ++i) {
      double* row = cell.data() + static_cast<int64_t>(i) * d;
      const double vi = vt[i];
      for (int j = 0; j < d; ++j) row[j] = f_eff * row[j] + i_eff * vi * kt[j];
    }
    double dot = 0.0;
    for (int j = 0; j < d; ++j) {
      norm[static_cast<size_t>(j)] = f_eff * norm[static_cast<size_t>(j)] + i_eff * kt[j];
      dot += norm[static_cast<size_t>(j)] * qt[j];
    }
    const double denom = std::max(std::abs(dot), floor);
    float* ht = out + t * d;
    for (int i = 0; i < d; ++i) {
      double hv = 0.0;
      const double* row = cell.data() + static_cast<int64_t>(i) * d;
      for (int j = 0; j < d; ++j) hv += row[j] * qt[j];
      const double g = apply_ogate ? sigmoid(ot[i]) : 1.0;
      ht[i] = static_cast<float>(g * hv / denom);
    }
  }
}

void seq_parallel(const float* x, int64_t len, const HeadView& p, GateType gate,
                  bool apply_ogate, float* out) {
  const int d = p.dim;
  const bool stabilize =
      gate == GateType::kExponential && !g_sabotage_stabilizer.load(std::memory_order_relaxed);
  Projections pr = project(x, len, p);

  // Log-domain gate weights: logD[t][s] = A[t] - A[s] + logi[s] for s <= t,
  // with A the inclusive prefix sum of the log forget gates. The per-row
  // stabilizer follows the same recurrence as the stepwise form, so both
  // kernels subtract identical offsets.
  std::vector<double> A(static_cast<size_t>(len)), logi(static_cast<size_t>(len));
  std::vector<double> mrow(static_cast<size_t>(len));
  {
    double acc = 0.0, m = 0.0;
    for (int64_t t = 0; t < len; ++t) {
      const double lf = gate == GateType::kSigmoid ? log_sigmoid(pr.a[static_cast<size_t>(t)])
                                                   : pr.a[static_cast<size_t>(t)];
      const double li = gate == GateType::kSigmoid ? log_sigmoid(pr.c[static_cast<size_t>(t)])
                                                   : pr.c[static_cast<size_t>(t)];
      acc += lf;
      A[static_cast<size_t>(t)] = acc;
      logi[static_cast<size_t>(t)] = li;
      if (stabilize) {
        m = std::max(lf + m, li);
        mrow[static_cast<size_t>(t)] = m;
      } else {
        mrow[static_cast<size_t>(t)] = 0.0;
      }
    }
  }

#pragma omp parallel for schedule(static) if (!omp_in_parallel())
  for (int64_t t = 0; t < len; ++t) {
    std::vector<double> num(static_cast<size_t>(d), 0.0);
    double b = 0.0;
    const double* qt = pr.q.data() + t * d;
    const double at = A[static_cast<size_t>(t)];
    const double mt = mrow[static_cast<size_t>(t)];
    for (int64_t s = 0; s <= t; ++s) {
      const double w = std::exp(at - A[static_cast<size_t>(s)] + logi[static_cast<size_t>(s)] - mt);
      const double* ks = pr.k.data() + s * d;
      double kq = 0.0;
      for (int j = 0; j < d; ++j) kq += ks[j] * qt[j];
      const double wkq = w * kq;
      b += wkq;
      const double* vs = pr.v.data() + s * d;
      for (int j = 0; j < d; ++j) num[static_cast<size_t>(j)] += wkq * vs[j];
    }
    const double denom = std::max(std::abs(b), std::exp(-mt));
    const double* ot = pr.opre.data() + t * d;
    float* ht = out + t * d;
    for (int j = 0; j < d; ++j) {
      const double g = apply_ogate ? sigmoid(ot[j]) : 1.0;
      ht[j] = static_cast<float>(g * num[static_cast<size_t>(j)] / denom);
    }
  }
}

}  // namespace axlstm::mlstm::kernels
