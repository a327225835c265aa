// Test-only oracle: a direct double-precision transcription of the mLSTM
// recurrence, with raw exponential gates and no stabilizer. Independent of
// the library's execution paths; used to prove stabilizer transparency.
//
//   C_t = f_t C_{t-1} + i_t v_t k_t^T
//   n_t = f_t n_{t-1} + i_t k_t
//   h_t = o_t (.) C_t q_t / max{|n_t^T q_t|, 1}
//   q_t = W_q x_t + b_q
//   k_t = (1/sqrt(d)) W_k x_t + b_k
//   v_t = W_v x_t + b_v
//   i_t = exp(w_i^T x_t + b_i)        (sigma instead of exp in sigmoid mode)
//   f_t = exp(w_f^T x_t + b_f)
//   o_t = sigma(W_o x_t + b_o)
//
// Weight matrices arrive in the library's storage layout, where entry [i][j]
// maps input channel i to output channel j.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "axlstm/mlstm_kernels.hpp"

namespace oracle {

inline std::vector<double> mlstm_unstabilized(const float* x, int64_t len,
                                              const axlstm::mlstm::kernels::HeadView& p,
                                              bool sigmoid_gate = false) {
  const int d = p.dim;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto sig = [](double z) { return 1.0 / (1.0 + std::exp(-z)); };

  std::vector<double> cell(static_cast<size_t>(d) * d, 0.0);
  std::vector<double> norm(static_cast<size_t>(d), 0.0);
  std::vector<double> out(static_cast<size_t>(len) * d);
  std::vector<double> q(d), k(d), v(d), o(d);

  for (int64_t t = 0; t < len; ++t) {
    const float* xt = x + t * d;
    for (int j = 0; j < d; ++j) {
      double qj = p.b_query[j], kj = 0.0, vj = p.b_value[j], oj = p.b_ogate[j];
      for (int i = 0; i < d; ++i) {
        qj += static_cast<double>(xt[i]) * p.w_query[i * d + j];
        kj += static_cast<double>(xt[i]) * p.w_key[i * d + j];
        vj += static_cast<double>(xt[i]) * p.w_value[i * d + j];
        oj += static_cast<double>(xt[i]) * p.w_ogate[i * d + j];
      }
      q[j] = qj;
      k[j] = kj * inv_sqrt_d + p.b_key[j];
      v[j] = vj;
      o[j] = sig(oj);
    }
    double fpre = p.b_fgate, ipre = p.b_igate;
    for (int i = 0; i < d; ++i) {
      fpre += static_cast<double>(xt[i]) * p.w_fgate[i];
      ipre += static_cast<double>(xt[i]) * p.w_igate[i];
    }
    const double ft = sigmoid_gate ? sig(fpre) : std::exp(fpre);
    const double it = sigmoid_gate ? sig(ipre) : std::exp(ipre);

    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) cell[static_cast<size_t>(i * d + j)] =
          ft * cell[static_cast<size_t>(i * d + j)] + it * v[i] * k[j];
    double dot = 0.0;
    for (int j = 0; j < d; ++j) {
      norm[static_cast<size_t>(j)] = ft * norm[static_cast<size_t>(j)] + it * k[j];
      dot += norm[static_cast<size_t>(j)] * q[j];
    }
    const double denom = std::max(std::abs(dot), 1.0);
    for (int i = 0; i < d; ++i) {
      double hv = 0.0;
      for (int j = 0; j < d; ++j) hv += cell[static_cast<size_t>(i * d + j)] * q[j];
      out[static_cast<size_t>(t * d + i)] = o[i] * hv / denom;
    }
  }
  return out;
}

}  // namespace oracle
