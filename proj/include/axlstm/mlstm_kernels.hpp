// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
//
// Forward-only mLSTM sequence kernels. Inputs and outputs are float32; all
// internal state and accumulation run in double so the two forms agree to
// within output rounding. The serial recurrent kernel is the reference; the
// parallel kernel materializes the full LxL gate-weight matrix and is
// OpenMP-parallel over timesteps.

#pragma once

#include <atomic>
#include <cstdint>

namespace axlstm::mlstm {

enum class GateType { kExponential, kSigmoid };

/// Fault-injection hook for selftest: when set, exponential gating runs
/// without the log-space stabilizer, which overflows under large gate
/// pre-activations. Exists to prove the equivalence suite catches a broken
/// stabilizer.
inline std::atomic<bool> g_sabotage_stabilizer{false};

namespace kernels {

/// Borrowed pointers into one head's float32 parameters. Weight matrices are
/// (d,d) row-major and applied on the right: y = x . W + b.
struct HeadView {
  const float* w_query = nullptr;
  const float* w_key = nullptr;
  const float* w_value = nullptr;
  const float* w_ogate = nullptr;
  const float* b_query = nullptr;
  const float* b_key = nullptr;
  const float* b_value = nullptr;
  const float* b_ogate = nullptr;
  const float* w_igate = nullptr;  // (d)
  const float* w_fgate = nullptr;  // (d)
  float b_igate = 0.f;
  float b_fgate = 0.f;
  int dim = 0;
};

/// Left-to-right fold of the stabilized step from a zero state. Serial.
void seq_recurrent(const float* x, int64_t len, const HeadView& p, GateType gate,
                   bool apply_ogate, float* out);

/// Materialized-gate-matrix form; equals seq_recurrent in exact arithmetic.
/// OpenMP-parallel over output timesteps.
void seq_parallel(const float* x, int64_t len, const HeadView& p, GateType gate,
                  bool apply_ogate, float* out);

}  // namespace kernels
}  // namespace axlstm::mlstm
