// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
//
// Self-supervised pretraining: reconstruction head, masked-MSE objective,
// AdamW with warmup+cosine schedule, the training loop, and the synthetic
// desk-scale dataset.

#pragma once

#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "axlstm/checkpoint.hpp"
#include "axlstm/encoder.hpp"
#include "axlstm/specfeat.hpp"
#include "axlstm/tensor.hpp"

namespace axlstm::train {

using num::BasicTensor;
using num::Tensor;

template <class T>
struct ReconHeadParams {
  BasicTensor<T> w_hidden, b_hidden;  // (d_m, d_m), (d_m)
  BasicTensor<T> w_out, b_out;        // (d_m, t*f), (t*f)

  template <class U>
  ReconHeadParams<U> cast() const {
    return {w_hidden.template cast<U>(), b_hidden.template cast<U>(), w_out.template cast<U>(),
            b_out.template cast<U>()};
  }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    fn(prefix + ".w_hidden", w_hidden);
    fn(prefix + ".b_hidden", b_hidden);
    fn(prefix + ".w_out", w_out);
    fn(prefix + ".b_out", b_out);
  }
};

/// Single-hidden-layer reconstruction MLP. Drops the cls row, so N+1 encoded
/// tokens give N reconstructed patches.
template <class T>
BasicTensor<T> reconstruct(const BasicTensor<T>& z, const ReconHeadParams<T>& head) {
  if (z.rank() != 2 || z.dim(1) != head.w_hidden.dim(0))
    throw ShapeError("reconstruct: encoded " + num::shape_str(z.shape()) +
                     " does not match head width " + std::to_string(head.w_hidden.dim(0)));
  if (z.dim(0) < 2) throw ShapeError("reconstruct: need a cls row plus at least one token");
  auto body = num::slice(z, 0, 1, z.dim(0) - 1);
  auto hidden = num::gelu(num::add(num::matmul(body, head.w_hidden), head.b_hidden));
  return num::add(num::matmul(hidden, head.w_out), head.b_out);
}

/// Mean over masked patch rows of the per-row mean squared error. Unmasked
/// rows contribute exactly zero, in value and in gradient.
template <class T>
BasicTensor<T> masked_mse(const BasicTensor<T>& pred, const BasicTensor<T>& target,
                          const feat::MaskPlan& plan) {
  if (pred.shape() != target.shape())
    throw ShapeError("masked_mse: prediction " + num::shape_str(pred.shape()) +
                     " vs target " + num::shape_str(target.shape()));
  const int64_t n = pred.dim(0), dim = pred.dim(1);
  if (static_cast<int64_t>(plan.masked.size()) != n)
    throw ShapeError("masked_mse: plan covers " + std::to_string(plan.masked.size()) +
                     " rows, tensors have " + std::to_string(n));
  const int64_t count = plan.masked_count();
  if (count == 0) throw Error("masked_mse: no masked patches");
  std::vector<T> mv(static_cast<size_t>(n * dim));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < dim; ++j)
      mv[static_cast<size_t>(i * dim + j)] = plan.masked[static_cast<size_t>(i)] ? T(1) : T(0);
  auto mask = BasicTensor<T>::from_vector({n, dim}, std::move(mv));
  auto diff = num::sub(pred, target);
  auto sq = num::mul(num::mul(diff, diff), mask);
  return num::smul(num::sum_all(sq), 1.0 / (static_cast<double>(count) * static_cast<double>(dim)));
}

struct PretrainConfig {
  int epochs = 25;
  int64_t steps = 0;  // when nonzero, overrides the epoch count
  int batch_size = 32;
  double weight_decay = 0.05;
  int warmup_epochs = 10;
  double peak_lr = 3e-4;
  uint64_t seed = 0;
  double mask_ratio = 0.5;
  double crop_seconds = 2.0;
  feat::PatchConfig patch;

  void validate() const {
    if (epochs <= 0 && steps <= 0) throw ConfigError("pretrain: epochs or steps required");
    if (steps <= 0 && warmup_epochs >= epochs)
      throw ConfigError("pretrain: warmup_epochs must be below epochs");
    if (peak_lr < 0) throw ConfigError("pretrain: peak_lr must be nonnegative");
    if (batch_size < 1) throw ConfigError("pretrain: batch_size must be positive");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
      throw ConfigError("pretrain: mask_ratio must lie in (0,1)");
    if (crop_seconds <= 0) throw ConfigError("pretrain: crop_seconds must be positive");
  }
};

/// Linear warmup to peak_lr, then cosine decay to zero. Warmup occupies the
/// warmup_epochs / epochs fraction of total_steps.
double lr_schedule(int64_t step, int64_t total_steps, const PretrainConfig& cfg);

/// Decoupled-weight-decay Adam. Decay applies to weight matrices only;
/// biases, norm parameters, and the cls/mask tokens are exempt.
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    bool decay = false;
    std::vector<float> m, v;
  };

  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void add_param(const std::string& name, Tensor param, bool decay) {
    slots_.push_back({name, std::move(param), decay,
                      std::vector<float>(static_cast<size_t>(0)),
                      std::vector<float>(static_cast<size_t>(0))});
    auto& s = slots_.back();
    s.m.assign(static_cast<size_t>(s.param.numel()), 0.f);
    s.v.assign(static_cast<size_t>(s.param.numel()), 0.f);
  }

  std::vector<Slot>& slots() { return slots_; }
  int64_t step_count() const { return t_; }

  /// One update step; grads maps parameter nodes to gradient buffers.
  void step(const num::LeafGradMap<float>& grads, double lr, double weight_decay);

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::vector<Slot> slots_;
};

/// Full parameter set of the masked-reconstruction model.
struct ModelParams {
  Tensor embed_w, embed_b;  // (t*f, d_m), (d_m)
  Tensor cls_token, mask_token;  // (1, d_m)
  enc::EncoderParams<float> encoder;
  ReconHeadParams<float> head;
  // Dataset-level log-mel standardization, fixed at train start and stored
  // in the checkpoint so downstream feature extraction matches.
  float spec_mean = 0.f;
  float spec_std = 1.f;

  void visit(const std::function<void(const std::string&, Tensor&)>& fn) {
    fn("embed_w", embed_w);
    fn("embed_b", embed_b);
    fn("cls_token", cls_token);
    fn("mask_token", mask_token);
    encoder.visit("encoder", fn);
    head.visit("head", fn);
  }

  void set_requires_grad(bool v) {
    visit([v](const std::string&, Tensor& t) { t.set_requires_grad(v); });
  }

  int64_t param_count() {
    int64_t n = 0;
    visit([&n](const std::string&, Tensor& t) { n += t.numel(); });
    return n;
  }
};

ModelParams init_model(const enc::EncoderConfig& cfg, const feat::PatchConfig& patch, Rng& rng);

struct SynthClip {
  std::vector<float> samples;  // 3 s at 16 kHz
  int label = 0;               // frequency-band class of the loudest tone
};

inline constexpr int kSynthClasses = 8;
inline constexpr double kSynthSeconds = 3.0;

/// Band index of a frequency under the mel-equal partition of 100..6000 Hz
/// used for synthetic labels.
int synth_band_of(double freq_hz);

/// Reproducible tone-mixture clips: 1-3 sinusoids with random frequencies
/// (100-6000 Hz), amplitudes and onsets, plus Gaussian noise at 10-30 dB SNR,
/// peak-normalized to 1.
std::vector<SynthClip> synth_dataset(int64_t n_clips, uint64_t seed);

struct TrainResult {
  std::vector<double> losses;
  std::vector<double> lrs;
  ModelParams params;
  int64_t total_steps = 0;
  double wall_seconds = 0;
};

using StepCallback = std::function<void(int64_t step, double lr, double loss)>;

/// Runs masked-reconstruction pretraining on waveform clips. Deterministic
/// given (config, encoder config, dataset): per-sample randomness is keyed
/// by global sample index, and batch gradients are reduced in sample order,
/// so results do not depend on thread count.
TrainResult train(const PretrainConfig& cfg, const enc::EncoderConfig& enc_cfg,
                  const std::vector<SynthClip>& dataset, const StepCallback& on_step = {});

nlohmann::json encoder_config_to_json(const enc::EncoderConfig& cfg);
enc::EncoderConfig encoder_config_from_json(const nlohmann::json& j);
nlohmann::json pretrain_config_to_json(const PretrainConfig& cfg);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);

/// Writes model + configs into the container format.
void save_model(const std::string& path, ModelParams& params, const enc::EncoderConfig& enc_cfg,
                const PretrainConfig& cfg, int64_t step, const std::vector<double>& loss_tail);

struct LoadedModel {
  ModelParams params;
  enc::EncoderConfig encoder_cfg;
  PretrainConfig pretrain_cfg;
  int64_t step = 0;
};

/// Loads a checkpoint; when `expect` is given, its d_model/depth/expansion
/// must match the stored config.
LoadedModel load_model(const std::string& path, const enc::EncoderConfig* expect = nullptr);

}  // namespace axlstm::train
