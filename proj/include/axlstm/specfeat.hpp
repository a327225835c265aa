// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
//
// Audio ingestion and the patch front-end: WAV reading, log-mel features,
// patchification, 2D sinusoidal positional tables, unstructured masking,
// and assembly of the encoder input sequence.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "axlstm/common.hpp"
#include "axlstm/tensor.hpp"

namespace axlstm::feat {

using num::BasicTensor;
using num::Tensor;

struct Waveform {
  std::vector<float> samples;  // mono, [-1, 1]
  int sample_rate = 16000;
};

/// Reads PCM-16 or float-32 WAV; channels are averaged to mono and the
/// result is linearly resampled to 16 kHz when needed. Malformed files
/// raise IoError with the offending byte offset.
Waveform load_wav(const std::string& path);

void write_wav_pcm16(const std::string& path, std::span<const float> samples, int sample_rate);

std::vector<float> resample_linear(std::span<const float> x, int sr_from, int sr_to);

/// Mirror-extends x on both sides (repeated reflection when the padding
/// exceeds the signal length) and returns the [start, start+len) window of
/// the virtual padded signal, where start may be negative.
std::vector<float> reflect_window(std::span<const float> x, int64_t start, int64_t len);

struct Spectrogram {
  int64_t frames = 0;
  int64_t bins = 0;
  std::vector<float> values;  // frames x bins, row-major

  float at(int64_t t, int64_t f) const { return values[static_cast<size_t>(t * bins + f)]; }
  float& at(int64_t t, int64_t f) { return values[static_cast<size_t>(t * bins + f)]; }
};

struct LogmelConfig {
  int win = 400;   // 25 ms at 16 kHz
  int hop = 160;   // 10 ms
  int n_fft = 512;
  int n_mels = 80;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;
};

/// Log-mel spectrogram with reflective center padding; frame count is
/// ceil(len / hop). Hann window, power spectrum, HTK-style mel triangles,
/// natural log with an additive floor.
Spectrogram logmel(std::span<const float> wave, int sample_rate, const LogmelConfig& cfg = {});

/// Triangular mel filter weights, n_mels x (n_fft/2 + 1).
std::vector<double> mel_filterbank(const LogmelConfig& cfg, int sample_rate);

struct PatchConfig {
  int t = 4;   // frames per patch
  int f = 16;  // mel bins per patch
};

/// Non-overlapping patch rows, time-major: row k is the tile at grid
/// position (k / (F/f), k % (F/f)), flattened row-major. Non-divisible
/// inputs are an error naming the crop that would fit.
Tensor patchify(const Spectrogram& spec, const PatchConfig& cfg);

/// Exact inverse of patchify for a grid_h x grid_w patch grid.
Spectrogram unpatchify(const Tensor& patches, const PatchConfig& cfg, int64_t grid_h,
                       int64_t grid_w);

/// Separable sin/cos table over the patch grid: the first d_m/2 channels
/// encode the time index, the rest the frequency index. Deterministic and
/// non-learnable. d_m must be divisible by 4.
Tensor posemb_2d(int64_t grid_h, int64_t grid_w, int64_t d_model);

/// posemb_2d prefixed with an all-zero row for the cls position.
Tensor posemb_with_cls(int64_t grid_h, int64_t grid_w, int64_t d_model);

struct MaskPlan {
  int64_t total = 0;
  double ratio = 0.0;
  std::vector<uint8_t> masked;  // length total; covers patch tokens only

  int64_t masked_count() const {
    int64_t n = 0;
    for (uint8_t m : masked) n += m;
    return n;
  }
};

/// Chooses exactly round(ratio * n) indices uniformly without replacement.
MaskPlan sample_mask(int64_t n, double ratio, Rng& rng);

/// Raw little-endian float32 dump with an 8-byte header (uint32 T, uint32 F).
void write_spectrogram(const std::string& path, const Spectrogram& spec);
Spectrogram read_spectrogram(const std::string& path);

/// Token assembly: embeds unmasked patches, substitutes the mask token at
/// masked positions, prepends the cls token, and adds positional rows.
/// Positions are added after mask substitution, so the mask token keeps its
/// position information. Row 0 of pos (the cls row) must be zero.
template <class T>
BasicTensor<T> build_encoder_input(const BasicTensor<T>& raw_patches, const MaskPlan& plan,
                                   const BasicTensor<T>& embed_w, const BasicTensor<T>& embed_b,
                                   const BasicTensor<T>& cls_token, const BasicTensor<T>& mask_token,
                                   const BasicTensor<T>& pos) {
  const int64_t n = raw_patches.dim(0);
  const int64_t patch_dim = raw_patches.dim(1);
  const int64_t d_model = embed_w.dim(1);
  if (embed_w.dim(0) != patch_dim)
    throw ShapeError("build_encoder_input: embed " + num::shape_str(embed_w.shape()) +
                     " does not accept patches " + num::shape_str(raw_patches.shape()));
  if (static_cast<int64_t>(plan.masked.size()) != n)
    throw ShapeError("build_encoder_input: mask plan covers " +
                     std::to_string(plan.masked.size()) + " patches, input has " +
                     std::to_string(n));
  if (cls_token.shape() != num::Shape{1, d_model} || mask_token.shape() != num::Shape{1, d_model})
    throw ShapeError("build_encoder_input: cls/mask tokens must be (1," + std::to_string(d_model) +
                     ")");
  if (pos.shape() != num::Shape{n + 1, d_model})
    throw ShapeError("build_encoder_input: pos table " + num::shape_str(pos.shape()) +
                     " must be (" + std::to_string(n + 1) + "," + std::to_string(d_model) + ")");
  for (int64_t j = 0; j < d_model; ++j)
    if (pos.at(0, j) != T(0))
      throw ShapeError("build_encoder_input: cls positional row must be zero");

  auto embedded = num::add(num::matmul(raw_patches, embed_w), embed_b);
  std::vector<T> mvals(static_cast<size_t>(n * d_model));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d_model; ++j)
      mvals[static_cast<size_t>(i * d_model + j)] = plan.masked[static_cast<size_t>(i)] ? T(1) : T(0);
  auto mask01 = BasicTensor<T>::from_vector({n, d_model}, std::move(mvals));
  auto keep01 = num::sadd(num::smul(mask01, -1.0), 1.0);
  auto mask_rows = num::matmul(BasicTensor<T>::ones({n, 1}), mask_token);
  auto patch_tokens = num::add(num::mul(embedded, keep01), num::mul(mask_rows, mask01));
  patch_tokens = num::add(patch_tokens, num::slice(pos, 0, 1, n));
  auto cls_row = num::add(cls_token, num::slice(pos, 0, 0, 1));
  return num::concat(std::vector<BasicTensor<T>>{cls_row, patch_tokens}, 0);
}

}  // namespace axlstm::feat
