// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
//
// The mLSTM block and the stacked encoder.
//
// Block layout: pre-norm residual. The branch up-projects LN(x) by the
// expansion factor, runs block-diagonal per-head q/k/v/gate projections and
// the multihead mLSTM core, applies per-head group normalization, gates
// elementwise with a sigmoid projection of the up-projected stream, and
// down-projects back to model width. Head width defaults to 64 channels;
// head count grows with the inner width.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "axlstm/mlstm.hpp"
#include "axlstm/tensor.hpp"

namespace axlstm::enc {

using mlstm::GateType;
using mlstm::HeadParams;
using num::BasicTensor;

enum class Variant { kTiny, kSmall, kBase, kCustom };
enum class FlipPolicy { kNone, kAlternatingEven };

struct EncoderConfig {
  Variant variant = Variant::kCustom;
  int d_model = 192;
  int depth = 12;
  int expansion = 3;
  int head_dim = 64;
  FlipPolicy flip_policy = FlipPolicy::kNone;
  GateType gate = GateType::kExponential;
  bool flip_includes_cls = true;

  static EncoderConfig preset(Variant v) {
    EncoderConfig cfg;
    cfg.variant = v;
    switch (v) {
      case Variant::kTiny: cfg.d_model = 192; break;
      case Variant::kSmall: cfg.d_model = 384; break;
      case Variant::kBase: cfg.d_model = 768; break;
      case Variant::kCustom: break;
    }
    cfg.depth = 12;
    return cfg;
  }

  int inner_width() const { return expansion * d_model; }

  int heads() const {
    const int inner = inner_width();
    if (inner < head_dim) return 1;
    if (inner % head_dim != 0)
      throw ConfigError("encoder: inner width " + std::to_string(inner) +
                        " not divisible by head width " + std::to_string(head_dim));
    return inner / head_dim;
  }

  bool block_flips(int index) const {
    return flip_policy == FlipPolicy::kAlternatingEven && index % 2 == 0;
  }

  void validate() const {
    if (d_model <= 0 || depth < 0) throw ConfigError("encoder: bad dimensions");
    if (expansion < 1) throw ConfigError("encoder: expansion must be >= 1");
    (void)heads();
  }
};

template <class T>
struct BlockParams {
  BasicTensor<T> ln_scale, ln_shift;      // (d_m)
  BasicTensor<T> up_w, up_b;              // (d_m, E), (E)
  std::vector<HeadParams<T>> heads;       // block-diagonal projections
  std::vector<BasicTensor<T>> gn_scale;   // per head (d)
  std::vector<BasicTensor<T>> gn_shift;
  BasicTensor<T> down_w, down_b;          // (E, d_m), (d_m)

  template <class U>
  BlockParams<U> cast() const {
    BlockParams<U> p;
    p.ln_scale = ln_scale.template cast<U>();
    p.ln_shift = ln_shift.template cast<U>();
    p.up_w = up_w.template cast<U>();
    p.up_b = up_b.template cast<U>();
    for (const auto& h : heads) p.heads.push_back(h.template cast<U>());
    for (const auto& t : gn_scale) p.gn_scale.push_back(t.template cast<U>());
    for (const auto& t : gn_shift) p.gn_shift.push_back(t.template cast<U>());
    p.down_w = down_w.template cast<U>();
    p.down_b = down_b.template cast<U>();
    return p;
  }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    fn(prefix + ".ln_scale", ln_scale);
    fn(prefix + ".ln_shift", ln_shift);
    fn(prefix + ".up_w", up_w);
    fn(prefix + ".up_b", up_b);
    for (size_t h = 0; h < heads.size(); ++h) {
      heads[h].visit(prefix + ".head" + std::to_string(h), fn);
      fn(prefix + ".head" + std::to_string(h) + ".gn_scale", gn_scale[h]);
      fn(prefix + ".head" + std::to_string(h) + ".gn_shift", gn_shift[h]);
    }
    fn(prefix + ".down_w", down_w);
    fn(prefix + ".down_b", down_b);
  }
};

template <class T>
struct EncoderParams {
  std::vector<BlockParams<T>> blocks;
  BasicTensor<T> final_scale, final_shift;  // (d_m)

  template <class U>
  EncoderParams<U> cast() const {
    EncoderParams<U> p;
    for (const auto& b : blocks) p.blocks.push_back(b.template cast<U>());
    p.final_scale = final_scale.template cast<U>();
    p.final_shift = final_shift.template cast<U>();
    return p;
  }

  void visit(const std::string& prefix,
             const std::function<void(const std::string&, BasicTensor<T>&)>& fn) {
    for (size_t b = 0; b < blocks.size(); ++b)
      blocks[b].visit(prefix + ".block" + std::to_string(b), fn);
    fn(prefix + ".final_scale", final_scale);
    fn(prefix + ".final_shift", final_shift);
  }
};

/// Weight init: N(0, 0.02) matrices, zero biases, unit norm scales. The
/// forget-gate bias starts at 1 so fresh models begin with slow memory decay.
inline BlockParams<float> init_block(const EncoderConfig& cfg, Rng& rng) {
  const int dm = cfg.d_model;
  const int inner = cfg.inner_width();
  const int nh = cfg.heads();
  const int d = inner / nh;
  const double w_std = 0.02;
  BlockParams<float> p;
  p.ln_scale = num::Tensor::ones({dm});
  p.ln_shift = num::Tensor::zeros({dm});
  p.up_w = num::Tensor::randn({dm, inner}, rng, w_std);
  p.up_b = num::Tensor::zeros({inner});
  for (int h = 0; h < nh; ++h) {
    HeadParams<float> hp = HeadParams<float>::zeros(d);
    hp.w_query = num::Tensor::randn({d, d}, rng, w_std);
    hp.w_key = num::Tensor::randn({d, d}, rng, w_std);
    hp.w_value = num::Tensor::randn({d, d}, rng, w_std);
    hp.w_ogate = num::Tensor::randn({d, d}, rng, w_std);
    hp.w_igate = num::Tensor::randn({d, 1}, rng, w_std);
    hp.w_fgate = num::Tensor::randn({d, 1}, rng, w_std);
    hp.b_fgate = num::Tensor::full({1}, 1.f);
    p.heads.push_back(std::move(hp));
    p.gn_scale.push_back(num::Tensor::ones({d}));
    p.gn_shift.push_back(num::Tensor::zeros({d}));
  }
  p.down_w = num::Tensor::randn({inner, dm}, rng, w_std);
  p.down_b = num::Tensor::zeros({dm});
  return p;
}

inline EncoderParams<float> init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  EncoderParams<float> p;
  for (int i = 0; i < cfg.depth; ++i) p.blocks.push_back(init_block(cfg, rng));
  p.final_scale = num::Tensor::ones({cfg.d_model});
  p.final_shift = num::Tensor::zeros({cfg.d_model});
  return p;
}

/// Reverses token order; the cls row participates.
template <class T>
BasicTensor<T> flip_sequence(const BasicTensor<T>& tokens) {
  return num::reverse(tokens, 0);
}

/// Reverses patch-token order while pinning row 0 (cls) in place.
template <class T>
BasicTensor<T> flip_sequence_keep_cls(const BasicTensor<T>& tokens) {
  if (tokens.dim(0) <= 1) return tokens;
  auto cls = num::slice(tokens, 0, 0, 1);
  auto rest = num::slice(tokens, 0, 1, tokens.dim(0) - 1);
  return num::concat(std::vector<BasicTensor<T>>{cls, num::reverse(rest, 0)}, 0);
}

template <class T>
BasicTensor<T> block_forward(const BasicTensor<T>& x, const EncoderConfig& cfg,
                             const BlockParams<T>& p, bool flip,
                             mlstm::Impl impl = mlstm::Impl::kAuto) {
  const int dm = cfg.d_model;
  if (x.rank() != 2 || x.dim(1) != dm)
    throw ShapeError("block: input " + num::shape_str(x.shape()) + " does not match width " +
                     std::to_string(dm));
  const int nh = static_cast<int>(p.heads.size());
  const int d = cfg.inner_width() / nh;

  auto normed = num::layer_norm(x, p.ln_scale, p.ln_shift);
  auto h = flip ? (cfg.flip_includes_cls ? flip_sequence(normed) : flip_sequence_keep_cls(normed))
                : normed;
  auto u = num::add(num::matmul(h, p.up_w), p.up_b);

  std::vector<BasicTensor<T>> parts;
  parts.reserve(p.heads.size());
  for (int i = 0; i < nh; ++i) {
    auto u_head = num::slice(u, 1, static_cast<int64_t>(i) * d, d);
    auto core = mlstm::parallel(u_head, p.heads[static_cast<size_t>(i)], cfg.gate,
                                /*apply_ogate=*/false, impl);
    auto gn = num::layer_norm(core, p.gn_scale[static_cast<size_t>(i)],
                              p.gn_shift[static_cast<size_t>(i)]);
    auto gate = num::sigmoid(num::add(num::matmul(u_head, p.heads[static_cast<size_t>(i)].w_ogate),
                                      p.heads[static_cast<size_t>(i)].b_ogate));
    parts.push_back(num::mul(gn, gate));
  }
  auto branch = num::concat(parts, 1);
  auto down = num::add(num::matmul(branch, p.down_w), p.down_b);
  if (flip) down = cfg.flip_includes_cls ? flip_sequence(down) : flip_sequence_keep_cls(down);
  return num::add(x, down);
}

template <class T>
BasicTensor<T> encode(const BasicTensor<T>& tokens, const EncoderConfig& cfg,
                      const EncoderParams<T>& params, mlstm::Impl impl = mlstm::Impl::kAuto) {
  if (static_cast<int>(params.blocks.size()) != cfg.depth)
    throw ConfigError("encode: config depth " + std::to_string(cfg.depth) + " but " +
                      std::to_string(params.blocks.size()) + " block parameter sets");
  BasicTensor<T> x = tokens;
  for (int i = 0; i < cfg.depth; ++i) {
    try {
      x = block_forward(x, cfg, params.blocks[static_cast<size_t>(i)], cfg.block_flips(i), impl);
    } catch (const Error& e) {
      throw Error("encode: block " + std::to_string(i) + ": " + e.what());
    }
  }
  return num::layer_norm(x, params.final_scale, params.final_shift);
}

/// Exact learnable-scalar count for a configuration: patch embedding, cls
/// and mask tokens, all blocks, the final norm, and optionally the
/// reconstruction head.
inline int64_t count_params(const EncoderConfig& cfg, int patch_t, int patch_f,
                            bool include_head) {
  cfg.validate();
  const int64_t dm = cfg.d_model;
  const int64_t inner = cfg.inner_width();
  const int64_t nh = cfg.heads();
  const int64_t d = inner / nh;
  const int64_t patch_dim = static_cast<int64_t>(patch_t) * patch_f;

  const int64_t per_head = 4 * d * d  // q, k, v, output gate matrices
                           + 4 * d    // their biases
                           + 2 * d    // input/forget gate vectors
                           + 2        // gate biases
                           + 2 * d;   // group norm scale/shift
  const int64_t block = 2 * dm                 // pre-norm
                        + dm * inner + inner   // up-projection
                        + nh * per_head        //
                        + inner * dm + dm;     // down-projection
  int64_t total = patch_dim * dm + dm  // patch embedding
                  + dm                 // cls token
                  + dm                 // mask token
                  + cfg.depth * block  //
                  + 2 * dm;            // final norm
  if (include_head) total += dm * dm + dm + dm * patch_dim + patch_dim;
  return total;
}

}  // namespace axlstm::enc
