// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0

#include "axlstm/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace axlstm::train {

double lr_schedule(int64_t step, int64_t total_steps, const PretrainConfig& cfg) {
  if (step < 0 || step > total_steps)
    throw ConfigError("lr_schedule: step " + std::to_string(step) + " outside [0," +
                      std::to_string(total_steps) + "]");
  const double frac = cfg.epochs > 0
                          ? static_cast<double>(cfg.warmup_epochs) / static_cast<double>(cfg.epochs)
                          : 0.1;
  const int64_t warmup = std::max<int64_t>(1, std::llround(frac * static_cast<double>(total_steps)));
  if (step <= warmup)
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void AdamW::step(const num::LeafGradMap<float>& grads, double lr, double weight_decay) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& slot : slots_) {
    auto it = grads.find(slot.param.node().get());
    auto& p = slot.param.mutable_data();
    if (weight_decay > 0 && slot.decay)
      for (auto& w : p) w -= static_cast<float>(lr * weight_decay * w);
    if (it == grads.end()) continue;
    const auto& g = it->second;
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      if (!std::isfinite(gi))
        throw Error("adamw: non-finite gradient for " + slot.name + " at element " +
                    std::to_string(i));
      slot.m[i] = static_cast<float>(beta1_ * slot.m[i] + (1.0 - beta1_) * gi);
      slot.v[i] = static_cast<float>(beta2_ * slot.v[i] + (1.0 - beta2_) * gi * gi);
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      p[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

ModelParams init_model(const enc::EncoderConfig& cfg, const feat::PatchConfig& patch, Rng& rng) {
  cfg.validate();
  const int64_t dm = cfg.d_model;
  const int64_t patch_dim = static_cast<int64_t>(patch.t) * patch.f;
  ModelParams p;
  p.embed_w = Tensor::randn({patch_dim, dm}, rng, 0.02);
  p.embed_b = Tensor::zeros({dm});
  p.cls_token = Tensor::randn({1, dm}, rng, 0.02);
  p.mask_token = Tensor::randn({1, dm}, rng, 0.02);
  p.encoder = enc::init_encoder(cfg, rng);
  p.head.w_hidden = Tensor::randn({dm, dm}, rng, 0.02);
  p.head.b_hidden = Tensor::zeros({dm});
  p.head.w_out = Tensor::randn({dm, patch_dim}, rng, 0.02);
  p.head.b_out = Tensor::zeros({patch_dim});
  return p;
}

int synth_band_of(double freq_hz) {
  auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  const double lo = mel(100.0), hi = mel(6000.0);
  const double pos = (mel(freq_hz) - lo) / (hi - lo);
  const int band = static_cast<int>(pos * kSynthClasses);
  return std::clamp(band, 0, kSynthClasses - 1);
}

std::vector<SynthClip> synth_dataset(int64_t n_clips, uint64_t seed) {
  if (n_clips < 1) throw ConfigError("synth_dataset: need at least one clip");
  const int64_t len = static_cast<int64_t>(kSynthSeconds * 16000);
  std::vector<SynthClip> clips(static_cast<size_t>(n_clips));
  Rng base(seed, "data");
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n_clips; ++i) {
    Rng rng = base.at(static_cast<uint64_t>(i));
    SynthClip& clip = clips[static_cast<size_t>(i)];
    clip.samples.assign(static_cast<size_t>(len), 0.f);
    const int n_tones = 1 + static_cast<int>(rng.uniform_int(3));
    double best_amp = -1.0;
    double signal_power = 0.0;
    for (int tone = 0; tone < n_tones; ++tone) {
      const double freq = rng.uniform(100.0, 6000.0);
      const double amp = rng.uniform(0.2, 0.8);
      const int64_t onset = static_cast<int64_t>(rng.uniform(0.0, 2.0) * 16000);
      const double phase = rng.uniform(0.0, 2.0 * M_PI);
      if (amp > best_amp) {
        best_amp = amp;
        clip.label = synth_band_of(freq);
      }
      for (int64_t t = onset; t < len; ++t)
        clip.samples[static_cast<size_t>(t)] += static_cast<float>(
            amp * std::sin(2.0 * M_PI * freq * static_cast<double>(t - onset) / 16000.0 + phase));
      signal_power += 0.5 * amp * amp * static_cast<double>(len - onset) / static_cast<double>(len);
    }
    const double snr_db = rng.uniform(10.0, 30.0);
    const double noise_std = std::sqrt(signal_power / std::pow(10.0, snr_db / 10.0));
    for (auto& s : clip.samples) s += static_cast<float>(noise_std * rng.normal());
    float peak = 0.f;
    for (float s : clip.samples) peak = std::max(peak, std::abs(s));
    if (peak > 1.f)
      for (auto& s : clip.samples) s /= peak;
  }
  return clips;
}

namespace {

struct SampleGrads {
  double loss = 0;
  num::LeafGradMap<float> grads;
};

feat::Spectrogram standardized_logmel(std::span<const float> crop, float mean, float stddev) {
  feat::Spectrogram spec = feat::logmel(crop, 16000);
  for (auto& v : spec.values) v = (v - mean) / stddev;
  return spec;
}

}  // namespace

TrainResult train(const PretrainConfig& cfg, const enc::EncoderConfig& enc_cfg,
                  const std::vector<SynthClip>& dataset, const StepCallback& on_step) {
  cfg.validate();
  enc_cfg.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  const int64_t crop_len = static_cast<int64_t>(cfg.crop_seconds * 16000);
  for (size_t i = 0; i < dataset.size(); ++i)
    if (static_cast<int64_t>(dataset[i].samples.size()) < crop_len)
      throw ConfigError("train: clip " + std::to_string(i) + " shorter than the crop window");

  const auto t_start = std::chrono::steady_clock::now();

  const int64_t steps_per_epoch =
      (static_cast<int64_t>(dataset.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = cfg.steps > 0 ? cfg.steps : steps_per_epoch * cfg.epochs;

  Rng init_rng(cfg.seed, "init");
  ModelParams params = init_model(enc_cfg, cfg.patch, init_rng);

  // Dataset-level log-mel standardization from a fixed sample of clips,
  // stored with the model so downstream feature extraction matches.
  {
    const int64_t probe = std::min<int64_t>(static_cast<int64_t>(dataset.size()), 32);
    double acc = 0, acc2 = 0;
    int64_t count = 0;
    for (int64_t i = 0; i < probe; ++i) {
      const auto& s = dataset[static_cast<size_t>(i)].samples;
      const int64_t start = (static_cast<int64_t>(s.size()) - crop_len) / 2;
      feat::Spectrogram spec =
          feat::logmel(std::span<const float>(s.data() + start, static_cast<size_t>(crop_len)), 16000);
      for (float v : spec.values) {
        acc += v;
        acc2 += static_cast<double>(v) * v;
        ++count;
      }
    }
    const double mean = acc / static_cast<double>(count);
    const double var = std::max(acc2 / static_cast<double>(count) - mean * mean, 1e-6);
    params.spec_mean = static_cast<float>(mean);
    params.spec_std = static_cast<float>(std::sqrt(var));
  }

  params.set_requires_grad(true);
  AdamW opt;
  params.visit([&opt](const std::string& name, Tensor& t) {
    const bool decay = name.find("w_") != std::string::npos || name == "embed_w";
    opt.add_param(name, t, decay);
  });

  Rng data_rng(cfg.seed, "data");
  Rng mask_rng(cfg.seed, "mask");

  TrainResult result;
  result.total_steps = total_steps;

  const int64_t spec_frames = (crop_len + 159) / 160;
  if (spec_frames % cfg.patch.t != 0 || 80 % cfg.patch.f != 0)
    throw ConfigError("train: crop of " + std::to_string(spec_frames) +
                      " frames is not divisible by the patch layout");
  const int64_t grid_h = spec_frames / cfg.patch.t;
  const int64_t grid_w = 80 / cfg.patch.f;
  Tensor pos_f = feat::posemb_with_cls(grid_h, grid_w, enc_cfg.d_model);

  for (int64_t step_idx = 0; step_idx < total_steps; ++step_idx) {
    const int B = cfg.batch_size;
    std::vector<SampleGrads> per_sample(static_cast<size_t>(B));

    // Independent tapes per sample; shared parameter nodes are read-only and
    // leaf gradients land in per-sample maps.
#pragma omp parallel for schedule(dynamic, 1)
    for (int b = 0; b < B; ++b) {
      const uint64_t g_index = static_cast<uint64_t>(step_idx) * B + b;
      Rng d = data_rng.at(g_index);
      Rng m = mask_rng.at(g_index);
      const auto& clip = dataset[d.uniform_int(dataset.size())];
      const int64_t max_start = static_cast<int64_t>(clip.samples.size()) - crop_len;
      const int64_t start = max_start > 0 ? static_cast<int64_t>(d.uniform_int(max_start + 1)) : 0;

      feat::Spectrogram spec = standardized_logmel(
          std::span<const float>(clip.samples.data() + start, static_cast<size_t>(crop_len)),
          params.spec_mean, params.spec_std);
      Tensor raw = feat::patchify(spec, cfg.patch);
      feat::MaskPlan plan = feat::sample_mask(raw.dim(0), cfg.mask_ratio, m);

      auto tokens = feat::build_encoder_input(raw, plan, params.embed_w, params.embed_b,
                                              params.cls_token, params.mask_token, pos_f);
      auto z = enc::encode(tokens, enc_cfg, params.encoder, mlstm::Impl::kComposed);
      auto pred = reconstruct(z, params.head);
      auto loss = masked_mse(pred, raw, plan);
      per_sample[static_cast<size_t>(b)].loss = loss.item();
      num::backward(loss, per_sample[static_cast<size_t>(b)].grads);
    }

    // Serial reduction in sample order keeps results thread-count invariant.
    num::LeafGradMap<float> batch_grads;
    double batch_loss = 0;
    for (int b = 0; b < B; ++b) {
      batch_loss += per_sample[static_cast<size_t>(b)].loss / B;
      for (auto& [node, g] : per_sample[static_cast<size_t>(b)].grads) {
        auto& acc = batch_grads[node];
        if (acc.empty()) acc.assign(g.size(), 0.f);
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] / static_cast<float>(B);
      }
      per_sample[static_cast<size_t>(b)].grads.clear();
    }

    const double lr = lr_schedule(step_idx + 1, total_steps, cfg);
    opt.step(batch_grads, lr, cfg.weight_decay);
    result.losses.push_back(batch_loss);
    result.lrs.push_back(lr);
    if (on_step) on_step(step_idx, lr, batch_loss);
  }

  params.set_requires_grad(false);
  result.params = std::move(params);
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

namespace {
std::string gate_name(mlstm::GateType g) {
  return g == mlstm::GateType::kExponential ? "exponential" : "sigmoid";
}
mlstm::GateType gate_from(const std::string& s) {
  if (s == "exponential") return mlstm::GateType::kExponential;
  if (s == "sigmoid") return mlstm::GateType::kSigmoid;
  throw ConfigError("unknown gate type '" + s + "'");
}
std::string variant_name(enc::Variant v) {
  switch (v) {
    case enc::Variant::kTiny: return "tiny";
    case enc::Variant::kSmall: return "small";
    case enc::Variant::kBase: return "base";
    default: return "custom";
  }
}
enc::Variant variant_from(const std::string& s) {
  if (s == "tiny") return enc::Variant::kTiny;
  if (s == "small") return enc::Variant::kSmall;
  if (s == "base") return enc::Variant::kBase;
  if (s == "custom") return enc::Variant::kCustom;
  throw ConfigError("unknown variant '" + s + "'");
}
}  // namespace

nlohmann::json encoder_config_to_json(const enc::EncoderConfig& cfg) {
  return {{"variant", variant_name(cfg.variant)},
          {"d_model", cfg.d_model},
          {"depth", cfg.depth},
          {"expansion", cfg.expansion},
          {"head_dim", cfg.head_dim},
          {"flip_policy", cfg.flip_policy == enc::FlipPolicy::kNone ? "none" : "alternating-even"},
          {"gate", gate_name(cfg.gate)},
          {"flip_includes_cls", cfg.flip_includes_cls}};
}

enc::EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  enc::EncoderConfig cfg;
  cfg.variant = variant_from(j.at("variant").get<std::string>());
  cfg.d_model = j.at("d_model").get<int>();
  cfg.depth = j.at("depth").get<int>();
  cfg.expansion = j.at("expansion").get<int>();
  cfg.head_dim = j.at("head_dim").get<int>();
  cfg.flip_policy = j.at("flip_policy").get<std::string>() == "none"
                        ? enc::FlipPolicy::kNone
                        : enc::FlipPolicy::kAlternatingEven;
  cfg.gate = gate_from(j.at("gate").get<std::string>());
  cfg.flip_includes_cls = j.at("flip_includes_cls").get<bool>();
  return cfg;
}

nlohmann::json pretrain_config_to_json(const PretrainConfig& cfg) {
  return {{"epochs", cfg.epochs},
          {"steps", cfg.steps},
          {"batch_size", cfg.batch_size},
          {"weight_decay", cfg.weight_decay},
          {"warmup_epochs", cfg.warmup_epochs},
          {"peak_lr", cfg.peak_lr},
          {"seed", cfg.seed},
          {"mask_ratio", cfg.mask_ratio},
          {"crop_seconds", cfg.crop_seconds},
          {"patch_t", cfg.patch.t},
          {"patch_f", cfg.patch.f}};
}

PretrainConfig pretrain_config_from_json(const nlohmann::json& j) {
  PretrainConfig cfg;
  cfg.epochs = j.at("epochs").get<int>();
  cfg.steps = j.at("steps").get<int64_t>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.weight_decay = j.at("weight_decay").get<double>();
  cfg.warmup_epochs = j.at("warmup_epochs").get<int>();
  cfg.peak_lr = j.at("peak_lr").get<double>();
  cfg.seed = j.at("seed").get<uint64_t>();
  cfg.mask_ratio = j.at("mask_ratio").get<double>();
  cfg.crop_seconds = j.at("crop_seconds").get<double>();
  cfg.patch.t = j.at("patch_t").get<int>();
  cfg.patch.f = j.at("patch_f").get<int>();
  return cfg;
}

void save_model(const std::string& path, ModelParams& params, const enc::EncoderConfig& enc_cfg,
                const PretrainConfig& cfg, int64_t step, const std::vector<double>& loss_tail) {
  ckpt::Checkpoint out;
  out.metadata["encoder"] = encoder_config_to_json(enc_cfg);
  out.metadata["pretrain"] = pretrain_config_to_json(cfg);
  out.metadata["step"] = step;
  out.metadata["spec_mean"] = params.spec_mean;
  out.metadata["spec_std"] = params.spec_std;
  out.metadata["loss_tail"] = loss_tail;
  params.visit([&out](const std::string& name, Tensor& t) { out.tensors.emplace(name, t.detach()); });
  ckpt::save(path, out);
}

LoadedModel load_model(const std::string& path, const enc::EncoderConfig* expect) {
  ckpt::Checkpoint in = ckpt::load(path);
  LoadedModel lm;
  lm.encoder_cfg = encoder_config_from_json(in.metadata.at("encoder"));
  lm.pretrain_cfg = pretrain_config_from_json(in.metadata.at("pretrain"));
  lm.step = in.metadata.value("step", int64_t{0});
  if (expect) {
    if (expect->d_model != lm.encoder_cfg.d_model)
      throw ConfigError("checkpoint: model width " + std::to_string(lm.encoder_cfg.d_model) +
                        " does not match requested " + std::to_string(expect->d_model));
    if (expect->depth != lm.encoder_cfg.depth || expect->expansion != lm.encoder_cfg.expansion)
      throw ConfigError("checkpoint: depth/expansion mismatch against the requested model");
  }

  Rng rng(0, "init");
  lm.params = init_model(lm.encoder_cfg, lm.pretrain_cfg.patch, rng);
  lm.params.spec_mean = in.metadata.at("spec_mean").get<float>();
  lm.params.spec_std = in.metadata.at("spec_std").get<float>();
  lm.params.visit([&in, &path](const std::string& name, Tensor& t) {
    auto it = in.tensors.find(name);
    if (it == in.tensors.end()) throw IoError("checkpoint: missing tensor '" + name + "' in " + path);
    if (it->second.shape() != t.shape())
      throw IoError("checkpoint: tensor '" + name + "' has shape " +
                    num::shape_str(it->second.shape()) + ", expected " + num::shape_str(t.shape()));
    t = it->second;
  });
  return lm;
}

}  // namespace axlstm::train
