// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0

#include "axlstm/specfeat.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <mutex>

namespace axlstm::feat {

namespace {

template <class T>
T read_le(const std::vector<uint8_t>& buf, size_t off, const char* what) {
  if (off + sizeof(T) > buf.size())
    throw IoError(std::string("wav: truncated while reading ") + what + " at byte offset " +
                  std::to_string(off));
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  return v;
}

}  // namespace

Waveform load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("wav: cannot open " + path);
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0)
    throw IoError("wav: missing RIFF tag at byte offset 0 in " + path);
  if (std::memcmp(buf.data() + 8, "WAVE", 4) != 0)
    throw IoError("wav: missing WAVE tag at byte offset 8 in " + path);

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  size_t data_off = 0, data_len = 0;

  size_t off = 12;
  while (off + 8 <= buf.size()) {
    char id[5] = {};
    std::memcpy(id, buf.data() + off, 4);
    const uint32_t chunk = read_le<uint32_t>(buf, off + 4, "chunk size");
    const size_t body = off + 8;
    if (std::memcmp(id, "fmt ", 4) == 0) {
      format = read_le<uint16_t>(buf, body + 0, "format code");
      channels = read_le<uint16_t>(buf, body + 2, "channel count");
      rate = read_le<uint32_t>(buf, body + 4, "sample rate");
      bits = read_le<uint16_t>(buf, body + 14, "bits per sample");
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = body;
      data_len = chunk;
    }
    off = body + chunk + (chunk & 1);
  }
  if (!have_fmt) throw IoError("wav: no fmt chunk in " + path);
  if (data_off == 0) throw IoError("wav: no data chunk in " + path);
  if (channels == 0) throw IoError("wav: zero channels in " + path);
  if (data_off + data_len > buf.size())
    throw IoError("wav: data chunk exceeds file at byte offset " + std::to_string(data_off) +
                  " in " + path);

  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw IoError("wav: unsupported codec (format " + std::to_string(format) + ", " +
                  std::to_string(bits) + " bits) in " + path);

  const size_t bytes_per_sample = bits / 8;
  const size_t frame_bytes = bytes_per_sample * channels;
  const size_t n_frames = data_len / frame_bytes;
  std::vector<float> mono(n_frames);
  for (size_t i = 0; i < n_frames; ++i) {
    double acc = 0;
    for (size_t ch = 0; ch < channels; ++ch) {
      const size_t so = data_off + i * frame_bytes + ch * bytes_per_sample;
      if (pcm16) {
        int16_t s;
        std::memcpy(&s, buf.data() + so, 2);
        acc += static_cast<double>(s) / 32768.0;
      } else {
        float s;
        std::memcpy(&s, buf.data() + so, 4);
        acc += static_cast<double>(s);
      }
    }
    mono[i] = static_cast<float>(acc / channels);
  }

  Waveform w;
  w.sample_rate = 16000;
  w.samples = (rate == 16000) ? std::move(mono)
                              : resample_linear(mono, static_cast<int>(rate), 16000);
  return w;
}

void write_wav_pcm16(const std::string& path, std::span<const float> samples, int sample_rate) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("wav: cannot write " + path);
  auto put_u32 = [&](uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_u16 = [&](uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  const uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
  out.write("RIFF", 4);
  put_u32(36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);  // PCM
  put_u16(1);  // mono
  put_u32(static_cast<uint32_t>(sample_rate));
  put_u32(static_cast<uint32_t>(sample_rate) * 2);
  put_u16(2);
  put_u16(16);
  out.write("data", 4);
  put_u32(data_bytes);
  for (float s : samples) {
    const float clamped = std::clamp(s, -1.0f, 1.0f);
    const int16_t v = static_cast<int16_t>(std::lrint(clamped * 32767.0));
    out.write(reinterpret_cast<const char*>(&v), 2);
  }
}

std::vector<float> resample_linear(std::span<const float> x, int sr_from, int sr_to) {
  if (sr_from == sr_to) return {x.begin(), x.end()};
  if (x.empty()) return {};
  const double ratio = static_cast<double>(sr_from) / sr_to;
  const size_t out_len = static_cast<size_t>(std::ceil(x.size() * static_cast<double>(sr_to) / sr_from));
  std::vector<float> out(out_len);
  for (size_t i = 0; i < out_len; ++i) {
    const double pos = i * ratio;
    const size_t i0 = std::min(static_cast<size_t>(pos), x.size() - 1);
    const size_t i1 = std::min(i0 + 1, x.size() - 1);
    const double frac = pos - static_cast<double>(i0);
    out[i] = static_cast<float>((1.0 - frac) * x[i0] + frac * x[i1]);
  }
  return out;
}

std::vector<float> reflect_window(std::span<const float> x, int64_t start, int64_t len) {
  const int64_t n = static_cast<int64_t>(x.size());
  if (n == 0) throw Error("reflect_window: empty signal");
  std::vector<float> out(static_cast<size_t>(len));
  const int64_t period = n > 1 ? 2 * (n - 1) : 1;
  for (int64_t i = 0; i < len; ++i) {
    int64_t idx = start + i;
    // mirror without repeating edge samples, tiling as needed
    idx = ((idx % period) + period) % period;
    if (idx >= n) idx = period - idx;
    out[static_cast<size_t>(i)] = x[static_cast<size_t>(idx)];
  }
  return out;
}

std::vector<double> mel_filterbank(const LogmelConfig& cfg, int sample_rate) {
  const int n_bins = cfg.n_fft / 2 + 1;
  auto hz_to_mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
  auto mel_to_hz = [](double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); };
  const double mel_lo = hz_to_mel(cfg.fmin);
  const double mel_hi = hz_to_mel(cfg.fmax);
  std::vector<double> edges(static_cast<size_t>(cfg.n_mels) + 2);
  for (size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                      static_cast<double>(cfg.n_mels + 1));
  std::vector<double> weights(static_cast<size_t>(cfg.n_mels) * n_bins, 0.0);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double lo = edges[static_cast<size_t>(m)];
    const double mid = edges[static_cast<size_t>(m) + 1];
    const double hi = edges[static_cast<size_t>(m) + 2];
    for (int k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / cfg.n_fft;
      double w = 0.0;
      if (f > lo && f < mid)
        w = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        w = (hi - f) / (hi - mid);
      weights[static_cast<size_t>(m) * n_bins + k] = w;
    }
  }
  return weights;
}

Spectrogram logmel(std::span<const float> wave, int sample_rate, const LogmelConfig& cfg) {
  if (wave.empty()) throw Error("logmel: empty waveform");
  if (sample_rate != 16000)
    throw Error("logmel: expected 16000 Hz input, got " + std::to_string(sample_rate) +
                "; resample first");

  const int64_t len = static_cast<int64_t>(wave.size());
  const int64_t frames = (len + cfg.hop - 1) / cfg.hop;
  const int n_bins = cfg.n_fft / 2 + 1;
  const std::vector<double> fb = mel_filterbank(cfg, sample_rate);

  std::vector<double> window(static_cast<size_t>(cfg.win));
  for (int i = 0; i < cfg.win; ++i)
    window[static_cast<size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / cfg.win);

  // FFTW plan creation is not thread-safe; execution on private buffers is.
  static std::mutex plan_mutex;
  double* in = fftw_alloc_real(static_cast<size_t>(cfg.n_fft));
  fftw_complex* out = fftw_alloc_complex(static_cast<size_t>(n_bins));
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(plan_mutex);
    plan = fftw_plan_dft_r2c_1d(cfg.n_fft, in, out, FFTW_ESTIMATE);
  }

  Spectrogram spec;
  spec.frames = frames;
  spec.bins = cfg.n_mels;
  spec.values.resize(static_cast<size_t>(frames * cfg.n_mels));

  std::vector<double> power(static_cast<size_t>(n_bins));
  for (int64_t t = 0; t < frames; ++t) {
    // centered frame: covers wave[t*hop - win/2, t*hop + win/2)
    std::vector<float> frame = reflect_window(wave, t * cfg.hop - cfg.win / 2, cfg.win);
    for (int i = 0; i < cfg.win; ++i) in[i] = frame[static_cast<size_t>(i)] * window[static_cast<size_t>(i)];
    for (int i = cfg.win; i < cfg.n_fft; ++i) in[i] = 0.0;
    fftw_execute(plan);
    for (int k = 0; k < n_bins; ++k)
      power[static_cast<size_t>(k)] = out[k][0] * out[k][0] + out[k][1] * out[k][1];
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* wrow = fb.data() + static_cast<size_t>(m) * n_bins;
      double acc = 0.0;
      for (int k = 0; k < n_bins; ++k) acc += wrow[k] * power[static_cast<size_t>(k)];
      spec.values[static_cast<size_t>(t * cfg.n_mels + m)] =
          static_cast<float>(std::log(acc + cfg.log_floor));
    }
  }

  {
    std::lock_guard<std::mutex> lock(plan_mutex);
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(out);
  return spec;
}

Tensor patchify(const Spectrogram& spec, const PatchConfig& cfg) {
  if (cfg.t <= 0 || cfg.f <= 0) throw ConfigError("patchify: patch dims must be positive");
  if (spec.frames % cfg.t != 0 || spec.bins % cfg.f != 0)
    throw ShapeError("patchify: spectrogram " + std::to_string(spec.frames) + "x" +
                     std::to_string(spec.bins) + " not divisible by patch " +
                     std::to_string(cfg.t) + "x" + std::to_string(cfg.f) + "; crop to " +
                     std::to_string(spec.frames - spec.frames % cfg.t) + "x" +
                     std::to_string(spec.bins - spec.bins % cfg.f) + " first");
  const int64_t grid_h = spec.frames / cfg.t;
  const int64_t grid_w = spec.bins / cfg.f;
  const int64_t n = grid_h * grid_w;
  const int64_t patch_dim = static_cast<int64_t>(cfg.t) * cfg.f;
  std::vector<float> out(static_cast<size_t>(n * patch_dim));
  for (int64_t gh = 0; gh < grid_h; ++gh)
    for (int64_t gw = 0; gw < grid_w; ++gw) {
      float* row = out.data() + (gh * grid_w + gw) * patch_dim;
      for (int dt = 0; dt < cfg.t; ++dt)
        for (int df = 0; df < cfg.f; ++df)
          row[dt * cfg.f + df] = spec.at(gh * cfg.t + dt, gw * cfg.f + df);
    }
  return Tensor::from_vector({n, patch_dim}, std::move(out));
}

Spectrogram unpatchify(const Tensor& patches, const PatchConfig& cfg, int64_t grid_h,
                       int64_t grid_w) {
  const int64_t patch_dim = static_cast<int64_t>(cfg.t) * cfg.f;
  if (patches.rank() != 2 || patches.dim(1) != patch_dim)
    throw ShapeError("unpatchify: patches " + num::shape_str(patches.shape()) +
                     " do not match patch dim " + std::to_string(patch_dim));
  if (patches.dim(0) != grid_h * grid_w)
    throw ShapeError("unpatchify: " + std::to_string(patches.dim(0)) + " patches cannot fill a " +
                     std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
  Spectrogram spec;
  spec.frames = grid_h * cfg.t;
  spec.bins = grid_w * cfg.f;
  spec.values.resize(static_cast<size_t>(spec.frames * spec.bins));
  for (int64_t gh = 0; gh < grid_h; ++gh)
    for (int64_t gw = 0; gw < grid_w; ++gw) {
      const float* row = patches.data().data() + (gh * grid_w + gw) * patch_dim;
      for (int dt = 0; dt < cfg.t; ++dt)
        for (int df = 0; df < cfg.f; ++df)
          spec.at(gh * cfg.t + dt, gw * cfg.f + df) = row[dt * cfg.f + df];
    }
  return spec;
}

Tensor posemb_2d(int64_t grid_h, int64_t grid_w, int64_t d_model) {
  if (d_model % 4 != 0)
    throw ConfigError("posemb_2d: d_model " + std::to_string(d_model) + " must be divisible by 4");
  const int64_t half = d_model / 2;
  const int64_t quarter = d_model / 4;
  std::vector<double> omega(static_cast<size_t>(quarter));
  for (int64_t j = 0; j < quarter; ++j)
    omega[static_cast<size_t>(j)] =
        1.0 / std::pow(10000.0, 2.0 * static_cast<double>(j) / static_cast<double>(half));
  std::vector<float> out(static_cast<size_t>(grid_h * grid_w * d_model));
  for (int64_t gh = 0; gh < grid_h; ++gh)
    for (int64_t gw = 0; gw < grid_w; ++gw) {
      float* row = out.data() + (gh * grid_w + gw) * d_model;
      for (int64_t j = 0; j < quarter; ++j) {
        const double wt = omega[static_cast<size_t>(j)];
        row[j] = static_cast<float>(std::sin(wt * static_cast<double>(gh)));
        row[quarter + j] = static_cast<float>(std::cos(wt * static_cast<double>(gh)));
        row[half + j] = static_cast<float>(std::sin(wt * static_cast<double>(gw)));
        row[half + quarter + j] = static_cast<float>(std::cos(wt * static_cast<double>(gw)));
      }
    }
  return Tensor::from_vector({grid_h * grid_w, d_model}, std::move(out));
}

Tensor posemb_with_cls(int64_t grid_h, int64_t grid_w, int64_t d_model) {
  Tensor grid = posemb_2d(grid_h, grid_w, d_model);
  return num::concat<float>({Tensor::zeros({1, d_model}), grid}, 0);
}

MaskPlan sample_mask(int64_t n, double ratio, Rng& rng) {
  if (n <= 0) throw Error("sample_mask: need at least one patch");
  if (!(ratio > 0.0 && ratio < 1.0))
    throw ConfigError("sample_mask: ratio must lie in (0,1), got " + std::to_string(ratio));
  const int64_t count = std::llround(ratio * static_cast<double>(n));
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t j = i + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n - i)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  MaskPlan plan;
  plan.total = n;
  plan.ratio = ratio;
  plan.masked.assign(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < count; ++i) plan.masked[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
  return plan;
}

void write_spectrogram(const std::string& path, const Spectrogram& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("spectrogram: cannot write " + path);
  const uint32_t t = static_cast<uint32_t>(spec.frames);
  const uint32_t f = static_cast<uint32_t>(spec.bins);
  out.write(reinterpret_cast<const char*>(&t), 4);
  out.write(reinterpret_cast<const char*>(&f), 4);
  out.write(reinterpret_cast<const char*>(spec.values.data()),
            static_cast<std::streamsize>(spec.values.size() * sizeof(float)));
}

Spectrogram read_spectrogram(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("spectrogram: cannot open " + path);
  uint32_t t = 0, f = 0;
  in.read(reinterpret_cast<char*>(&t), 4);
  in.read(reinterpret_cast<char*>(&f), 4);
  if (!in) throw IoError("spectrogram: truncated header in " + path);
  Spectrogram spec;
  spec.frames = t;
  spec.bins = f;
  spec.values.resize(static_cast<size_t>(t) * f);
  in.read(reinterpret_cast<char*>(spec.values.data()),
          static_cast<std::streamsize>(spec.values.size() * sizeof(float)));
  if (!in) throw IoError("spectrogram: truncated payload in " + path);
  return spec;
}

}  // namespace axlstm::feat
