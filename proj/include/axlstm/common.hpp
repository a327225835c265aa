// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace axlstm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape/dimension mismatches in tensor ops and model wiring.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration detected before any compute starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File format / serialization problems.
class IoError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (char c : s) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

/// Deterministic RNG keyed by (seed, stream-id). The same (seed, stream,
/// draw-count) always yields the same values, on every platform: no libstdc++
/// distributions are involved, only integer arithmetic and libm.
///
/// Streams keep independent purposes ("mask", "init", "data") from colliding,
/// and at(k) derives a child stream for parallel per-item determinism.
class Rng {
 public:
  Rng(uint64_t seed, std::string_view stream) : base_(seed ^ detail::fnv1a64(stream)) {
    uint64_t mix = base_;
    for (auto& word : state_) word = detail::splitmix64(mix);
  }

  /// Child stream k of this stream, keyed by the stream identity rather than
  /// its current state, so children are independent of parent draw counts.
  Rng at(uint64_t k) const {
    Rng child = *this;
    child.base_ = base_ ^ (0x632be59bd9b4e019ull * (k + 1));
    uint64_t mix = child.base_;
    for (auto& word : child.state_) word = detail::splitmix64(mix);
    return child;
  }

  // xoshiro256**
  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    uint64_t result = rotl(state_[1] * 5, 7) * 9;
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw Error("Rng::uniform_int: n must be positive");
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  /// Standard normal via Box-Muller. Two uniform draws per call, no cache,
  /// so draw counts stay easy to reason about.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  uint64_t base_ = 0;
  uint64_t state_[4] = {};
};

}  // namespace axlstm
