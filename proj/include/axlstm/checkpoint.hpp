// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0
//
// Named-tensor container, used for model checkpoints and feature dumps.
//
// Layout:
//   bytes 0..3    magic "AXLS"
//   bytes 4..7    format version (uint32 LE)
//   bytes 8..15   metadata length in bytes (uint64 LE)
//   ...           UTF-8 JSON metadata; its "tensors" object maps each name
//                 to {dtype, shape, offset}, offsets relative to the payload
//                 section which starts at the next 64-byte boundary
//   payload       raw little-endian float32 tensor data, each 64-byte aligned

#pragma once

#include <map>
#include <string>

#include <json.hpp>

#include "axlstm/tensor.hpp"

namespace axlstm::ckpt {

inline constexpr uint32_t kFormatVersion = 1;

struct Checkpoint {
  nlohmann::json metadata;  // config snapshot, step, loss digest, ...
  std::map<std::string, num::Tensor> tensors;
};

void save(const std::string& path, const Checkpoint& ckpt);
Checkpoint load(const std::string& path);

}  // namespace axlstm::ckpt
