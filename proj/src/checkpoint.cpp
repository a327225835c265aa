// Copyright 2026 the axlstm.cpp authors
// Licensed under the Apache License, Version 2.0

#include "axlstm/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace axlstm::ckpt {

namespace {
constexpr char kMagic[4] = {'A', 'X', 'L', 'S'};
constexpr uint64_t kAlign = 64;

uint64_t align_up(uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }
}  // namespace

void save(const std::string& path, const Checkpoint& ckpt) {
  // First lay out the payload so the metadata can carry final offsets.
  nlohmann::json dir = nlohmann::json::object();
  uint64_t payload_len = 0;
  for (const auto& [name, tensor] : ckpt.tensors) {
    const uint64_t off = align_up(payload_len);
    dir[name] = {{"dtype", "float32"},
                 {"shape", tensor.shape()},
                 {"offset", off}};
    payload_len = off + tensor.numel() * sizeof(float);
  }
  nlohmann::json meta = ckpt.metadata;
  meta["tensors"] = std::move(dir);
  const std::string meta_str = meta.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + path);
  out.write(kMagic, 4);
  const uint32_t version = kFormatVersion;
  out.write(reinterpret_cast<const char*>(&version), 4);
  const uint64_t meta_len = meta_str.size();
  out.write(reinterpret_cast<const char*>(&meta_len), 8);
  out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

  const uint64_t payload_base = align_up(16 + meta_str.size());
  uint64_t written = 16 + meta_str.size();
  auto pad_to = [&](uint64_t target) {
    static const char zeros[kAlign] = {};
    while (written < target) {
      const uint64_t n = std::min<uint64_t>(kAlign, target - written);
      out.write(zeros, static_cast<std::streamsize>(n));
      written += n;
    }
  };
  for (const auto& [name, tensor] : ckpt.tensors) {
    const uint64_t off = meta["tensors"][name]["offset"].get<uint64_t>();
    pad_to(payload_base + off);
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
    written += static_cast<uint64_t>(tensor.numel()) * sizeof(float);
  }
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 16) throw IoError("checkpoint: truncated header in " + path);
  if (std::memcmp(buf.data(), kMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  uint32_t version;
  std::memcpy(&version, buf.data() + 4, 4);
  if (version != kFormatVersion)
    throw IoError("checkpoint: format version " + std::to_string(version) + " unsupported (want " +
                  std::to_string(kFormatVersion) + ") in " + path);
  uint64_t meta_len;
  std::memcpy(&meta_len, buf.data() + 8, 8);
  if (16 + meta_len > buf.size()) throw IoError("checkpoint: truncated metadata in " + path);

  Checkpoint ckpt;
  try {
    ckpt.metadata = nlohmann::json::parse(buf.data() + 16, buf.data() + 16 + meta_len);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint: metadata is not valid JSON in " + path + ": " + e.what());
  }
  if (!ckpt.metadata.contains("tensors"))
    throw IoError("checkpoint: metadata lacks a tensor directory in " + path);

  const uint64_t payload_base = align_up(16 + meta_len);
  for (const auto& [name, entry] : ckpt.metadata["tensors"].items()) {
    if (ckpt.tensors.count(name))
      throw IoError("checkpoint: duplicate tensor name '" + name + "' in " + path);
    if (entry.at("dtype").get<std::string>() != "float32")
      throw IoError("checkpoint: tensor '" + name + "' has unsupported dtype in " + path);
    num::Shape shape = entry.at("shape").get<num::Shape>();
    const uint64_t off = entry.at("offset").get<uint64_t>();
    const uint64_t n = static_cast<uint64_t>(num::shape_numel(shape));
    const uint64_t end = payload_base + off + n * sizeof(float);
    if (end > buf.size())
      throw IoError("checkpoint: tensor '" + name + "' extends past end of file in " + path);
    std::vector<float> data(n);
    std::memcpy(data.data(), buf.data() + payload_base + off, n * sizeof(float));
    ckpt.tensors.emplace(name, num::Tensor::from_vector(std::move(shape), std::move(data)));
  }
  ckpt.metadata.erase("tensors");
  return ckpt;
}

}  // namespace axlstm::ckpt
