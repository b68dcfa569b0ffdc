#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lmim/tensor.hpp"

namespace lmim {

// Binary container: "LMIM" magic, version, config digest and step in the
// header; ordered named tensors with explicit little-endian payloads in
// the body; FNV-1a 64 checksum of the body as trailer. Load of a saved
// file re-saves byte-identically.
struct CheckpointEntry {
  std::string name;
  Dtype dtype = Dtype::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;  // little-endian element bytes
};

struct Checkpoint {
  std::uint32_t version = 1;
  std::uint64_t config_digest = 0;
  std::uint64_t step = 0;
  std::vector<CheckpointEntry> entries;

  void add(const std::string& name, const Tensor<float>& t);
  void add(const std::string& name, const Tensor<double>& t);
  void add_i64(const std::string& name, const std::vector<std::int64_t>& v);
  void add_bytes(const std::string& name, const std::string& bytes);

  bool has(const std::string& name) const;
  const CheckpointEntry& entry(const std::string& name) const;
  Tensor<float> tensor_f32(const std::string& name) const;
  std::vector<std::int64_t> i64(const std::string& name) const;
  std::string bytes(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& file, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace lmim
