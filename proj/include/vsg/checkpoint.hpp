#pragma once

#include "vsg/tensor.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace vsg {

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

// One tensor of a VSGW checkpoint. Payload is always f32 on disk.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

// "VSGW", u32 count, then per tensor: u16 name length, name, u32 ndims,
// u64 dims[ndims], f32 payload. All little-endian.
std::string encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(const std::string& bytes, const std::string& what = "checkpoint");

void write_checkpoint(const std::vector<CheckpointEntry>& entries, const std::filesystem::path& path);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

template <typename T>
std::vector<CheckpointEntry> to_checkpoint(const NamedTensors<T>& params);

// Copies checkpoint values into `params`, matching by name. Throws
// ValidationError on missing names or shape mismatches.
template <typename T>
void load_checkpoint(const std::vector<CheckpointEntry>& entries, NamedTensors<T>& params);

}  // namespace vsg
