#pragma once

#include "vsg/tensor.hpp"
#include "vsg/volio.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace vsg {

struct DatasetFingerprint {
  Dims3 median_shape{0, 0, 0};
  std::array<double, 3> median_spacing{1.0, 1.0, 1.0};
  int channels = 0;
  int class_count = kClassCount;
  int subject_count = 0;

  void validate() const;
  bool operator==(const DatasetFingerprint&) const = default;
};

// Geometry of one subject; enough to fingerprint without holding voxel data.
struct SubjectGeometry {
  Dims3 dims;
  Spacing3 spacing;
  std::int64_t channels;
};

DatasetFingerprint fingerprint_dataset(std::span<const SubjectGeometry> subjects);
DatasetFingerprint fingerprint_dataset(std::span<const std::pair<Volume, LabelMap>> subjects);

enum class PositionalEncoding { None, Learned };

struct TransformerConfig {
  // Eight single-head layers instead: num_heads = 1, num_layers = 8.
  int num_heads = 8;
  // 0 disables the transformer (plain U-Net).
  int num_layers = 1;
  int embed_dim = 0;
  double mlp_ratio = 4.0;
  PositionalEncoding positional_encoding = PositionalEncoding::Learned;

  bool operator==(const TransformerConfig&) const = default;
};

// Encoder levels are 0..stage_count. Level 0 runs at full patch resolution
// with unit stride; each of the stage_count downsampling stages applies its
// stride in its first convolution. strides_per_stage and kernels_per_stage
// therefore hold stage_count + 1 entries, entry 0 being the full-resolution
// level. The deepest level is the bottleneck that hosts the transformer.
struct NetworkPlan {
  std::array<double, 3> target_spacing{1.0, 1.0, 1.0};
  Int3 patch_size{0, 0, 0};
  int batch_size = 2;
  int stage_count = 0;
  std::vector<Int3> strides_per_stage;
  std::vector<Int3> kernels_per_stage;
  int base_channels = 16;
  int max_channels = 256;
  TransformerConfig transformer;
  bool residual_connection = true;
  // Number of auxiliary (lower-resolution) segmentation outputs.
  int deep_supervision_levels = 0;

  int channels_at(int level) const;
  Int3 extent_at(int level) const;
  Int3 cumulative_stride() const;
  std::int64_t bottleneck_tokens() const;
  // Throws ConfigError when an invariant is violated.
  void validate() const;
  bool operator==(const NetworkPlan&) const = default;
};

// Number of auxiliary outputs for a given depth: all levels except the deepest,
// or except the two deepest once there are four or more downsampling stages.
int default_supervision_levels(int stage_count);

struct PlannerOptions {
  int base_channels = 16;
  int max_channels = 256;
  int num_heads = 8;
  int num_layers = 1;
  double mlp_ratio = 4.0;
  PositionalEncoding positional_encoding = PositionalEncoding::Learned;
  bool residual_connection = true;
};

inline constexpr std::int64_t kMaxBottleneckTokens = 512;
inline constexpr int kMaxStages = 6;

// Deterministic plan:
//   target spacing = median spacing
//   patch = per-axis largest power of two <= median shape, halving the largest
//           axis until patch voxels * channels <= budget
//   stride-2 stages on every axis still wider than 4, until all bottleneck
//           axes are <= 4 or there are 6 stages (at least 2 stages)
//   kernel 3 on every axis, 1 on axes whose patch extent is below 8
//   channels base * 2^level capped at max_channels
//   batch = max(2, budget / (patch voxels * channels))
// The patch shrinks further if the bottleneck would exceed 512 tokens.
NetworkPlan make_plan(const DatasetFingerprint& fp, std::int64_t memory_budget_voxels,
                      const PlannerOptions& options = {});

void to_json(nlohmann::json& j, const DatasetFingerprint& fp);
void from_json(const nlohmann::json& j, DatasetFingerprint& fp);
void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);
void to_json(nlohmann::json& j, const NetworkPlan& p);
void from_json(const nlohmann::json& j, NetworkPlan& p);

}  // namespace vsg
