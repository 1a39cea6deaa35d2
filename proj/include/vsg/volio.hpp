#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace vsg {

using Dims3 = std::array<std::int64_t, 3>;
using Spacing3 = std::array<float, 3>;

inline std::int64_t voxel_count(const Dims3& d) { return d[0] * d[1] * d[2]; }

// x-fastest linear index into a (x, y, z) grid.
inline std::int64_t linear_index(const Dims3& d, std::int64_t x, std::int64_t y, std::int64_t z) {
  return x + d[0] * (y + d[1] * z);
}

// Multi-channel float grid. Storage is x-fastest, channel slowest, which is
// also the VSG1 payload order.
struct Volume {
  std::int64_t channels = 0;
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1.f, 1.f, 1.f};
  std::vector<std::string> channel_names;
  Eigen::ArrayXf data;

  Volume() = default;
  Volume(std::int64_t channels, Dims3 dims, Spacing3 spacing = {1.f, 1.f, 1.f});

  std::int64_t voxels() const { return voxel_count(dims); }
  float& at(std::int64_t c, std::int64_t x, std::int64_t y, std::int64_t z) {
    return data[c * voxels() + linear_index(dims, x, y, z)];
  }
  float at(std::int64_t c, std::int64_t x, std::int64_t y, std::int64_t z) const {
    return data[c * voxels() + linear_index(dims, x, y, z)];
  }
  auto channel(std::int64_t c) { return data.segment(c * voxels(), voxels()); }
  auto channel(std::int64_t c) const { return data.segment(c * voxels(), voxels()); }

  // Throws ValidationError on non-positive spacing, empty grid or non-finite data.
  void validate() const;
};

// Equality over geometry and payload bits; channel names are not stored on disk.
bool same_contents(const Volume& a, const Volume& b);

std::vector<std::string> default_channel_names(std::int64_t channels);

// Labels on disk follow the {0, 1, 2, 4} convention.
enum Label : std::uint8_t {
  kBackground = 0,
  kNecrotic = 1,
  kEdema = 2,
  kEnhancing = 4,
};

inline constexpr std::array<std::uint8_t, 4> kLabelSet{0, 1, 2, 4};
inline constexpr int kClassCount = 4;

bool is_valid_label(std::uint8_t v);
// {0,1,2,4} -> {0,1,2,3}; throws ValidationError otherwise.
int label_to_class(std::uint8_t label);
std::uint8_t class_to_label(int cls);

struct LabelMap {
  Dims3 dims{0, 0, 0};
  Spacing3 spacing{1.f, 1.f, 1.f};
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  explicit LabelMap(Dims3 dims, Spacing3 spacing = {1.f, 1.f, 1.f});

  std::int64_t voxels() const { return voxel_count(dims); }
  std::uint8_t& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[linear_index(dims, x, y, z)]; }
  std::uint8_t at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[linear_index(dims, x, y, z)]; }

  void validate() const;
  bool operator==(const LabelMap&) const = default;
};

// Binary 3D mask, one byte per voxel (0 or 1).
struct Mask {
  Dims3 dims{0, 0, 0};
  std::vector<std::uint8_t> data;

  Mask() = default;
  explicit Mask(Dims3 dims) : dims(dims), data(static_cast<std::size_t>(voxel_count(dims)), 0) {}

  std::int64_t voxels() const { return voxel_count(dims); }
  std::int64_t count() const;
  std::uint8_t& at(std::int64_t x, std::int64_t y, std::int64_t z) { return data[linear_index(dims, x, y, z)]; }
  std::uint8_t at(std::int64_t x, std::int64_t y, std::int64_t z) const { return data[linear_index(dims, x, y, z)]; }
  bool operator==(const Mask&) const = default;
};

enum class RegionName { ET, TC, WT };

struct Region {
  RegionName name;
  std::vector<std::uint8_t> member_labels;

  static Region et() { return {RegionName::ET, {kEnhancing}}; }
  static Region tc() { return {RegionName::TC, {kNecrotic, kEnhancing}}; }
  static Region wt() { return {RegionName::WT, {kNecrotic, kEdema, kEnhancing}}; }
  static const std::array<Region, 3>& all();

  bool contains(std::uint8_t label) const;
};

std::string to_string(RegionName r);

Mask extract_region(const LabelMap& m, const Region& r);

// Per channel z-score over nonzero voxels; zero voxels stay zero.
Volume standardize_intensity(const Volume& v);

struct PhantomSpec {
  Dims3 grid_size{32, 32, 32};
  std::array<float, 3> center{15.5f, 15.5f, 15.5f};
  // Outer (WT), middle (TC) and core (ET) radii in voxels.
  std::array<float, 3> radii{10.f, 6.f, 3.f};
  float noise_sigma = 0.1f;
  std::uint64_t seed = 0;
  Spacing3 spacing{1.f, 1.f, 1.f};
};

// Concentric shells: ED outside, necrotic core in the middle, ET at the center.
std::pair<Volume, LabelMap> generate_phantom(const PhantomSpec& spec);

// `count` phantom specs on one grid with seeded jitter of centre and radii.
std::vector<PhantomSpec> phantom_series(int count, Dims3 grid, std::uint64_t seed, float noise_sigma = 0.1f);

// VSG1 files.
void write_volume(const Volume& v, const std::filesystem::path& path);
Volume read_volume(const std::filesystem::path& path);
void write_label_map(const LabelMap& m, const std::filesystem::path& path);
LabelMap read_label_map(const std::filesystem::path& path);

// Size in bytes of the VSG1 header for a file with `ndims` dimensions.
constexpr std::size_t vsg1_header_size(std::size_t ndims) { return 4 + 4 + 8 * ndims + 12 + 1; }

// Writes `bytes` to a sibling temp file and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace vsg
