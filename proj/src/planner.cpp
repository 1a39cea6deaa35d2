#include "vsg/planner.hpp"

#include "vsg/error.hpp"

#include <algorithm>
#include <bit>

namespace vsg {

namespace {

template <typename V>
V median_of(std::vector<V> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return static_cast<V>((v[n / 2 - 1] + v[n / 2]) / 2);
}

std::int64_t floor_pow2(std::int64_t v) { return static_cast<std::int64_t>(std::bit_floor(static_cast<std::uint64_t>(v))); }

}  // namespace

void DatasetFingerprint::validate() const {
  for (auto d : median_shape)
    if (d < 1) throw ValidationError("fingerprint median_shape must be positive");
  for (auto s : median_spacing)
    if (!(s > 0.0)) throw ValidationError("fingerprint median_spacing must be positive");
  if (channels < 1) throw ValidationError("fingerprint channels must be positive");
  if (class_count < 2) throw ValidationError("fingerprint class_count must be at least 2");
  if (subject_count < 1) throw ValidationError("fingerprint subject_count must be positive");
}

DatasetFingerprint fingerprint_dataset(std::span<const SubjectGeometry> subjects) {
  if (subjects.empty()) throw UsageError("cannot fingerprint an empty dataset");
  const auto channels = subjects.front().channels;
  std::array<std::vector<std::int64_t>, 3> extents;
  std::array<std::vector<double>, 3> spacings;
  for (const auto& s : subjects) {
    if (s.channels != channels)
      throw ValidationError("inconsistent channel counts in dataset (" + std::to_string(channels) + " vs " +
                            std::to_string(s.channels) + ")");
    for (int a = 0; a < 3; ++a) {
      extents[a].push_back(s.dims[a]);
      spacings[a].push_back(s.spacing[a]);
    }
  }
  DatasetFingerprint fp;
  for (int a = 0; a < 3; ++a) {
    fp.median_shape[a] = median_of(extents[a]);
    fp.median_spacing[a] = median_of(spacings[a]);
  }
  fp.channels = static_cast<int>(channels);
  fp.class_count = kClassCount;
  fp.subject_count = static_cast<int>(subjects.size());
  return fp;
}

DatasetFingerprint fingerprint_dataset(std::span<const std::pair<Volume, LabelMap>> subjects) {
  std::vector<SubjectGeometry> geo;
  geo.reserve(subjects.size());
  for (const auto& [v, m] : subjects) {
    if (v.dims != m.dims) throw ValidationError("volume and label map dims differ");
    geo.push_back({v.dims, v.spacing, v.channels});
  }
  return fingerprint_dataset(std::span<const SubjectGeometry>(geo));
}

// ---------------------------------------------------------------------------

int NetworkPlan::channels_at(int level) const {
  std::int64_t c = base_channels;
  for (int i = 0; i < level && c < max_channels; ++i) c *= 2;
  return static_cast<int>(std::min<std::int64_t>(c, max_channels));
}

Int3 NetworkPlan::extent_at(int level) const {
  Int3 e = patch_size;
  for (int l = 1; l <= level; ++l)
    for (int a = 0; a < 3; ++a) e[a] /= strides_per_stage[static_cast<std::size_t>(l)][a];
  return e;
}

Int3 NetworkPlan::cumulative_stride() const {
  Int3 s{1, 1, 1};
  for (const auto& st : strides_per_stage)
    for (int a = 0; a < 3; ++a) s[a] *= st[a];
  return s;
}

std::int64_t NetworkPlan::bottleneck_tokens() const {
  const Int3 e = extent_at(stage_count);
  return e[0] * e[1] * e[2];
}

void NetworkPlan::validate() const {
  if (stage_count < 2) throw ConfigError("plan needs at least 2 stages");
  const auto levels = static_cast<std::size_t>(stage_count) + 1;
  if (strides_per_stage.size() != levels || kernels_per_stage.size() != levels)
    throw ConfigError("plan stride/kernel lists must have stage_count + 1 entries");
  if (strides_per_stage[0] != Int3{1, 1, 1}) throw ConfigError("full-resolution level must have unit stride");
  for (std::size_t l = 0; l < levels; ++l)
    for (int a = 0; a < 3; ++a) {
      if (strides_per_stage[l][a] < 1) throw ConfigError("strides must be >= 1");
      const auto k = kernels_per_stage[l][a];
      if (k < 1 || k % 2 == 0) throw ConfigError("kernel sizes must be odd and positive");
    }
  const Int3 cs = cumulative_stride();
  for (int a = 0; a < 3; ++a) {
    if (patch_size[a] < 1) throw ConfigError("patch size must be positive");
    if (patch_size[a] % cs[a] != 0) throw ConfigError("patch size is not divisible by the cumulative stride");
  }
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (base_channels < 1 || max_channels < base_channels) throw ConfigError("invalid channel settings");
  if (deep_supervision_levels < 0 || deep_supervision_levels >= stage_count)
    throw ConfigError("deep_supervision_levels must be < stage_count");
  if (transformer.num_layers < 0) throw ConfigError("num_layers must be >= 0");
  if (transformer.num_layers > 0) {
    if (transformer.num_heads < 1 || transformer.embed_dim % transformer.num_heads != 0)
      throw ConfigError("embed_dim must be divisible by num_heads");
    if (transformer.embed_dim != channels_at(stage_count))
      throw ConfigError("transformer embed_dim must equal the bottleneck channel count");
    if (!(transformer.mlp_ratio > 0.0)) throw ConfigError("mlp_ratio must be positive");
  }
}

int default_supervision_levels(int stage_count) {
  return stage_count >= 4 ? stage_count - 2 : stage_count - 1;
}

NetworkPlan make_plan(const DatasetFingerprint& fp, std::int64_t memory_budget_voxels, const PlannerOptions& options) {
  fp.validate();
  const std::int64_t channels = fp.channels;
  if (memory_budget_voxels < 32LL * 32 * 32 * channels)
    throw PlanningError("memory budget must be at least 32^3 * channels voxels");
  if (options.num_heads < 1 || options.num_layers < 0 || options.base_channels < 1 ||
      options.max_channels < options.base_channels)
    throw PlanningError("invalid planner options");

  Int3 patch{};
  for (int a = 0; a < 3; ++a) {
    if (fp.median_shape[a] < 4) throw PlanningError("median extent below 4 voxels cannot be planned");
    patch[a] = floor_pow2(fp.median_shape[a]);
  }
  auto halve_largest = [&patch] {
    auto it = std::max_element(patch.begin(), patch.end());
    if (*it <= 4) throw PlanningError("cannot shrink the patch further");
    *it /= 2;
  };
  while (patch[0] * patch[1] * patch[2] * channels > memory_budget_voxels) halve_largest();

  NetworkPlan plan;
  for (;;) {
    std::vector<Int3> strides{{1, 1, 1}};
    Int3 e = patch;
    auto add_stage = [&](std::int64_t threshold) {
      Int3 s{1, 1, 1};
      for (int a = 0; a < 3; ++a)
        if (e[a] >= threshold) {
          s[a] = 2;
          e[a] /= 2;
        }
      strides.push_back(s);
    };
    while (static_cast<int>(strides.size()) - 1 < kMaxStages && std::any_of(e.begin(), e.end(), [](auto v) { return v > 4; }))
      add_stage(5);
    while (static_cast<int>(strides.size()) - 1 < 2) add_stage(4);
    if (e[0] * e[1] * e[2] > kMaxBottleneckTokens) {
      halve_largest();
      continue;
    }
    plan.strides_per_stage = std::move(strides);
    break;
  }

  plan.patch_size = patch;
  plan.stage_count = static_cast<int>(plan.strides_per_stage.size()) - 1;
  plan.target_spacing = fp.median_spacing;
  Int3 kernel{};
  for (int a = 0; a < 3; ++a) kernel[a] = patch[a] < 8 ? 1 : 3;
  plan.kernels_per_stage.assign(static_cast<std::size_t>(plan.stage_count) + 1, kernel);
  plan.base_channels = options.base_channels;
  plan.max_channels = options.max_channels;
  plan.batch_size =
      static_cast<int>(std::max<std::int64_t>(2, memory_budget_voxels / (patch[0] * patch[1] * patch[2] * channels)));
  plan.transformer.num_heads = options.num_heads;
  plan.transformer.num_layers = options.num_layers;
  plan.transformer.mlp_ratio = options.mlp_ratio;
  plan.transformer.positional_encoding = options.positional_encoding;
  plan.transformer.embed_dim = plan.channels_at(plan.stage_count);
  plan.residual_connection = options.residual_connection;
  plan.deep_supervision_levels = default_supervision_levels(plan.stage_count);
  if (plan.transformer.num_layers > 0 && plan.transformer.embed_dim % plan.transformer.num_heads != 0)
    throw PlanningError("bottleneck channels " + std::to_string(plan.transformer.embed_dim) +
                        " not divisible by num_heads " + std::to_string(plan.transformer.num_heads));
  plan.validate();
  return plan;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const DatasetFingerprint& fp) {
  j = nlohmann::json{{"median_shape", fp.median_shape},
                     {"median_spacing", fp.median_spacing},
                     {"channels", fp.channels},
                     {"class_count", fp.class_count},
                     {"subject_count", fp.subject_count}};
}

void from_json(const nlohmann::json& j, DatasetFingerprint& fp) {
  j.at("median_shape").get_to(fp.median_shape);
  j.at("median_spacing").get_to(fp.median_spacing);
  j.at("channels").get_to(fp.channels);
  j.at("class_count").get_to(fp.class_count);
  j.at("subject_count").get_to(fp.subject_count);
  fp.validate();
}

void to_json(nlohmann::json& j, const TransformerConfig& c) {
  j = nlohmann::json{{"num_heads", c.num_heads},
                     {"num_layers", c.num_layers},
                     {"embed_dim", c.embed_dim},
                     {"mlp_ratio", c.mlp_ratio},
                     {"positional_encoding", c.positional_encoding == PositionalEncoding::Learned ? "learned" : "none"}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c) {
  j.at("num_heads").get_to(c.num_heads);
  j.at("num_layers").get_to(c.num_layers);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  const auto pe = j.at("positional_encoding").get<std::string>();
  if (pe == "learned")
    c.positional_encoding = PositionalEncoding::Learned;
  else if (pe == "none")
    c.positional_encoding = PositionalEncoding::None;
  else
    throw ValidationError("unknown positional_encoding '" + pe + "'");
}

void to_json(nlohmann::json& j, const NetworkPlan& p) {
  j = nlohmann::json{{"target_spacing", p.target_spacing},
                     {"patch_size", p.patch_size},
                     {"batch_size", p.batch_size},
                     {"stage_count", p.stage_count},
                     {"strides_per_stage", p.strides_per_stage},
                     {"kernels_per_stage", p.kernels_per_stage},
                     {"base_channels", p.base_channels},
                     {"max_channels", p.max_channels},
                     {"transformer", p.transformer},
                     {"residual_connection", p.residual_connection},
                     {"deep_supervision_levels", p.deep_supervision_levels}};
}

void from_json(const nlohmann::json& j, NetworkPlan& p) {
  j.at("target_spacing").get_to(p.target_spacing);
  j.at("patch_size").get_to(p.patch_size);
  j.at("batch_size").get_to(p.batch_size);
  j.at("stage_count").get_to(p.stage_count);
  j.at("strides_per_stage").get_to(p.strides_per_stage);
  j.at("kernels_per_stage").get_to(p.kernels_per_stage);
  j.at("base_channels").get_to(p.base_channels);
  j.at("max_channels").get_to(p.max_channels);
  j.at("transformer").get_to(p.transformer);
  j.at("residual_connection").get_to(p.residual_connection);
  j.at("deep_supervision_levels").get_to(p.deep_supervision_levels);
  p.validate();
}

}  // namespace vsg
