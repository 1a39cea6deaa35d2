#include "vsg/ensemble.hpp"

#include "vsg/error.hpp"
#include "vsg/metrics.hpp"

#include <algorithm>
#include <array>

namespace vsg {

int EnsembleInput::weight_of(const std::string& model) const {
  auto it = weights.find(model);
  return it == weights.end() ? 1 : it->second;
}

void EnsembleInput::validate(std::size_t min_models) const {
  if (predictions.size() < min_models)
    throw ValidationError("subject '" + subject_id + "': need at least " + std::to_string(min_models) + " models");
  const Dims3 dims = predictions.begin()->second.dims;
  for (const auto& [name, m] : predictions) {
    if (m.dims != dims) throw ValidationError("subject '" + subject_id + "': prediction shapes differ");
    m.validate();
  }
  for (const auto& [name, w] : weights) {
    if (!predictions.count(name)) throw ValidationError("weight given for unknown model '" + name + "'");
    if (w < 1) throw ValidationError("model weights must be >= 1");
  }
  for (const auto& [name, p] : probabilities) {
    if (!predictions.count(name)) throw ValidationError("probabilities given for unknown model '" + name + "'");
    if (p.dims != dims || p.channels != kClassCount)
      throw ValidationError("probability volume for '" + name + "' has the wrong shape");
  }
}

FusionStrategy parse_strategy(const std::string& s) {
  if (s == "mode") return FusionStrategy::Mode;
  if (s == "average" || s == "mean") return FusionStrategy::Average;
  if (s == "median") return FusionStrategy::Median;
  if (s == "threshold") return FusionStrategy::Threshold;
  throw UsageError("unknown fusion strategy '" + s + "'");
}

std::string to_string(FusionStrategy s) {
  switch (s) {
    case FusionStrategy::Mode: return "mode";
    case FusionStrategy::Average: return "average";
    case FusionStrategy::Median: return "median";
    case FusionStrategy::Threshold: return "threshold";
  }
  return "?";
}

int label_priority(std::uint8_t label) {
  switch (label) {
    case kEnhancing: return 3;
    case kNecrotic: return 2;
    case kEdema: return 1;
    default: return 0;
  }
}

namespace {

LabelMap blank_like(const EnsembleInput& input) {
  const LabelMap& first = input.predictions.begin()->second;
  return LabelMap(first.dims, first.spacing);
}

// Label with the highest score, ties by label_priority.
template <typename S>
std::uint8_t pick_label(const std::array<S, kClassCount>& score) {
  int best = 0;
  for (int c = 1; c < kClassCount; ++c)
    if (score[c] > score[best] || (score[c] == score[best] && label_priority(kLabelSet[c]) > label_priority(kLabelSet[best])))
      best = c;
  return kLabelSet[static_cast<std::size_t>(best)];
}

}  // namespace

LabelMap fuse_mode(const EnsembleInput& input) {
  input.validate();
  LabelMap out = blank_like(input);
  for (std::size_t v = 0; v < out.data.size(); ++v) {
    std::array<std::int64_t, kClassCount> votes{};
    for (const auto& [name, m] : input.predictions) votes[label_to_class(m.data[v])] += input.weight_of(name);
    out.data[v] = pick_label(votes);
  }
  return out;
}

LabelMap fuse_average(const EnsembleInput& input) {
  input.validate();
  if (input.probabilities.empty()) return fuse_mode(input);
  if (input.probabilities.size() != input.predictions.size())
    throw ValidationError("subject '" + input.subject_id + "': probabilities supplied for only some models");
  LabelMap out = blank_like(input);
  double total = 0.0;
  for (const auto& [name, m] : input.predictions) total += input.weight_of(name);
  const auto n = static_cast<std::int64_t>(out.data.size());
  for (std::int64_t v = 0; v < n; ++v) {
    std::array<double, kClassCount> mean{};
    for (const auto& [name, p] : input.probabilities) {
      const double w = input.weight_of(name) / total;
      for (int c = 0; c < kClassCount; ++c) mean[c] += w * p.data[c * n + v];
    }
    int best = 0;
    for (int c = 1; c < kClassCount; ++c)
      if (mean[c] > mean[best]) best = c;
    out.data[static_cast<std::size_t>(v)] = class_to_label(best);
  }
  return out;
}

LabelMap fuse_median(const EnsembleInput& input) {
  input.validate();
  LabelMap out = blank_like(input);
  std::int64_t total = 0;
  for (const auto& [name, m] : input.predictions) total += input.weight_of(name);
  const std::int64_t target = (total - 1) / 2;  // 0-based rank of the lower median
  for (std::size_t v = 0; v < out.data.size(); ++v) {
    std::array<std::int64_t, kClassCount> count{};
    for (const auto& [name, m] : input.predictions) count[label_to_class(m.data[v])] += input.weight_of(name);
    std::int64_t seen = 0;
    for (int c = 0; c < kClassCount; ++c) {
      seen += count[c];
      if (seen > target) {
        out.data[v] = class_to_label(c);
        break;
      }
    }
  }
  return out;
}

void ThresholdRule::validate() const {
  if (!(tc_volume_max >= 0.0) || !(et_volume_min >= 0.0)) throw ValidationError("thresholds must be >= 0");
  if (select_model.empty() || fallback_model.empty()) throw ValidationError("threshold rule needs both model names");
}

double region_volume(const LabelMap& m, const Region& r, VolumeUnit unit) {
  const auto n = static_cast<double>(extract_region(m, r).count());
  if (unit == VolumeUnit::Voxels) return n;
  return n * static_cast<double>(m.spacing[0]) * static_cast<double>(m.spacing[1]) * static_cast<double>(m.spacing[2]);
}

LabelMap fuse_threshold(const EnsembleInput& input, const ThresholdRule& rule, ThresholdDecision* decision) {
  rule.validate();
  input.validate(1);
  const std::string measure = rule.measure_model.empty() ? rule.fallback_model : rule.measure_model;
  for (const auto* name : {&rule.select_model, &rule.fallback_model, &measure})
    if (!input.predictions.count(*name))
      throw ValidationError("subject '" + input.subject_id + "': model '" + *name + "' missing");
  const LabelMap& measured = input.predictions.at(measure);
  ThresholdDecision d;
  d.subject_id = input.subject_id;
  d.measured_model = measure;
  const Region tc = rule.tc_source == TcSource::CoreRegion ? Region::tc() : Region{RegionName::TC, {kNecrotic}};
  d.tc_volume = region_volume(measured, tc, rule.unit);
  d.et_volume = region_volume(measured, Region::et(), rule.unit);
  d.selected = d.tc_volume < rule.tc_volume_max && d.et_volume > rule.et_volume_min;
  d.chosen_model = d.selected ? rule.select_model : rule.fallback_model;
  if (decision) *decision = d;
  return input.predictions.at(d.chosen_model);
}

std::map<std::string, OracleChoice> oracle_select(std::span<const EnsembleInput> inputs,
                                                  const std::map<std::string, LabelMap>& ground_truth) {
  std::map<std::string, OracleChoice> out;
  for (const auto& in : inputs) {
    in.validate(1);
    auto gt = ground_truth.find(in.subject_id);
    if (gt == ground_truth.end()) throw UsageError("no ground truth for subject '" + in.subject_id + "'");
    if (gt->second.dims != in.predictions.begin()->second.dims)
      throw ValidationError("subject '" + in.subject_id + "': ground truth shape differs from predictions");
    std::array<Mask, 3> truth;
    for (std::size_t r = 0; r < 3; ++r) truth[r] = extract_region(gt->second, Region::all()[r]);
    bool found = false;
    OracleChoice current;
    for (const auto& [name, m] : in.predictions) {
      double mean = 0.0;
      for (std::size_t r = 0; r < 3; ++r) mean += dice(extract_region(m, Region::all()[r]), truth[r]) / 3.0;
      if (!found || mean > current.mean_dice) {
        current = {name, m, mean};
        found = true;
      }
    }
    out[in.subject_id] = std::move(current);
  }
  return out;
}

void to_json(nlohmann::json& j, const ThresholdDecision& d) {
  j = nlohmann::json{{"subject_id", d.subject_id}, {"measured_model", d.measured_model}, {"tc_volume", d.tc_volume},
                     {"et_volume", d.et_volume},   {"selected", d.selected},             {"chosen_model", d.chosen_model}};
}

void to_json(nlohmann::json& j, const ThresholdRule& r) {
  j = nlohmann::json{{"tc_volume_max", r.tc_volume_max},
                     {"et_volume_min", r.et_volume_min},
                     {"select_model", r.select_model},
                     {"fallback_model", r.fallback_model},
                     {"measure_model", r.measure_model},
                     {"unit", r.unit == VolumeUnit::Voxels ? "voxels" : "mm3"},
                     {"tc_source", r.tc_source == TcSource::NecroticLabel ? "label1" : "region"}};
}

void from_json(const nlohmann::json& j, ThresholdRule& r) {
  r.tc_volume_max = j.value("tc_volume_max", r.tc_volume_max);
  r.et_volume_min = j.value("et_volume_min", r.et_volume_min);
  r.select_model = j.value("select_model", r.select_model);
  r.fallback_model = j.value("fallback_model", r.fallback_model);
  r.measure_model = j.value("measure_model", r.measure_model);
  const auto unit = j.value("unit", std::string("voxels"));
  if (unit == "voxels")
    r.unit = VolumeUnit::Voxels;
  else if (unit == "mm3")
    r.unit = VolumeUnit::CubicMillimetres;
  else
    throw ValidationError("unknown volume unit '" + unit + "'");
  const auto tc = j.value("tc_source", std::string("label1"));
  if (tc == "label1")
    r.tc_source = TcSource::NecroticLabel;
  else if (tc == "region")
    r.tc_source = TcSource::CoreRegion;
  else
    throw ValidationError("unknown tc_source '" + tc + "'");
  r.validate();
}

}  // namespace vsg
