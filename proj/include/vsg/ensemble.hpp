#pragma once

#include "vsg/volio.hpp"

#include <json.hpp>

#include <map>
#include <span>
#include <string>

namespace vsg {

// One subject's predictions from several models. Maps are keyed by model name,
// which also fixes the iteration order, so results never depend on the order
// models were listed in.
struct EnsembleInput {
  std::string subject_id;
  std::map<std::string, LabelMap> predictions;
  // Optional per-class probability volumes (channels = kClassCount).
  std::map<std::string, Volume> probabilities;
  // Missing entries weigh 1.
  std::map<std::string, int> weights;

  int weight_of(const std::string& model) const;
  // Throws ValidationError on fewer than `min_models` models, differing shapes,
  // weights < 1, weights for unknown models or invalid labels.
  void validate(std::size_t min_models = 2) const;
};

enum class FusionStrategy { Mode, Average, Median, Threshold };
FusionStrategy parse_strategy(const std::string& s);
std::string to_string(FusionStrategy s);

// Rank used to break ties between labels: the label inside more nested
// regions wins (4 > 1 > 2 > 0).
int label_priority(std::uint8_t label);

// Weighted plurality vote; ties go to the label with the higher label_priority.
LabelMap fuse_mode(const EnsembleInput& input);
// Weighted mean of probability volumes then argmax (first maximum); without
// probabilities, weighted mean of one-hot labels (the same result as fuse_mode).
LabelMap fuse_average(const EnsembleInput& input);
// Weighted lower median over the label order 0 < 1 < 2 < 4.
LabelMap fuse_median(const EnsembleInput& input);

enum class VolumeUnit { Voxels, CubicMillimetres };

// What the rule's "TC volume" counts: voxels labelled 1 (necrotic core) or the
// whole tumour-core region {1, 4}. ET lies inside the core region, so with
// CoreRegion the rule can only fire when the two volumes come from different maps.
enum class TcSource { NecroticLabel, CoreRegion };

struct ThresholdRule {
  double tc_volume_max = 60.0;
  double et_volume_min = 60.0;
  std::string select_model = "E1D3";
  std::string fallback_model = "UNet+T";
  // Model whose prediction is measured; empty means fallback_model.
  std::string measure_model;
  VolumeUnit unit = VolumeUnit::Voxels;
  TcSource tc_source = TcSource::NecroticLabel;

  void validate() const;
};

struct ThresholdDecision {
  std::string subject_id;
  std::string measured_model;
  double tc_volume = 0.0;
  double et_volume = 0.0;
  bool selected = false;  // true when select_model's map was returned
  std::string chosen_model;
};

// Subject-level switch: select_model's map when TC volume < tc_volume_max and
// ET volume > et_volume_min (both strict), otherwise fallback_model's map.
// Both volumes are measured on measure_model's prediction.
LabelMap fuse_threshold(const EnsembleInput& input, const ThresholdRule& rule, ThresholdDecision* decision = nullptr);

double region_volume(const LabelMap& m, const Region& r, VolumeUnit unit);

struct OracleChoice {
  std::string model;
  LabelMap prediction;
  double mean_dice = 0.0;
};

// Per subject, the model with the highest mean ET/TC/WT Dice against the
// ground truth; ties go to the first model name.
std::map<std::string, OracleChoice> oracle_select(std::span<const EnsembleInput> inputs,
                                                  const std::map<std::string, LabelMap>& ground_truth);

void to_json(nlohmann::json& j, const ThresholdDecision& d);
void to_json(nlohmann::json& j, const ThresholdRule& r);
void from_json(const nlohmann::json& j, ThresholdRule& r);

}  // namespace vsg
