#pragma once

#include "vsg/network.hpp"
#include "vsg/tensor.hpp"
#include "vsg/volio.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace vsg {

struct LossReport {
  double total = 0.0;
  double dice_component = 0.0;
  double ce_component = 0.0;
  // Soft Dice per foreground class (classes 1..K-1).
  std::vector<double> per_class_dice;
};

inline constexpr double kDiceEps = 1e-5;

// Contiguous class indices laid out like a [N, X, Y, Z] row-major tensor.
struct TargetBatch {
  Shape shape;  // {N, X, Y, Z}
  std::vector<std::uint8_t> classes;

  std::int64_t batch() const { return shape[0]; }
  std::int64_t voxels_per_sample() const { return shape[1] * shape[2] * shape[3]; }
};

// Converts {0,1,2,4} label maps (x-fastest) into a class-index batch.
TargetBatch make_target(std::span<const LabelMap> maps);
// Nearest-neighbour downsampling by an integer factor per axis.
TargetBatch downsample_target(const TargetBatch& t, Int3 factor);

// Soft Dice over foreground classes plus voxelwise cross-entropy:
//   dice = mean_k (1 - (2 sum p g + eps) / (sum p + sum g + eps)),  k >= 1
//   ce   = sum_v w[g_v] (-log p_v[g_v]) / sum_v w[g_v]   (w = 1 when absent)
// with p = softmax over the class axis and sums taken over the whole batch.
template <typename T>
std::pair<Tensor<T>, LossReport> dice_ce_loss(const Tensor<T>& logits, const TargetBatch& target,
                                              std::span<const double> class_weights = {});

// Weighted sum of dice_ce_loss over supervision levels (full resolution first).
template <typename T>
std::pair<Tensor<T>, LossReport> deep_supervision_loss(const std::vector<Tensor<T>>& outputs,
                                                       const TargetBatch& target, std::span<const double> weights);

// 1, 1/2, 1/4, ... normalized to sum 1.
std::vector<double> default_supervision_weights(int outputs);

struct FoldSplit {
  int fold_index = 0;
  std::vector<std::string> train_subject_ids;
  std::vector<std::string> val_subject_ids;
};

// Seeded shuffle, then contiguous validation blocks whose sizes differ by at most one.
std::vector<FoldSplit> make_folds(std::span<const std::string> subject_ids, int fold_count, std::uint64_t seed);

struct TrainConfig {
  int epochs = 10;
  int steps_per_epoch = 25;
  double learning_rate = 0.01;
  double momentum = 0.99;
  bool nesterov = true;
  double weight_decay = 3e-5;
  double poly_power = 0.9;
  double grad_clip_norm = 12.0;
  int fold_count = 5;
  std::uint64_t seed = 0;
  // Empty: default_supervision_weights.
  std::vector<double> deep_supervision_weights;
  // 0: use the plan's batch size.
  int batch_size = 0;
  double foreground_fraction = 1.0 / 3.0;
  bool mirror_augment = false;
  std::optional<std::filesystem::path> checkpoint_path;

  void validate(int supervision_outputs) const;
};

struct Subject {
  std::string id;
  Volume image;
  LabelMap labels;
};

struct TrainResult {
  std::vector<LossReport> epochs;  // mean over each epoch's steps
  std::vector<double> step_losses;
};

// SGD with (Nesterov) momentum, weight decay and global-norm clipping.
template <typename T>
class SgdOptimizer {
 public:
  SgdOptimizer(NamedTensors<T>& params, double momentum, bool nesterov, double weight_decay);
  void zero_grad();
  void step(double learning_rate, double clip_norm);

 private:
  NamedTensors<T>& params_;
  std::vector<ArrayX<T>> velocity_;
  double momentum_;
  bool nesterov_;
  double weight_decay_;
};

double poly_learning_rate(double base, int step, int total_steps, double power);

// Samples one batch: patches cropped (zero / background padded) from random
// training subjects, at least `foreground_fraction` centred on tumour voxels.
class PatchSampler {
 public:
  PatchSampler(std::vector<const Subject*> subjects, Int3 patch, double foreground_fraction, bool mirror,
               std::uint64_t seed);
  std::pair<Tensor<float>, TargetBatch> next(int batch_size);

 private:
  std::vector<const Subject*> subjects_;
  Int3 patch_;
  double fg_fraction_;
  bool mirror_;
  std::mt19937_64 rng_;
  std::uint64_t drawn_ = 0;
  std::vector<std::vector<std::int64_t>> tumour_voxels_;
};

// Trains `net` in place on the fold's training subjects.
TrainResult train_fold(SegNetwork<float>& net, const FoldSplit& fold, const TrainConfig& cfg,
                       std::span<const Subject> data);

struct GradCheckGroup {
  std::string name;
  // ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-6) over the probed entries.
  double rel_error = 0.0;
  std::int64_t entries_checked = 0;
  // Entries whose +-h evaluations straddle a leaky ReLU kink.
  std::int64_t entries_skipped = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  std::string worst_parameter;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  // Entries probed per tensor; 0 checks every entry.
  std::int64_t max_entries_per_tensor = 24;
  std::uint64_t seed = 0;
};

// Per parameter tensor, the relative error of the probed gradient entries
// (see GradCheckGroup), numeric by central differences with h = 1e-5 (1 + |x|).
// Parameters without requires_grad are skipped.
GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn, NamedTensors<double>& params,
                           const GradCheckOptions& opts = {});

// Full network + deep-supervised dice_ce_loss on a random input and target.
GradCheckReport grad_check(const NetworkPlan& plan, const GradCheckOptions& opts = {}, int in_channels = 2);

// Two downsampling stages, 8^3 patch, transformer at the 2^3 bottleneck.
NetworkPlan tiny_plan();

void to_json(nlohmann::json& j, const LossReport& r);
void to_json(nlohmann::json& j, const GradCheckReport& r);

}  // namespace vsg
