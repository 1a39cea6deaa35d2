#pragma once

#include "vsg/checkpoint.hpp"
#include "vsg/planner.hpp"
#include "vsg/tensor.hpp"
#include "vsg/volio.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace vsg {

struct NetworkOptions {
  double leaky_slope = 0.01;
  double dropout = 0.0;
  double norm_eps = 1e-5;
  double layer_norm_eps = 1e-5;
  // Zero weights and bias of the transformer's final output projection, so a
  // residual block starts as the identity.
  bool zero_init_output_projection = false;
  std::uint64_t seed = 0;
};

// softmax(Q K^T / sqrt(d)) V with d = Q.dim(-1). Q, K, V are [tokens, d] or
// batched [B, tokens, d]. The attention matrix is stored in `weights` if given.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>* weights = nullptr);

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // w*: [E, E], b*: [E] or undefined
};

// Projects x ([tokens, E] or [N, tokens, E]) to Q/K/V, runs attention on
// num_heads disjoint E/num_heads slices, concatenates and output-projects.
// Per-head attention matrices ([N*heads, tokens, tokens]) go to `weights`.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& p, int num_heads,
                               Tensor<T>* weights = nullptr);

template <typename T>
struct TransformerLayer {
  Tensor<T> ln1_gamma, ln1_beta;
  AttentionParams<T> attn;
  Tensor<T> ln2_gamma, ln2_beta;
  Tensor<T> ff1_w, ff1_b, ff2_w, ff2_b;
};

// Bottleneck transformer. Every voxel of the [N, C, a, b, c] input is a token
// with a C-dimensional embedding. Token projection, optional learned
// positional embedding, num_layers pre-norm encoder layers (attention and
// GELU feed-forward sublayers with their own skips), final layer norm and an
// output projection; reshaped back to the input layout.
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(const TransformerConfig& cfg, std::int64_t tokens, std::mt19937_64& rng, const NetworkOptions& opts);

  // With residual, returns x + block(x).
  Tensor<T> forward(const Tensor<T>& x, bool residual, std::vector<Tensor<T>>* attention_weights = nullptr) const;

  const TransformerConfig& config() const { return cfg_; }
  std::int64_t tokens() const { return tokens_; }
  void collect(NamedTensors<T>& out, const std::string& prefix) const;

  Tensor<T> in_w, in_b, pos, final_gamma, final_beta, out_w, out_b;
  std::vector<TransformerLayer<T>> layers;

 private:
  TransformerConfig cfg_;
  std::int64_t tokens_ = 0;
  T ln_eps_ = T(1e-5);
};

template <typename T>
Tensor<T> transformer_block_forward(const TransformerBlock<T>& block, const Tensor<T>& x, bool residual);

// Conv, dropout, instance norm, leaky ReLU. The conv has no bias (b stays
// undefined) because the norm removes it; up-convs and heads use w and b only.
template <typename T>
struct ConvUnit {
  Tensor<T> w, b, gamma, beta;
  Int3 stride{1, 1, 1};
  Int3 pad{1, 1, 1};
};

// U-Net built from a NetworkPlan: two conv units per encoder level, the
// transformer at the bottleneck, transposed-conv upsampling with skip
// concatenation, and 1x1x1 segmentation heads on the supervised levels.
template <typename T>
class SegNetwork {
 public:
  SegNetwork(NetworkPlan plan, int in_channels, int class_count = kClassCount, NetworkOptions opts = {});

  // Logits per supervised level, full resolution first, deepest last.
  std::vector<Tensor<T>> forward(const Tensor<T>& patch, bool training);

  const NetworkPlan& plan() const { return plan_; }
  const NetworkOptions& options() const { return opts_; }
  int in_channels() const { return in_channels_; }
  int class_count() const { return class_count_; }

  NamedTensors<T>& parameters() { return params_; }
  const NamedTensors<T>& parameters() const { return params_; }
  std::int64_t parameter_count() const;

  bool has_transformer() const { return plan_.transformer.num_layers > 0; }
  TransformerBlock<T>& transformer() { return transformer_; }
  // Skips the transformer (and its residual) entirely.
  void set_transformer_bypass(bool bypass) { bypass_transformer_ = bypass; }

  // Attention matrices of the most recent forward pass.
  const std::vector<Tensor<T>>& last_attention() const { return last_attention_; }

  // Deep copy with independent parameter storage.
  SegNetwork clone() const;

 private:
  Tensor<T> run_unit(const ConvUnit<T>& u, const Tensor<T>& x, bool training);
  ConvUnit<T> make_unit(std::int64_t cin, std::int64_t cout, Int3 kernel, Int3 stride, std::mt19937_64& rng,
                        const std::string& name);

  NetworkPlan plan_;
  int in_channels_;
  int class_count_;
  NetworkOptions opts_;
  std::vector<std::array<ConvUnit<T>, 2>> encoder_;
  std::vector<std::array<ConvUnit<T>, 2>> decoder_;  // indexed by level 0..stage_count-1
  std::vector<ConvUnit<T>> up_;                      // transposed convs into level l
  std::vector<ConvUnit<T>> heads_;                   // heads for levels 0..deep_supervision_levels
  TransformerBlock<T> transformer_;
  NamedTensors<T> params_;
  bool bypass_transformer_ = false;
  std::uint64_t forward_calls_ = 0;
  std::vector<Tensor<T>> last_attention_;
};

// Volume <-> [1, C, X, Y, Z] tensor (the tensor is z-fastest, the volume x-fastest).
template <typename T>
Tensor<T> volume_to_tensor(const Volume& v);

struct PredictOptions {
  double overlap = 0.5;
};

// Sliding-window class probabilities, [class_count] channels over the volume grid.
template <typename T>
Volume predict_probabilities(SegNetwork<T>& net, const Volume& volume, const PredictOptions& opts = {});

// Voxelwise argmax of predict_probabilities mapped back to {0, 1, 2, 4}.
template <typename T>
LabelMap predict_labels(SegNetwork<T>& net, const Volume& volume, const PredictOptions& opts = {});

LabelMap probabilities_to_labels(const Volume& probs);

// Window origins along one axis: 0, step, ..., extent - patch, step = patch * (1 - overlap).
std::vector<std::int64_t> window_origins(std::int64_t extent, std::int64_t patch, double overlap);

}  // namespace vsg
