#include "vsg/network.hpp"

#include "vsg/error.hpp"

#include <algorithm>
#include <cmath>

namespace vsg {

// ---------------------------------------------------------------------------
// Attention

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, Tensor<T>* weights) {
  if (q.ndim() < 2 || q.ndim() > 3 || q.shape() != k.shape() || k.shape() != v.shape())
    throw ShapeError("attention: Q, K, V must share shape [tokens, d] or [B, tokens, d]; got " + shape_str(q.shape()) +
                     ", " + shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(q.dim(-1)));
  const int last = static_cast<int>(q.ndim()) - 1;
  auto scores = scale(matmul(q, transpose(k, last - 1, last)), inv_sqrt_d);
  auto w = softmax(scores, -1);
  if (weights) *weights = w;
  return matmul(w, v);
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& x, const AttentionParams<T>& p, int num_heads, Tensor<T>* weights) {
  if (x.ndim() < 2 || x.ndim() > 3) throw ShapeError("multi_head_attention: expects [tokens, E] or [N, tokens, E]");
  const bool batched = x.ndim() == 3;
  const std::int64_t N = batched ? x.dim(0) : 1, tokens = x.dim(-2), E = x.dim(-1);
  if (num_heads < 1 || E % num_heads != 0)
    throw ConfigError("embed_dim " + std::to_string(E) + " is not divisible by num_heads " + std::to_string(num_heads));
  const std::int64_t H = num_heads, dh = E / H;
  const Tensor<T> xb = batched ? x : reshape(x, Shape{1, tokens, E});
  auto split = [&](const Tensor<T>& t) {
    return reshape(permute(reshape(t, Shape{N, tokens, H, dh}), {0, 2, 1, 3}), Shape{N * H, tokens, dh});
  };
  auto q = split(linear(xb, p.wq, p.bq));
  auto k = split(linear(xb, p.wk, p.bk));
  auto v = split(linear(xb, p.wv, p.bv));
  auto o = attention(q, k, v, weights);
  o = reshape(permute(reshape(o, Shape{N, H, tokens, dh}), {0, 2, 1, 3}), Shape{N, tokens, E});
  auto y = linear(o, p.wo, p.bo);
  return batched ? y : reshape(y, Shape{tokens, E});
}

// ---------------------------------------------------------------------------
// Initialization helpers

namespace {

template <typename T>
Tensor<T> normal_param(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  ArrayX<T> v(numel(shape));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(dist(rng));
  return Tensor<T>::from_values(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> const_param(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

template <typename T>
Tensor<T> linear_weight(std::int64_t in, std::int64_t out, std::mt19937_64& rng) {
  return normal_param<T>(Shape{in, out}, std::sqrt(2.0 / static_cast<double>(in + out)), rng);
}

}  // namespace

// ---------------------------------------------------------------------------
// Transformer block

template <typename T>
TransformerBlock<T>::TransformerBlock(const TransformerConfig& cfg, std::int64_t tokens, std::mt19937_64& rng,
                                      const NetworkOptions& opts)
    : cfg_(cfg), tokens_(tokens), ln_eps_(static_cast<T>(opts.layer_norm_eps)) {
  const std::int64_t E = cfg.embed_dim;
  if (E < 1 || cfg.num_heads < 1 || E % cfg.num_heads != 0)
    throw ConfigError("transformer embed_dim must be a positive multiple of num_heads");
  const auto hidden = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::lround(cfg.mlp_ratio * static_cast<double>(E))));
  in_w = linear_weight<T>(E, E, rng);
  in_b = const_param<T>(Shape{E}, T(0));
  if (cfg.positional_encoding == PositionalEncoding::Learned) pos = normal_param<T>(Shape{tokens, E}, 0.02, rng);
  for (int l = 0; l < cfg.num_layers; ++l) {
    TransformerLayer<T> layer;
    layer.ln1_gamma = const_param<T>(Shape{E}, T(1));
    layer.ln1_beta = const_param<T>(Shape{E}, T(0));
    layer.attn.wq = linear_weight<T>(E, E, rng);
    layer.attn.bq = const_param<T>(Shape{E}, T(0));
    layer.attn.wk = linear_weight<T>(E, E, rng);
    layer.attn.wv = linear_weight<T>(E, E, rng);
    layer.attn.bv = const_param<T>(Shape{E}, T(0));
    layer.attn.wo = linear_weight<T>(E, E, rng);
    layer.attn.bo = const_param<T>(Shape{E}, T(0));
    layer.ln2_gamma = const_param<T>(Shape{E}, T(1));
    layer.ln2_beta = const_param<T>(Shape{E}, T(0));
    layer.ff1_w = linear_weight<T>(E, hidden, rng);
    layer.ff1_b = const_param<T>(Shape{hidden}, T(0));
    layer.ff2_w = linear_weight<T>(hidden, E, rng);
    layer.ff2_b = const_param<T>(Shape{E}, T(0));
    layers.push_back(std::move(layer));
  }
  final_gamma = const_param<T>(Shape{E}, T(1));
  final_beta = const_param<T>(Shape{E}, T(0));
  out_w = linear_weight<T>(E, E, rng);
  out_b = const_param<T>(Shape{E}, T(0));
  if (opts.zero_init_output_projection) out_w.value().setZero();
}

template <typename T>
Tensor<T> TransformerBlock<T>::forward(const Tensor<T>& x, bool residual,
                                       std::vector<Tensor<T>>* attention_weights) const {
  if (x.ndim() != 5) throw ShapeError("transformer block expects [N, C, a, b, c], got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1);
  if (C != cfg_.embed_dim)
    throw ConfigError("transformer block: channel count " + std::to_string(C) + " differs from embed_dim " +
                      std::to_string(cfg_.embed_dim));
  const std::int64_t tokens = x.dim(2) * x.dim(3) * x.dim(4);
  if (pos.defined() && tokens != tokens_)
    throw ShapeError("transformer block: " + std::to_string(tokens) + " tokens, positional embedding has " +
                     std::to_string(tokens_));
  auto h = linear(permute(reshape(x, Shape{N, C, tokens}), {0, 2, 1}), in_w, in_b);
  if (pos.defined()) h = add(h, pos);
  for (const auto& layer : layers) {
    Tensor<T> w;
    auto a = multi_head_attention(layer_norm(h, layer.ln1_gamma, layer.ln1_beta, ln_eps_), layer.attn, cfg_.num_heads,
                                  attention_weights ? &w : nullptr);
    if (attention_weights) attention_weights->push_back(w);
    h = add(h, a);
    auto f = linear(gelu(linear(layer_norm(h, layer.ln2_gamma, layer.ln2_beta, ln_eps_), layer.ff1_w, layer.ff1_b)),
                    layer.ff2_w, layer.ff2_b);
    h = add(h, f);
  }
  h = linear(layer_norm(h, final_gamma, final_beta, ln_eps_), out_w, out_b);
  auto y = reshape(permute(h, {0, 2, 1}), x.shape());
  return residual ? add(x, y) : y;
}

template <typename T>
void TransformerBlock<T>::collect(NamedTensors<T>& out, const std::string& prefix) const {
  out.emplace_back(prefix + "in.weight", in_w);
  out.emplace_back(prefix + "in.bias", in_b);
  if (pos.defined()) out.emplace_back(prefix + "pos", pos);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string p = prefix + "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gamma", L.ln1_gamma);
    out.emplace_back(p + "ln1.beta", L.ln1_beta);
    out.emplace_back(p + "attn.q.weight", L.attn.wq);
    out.emplace_back(p + "attn.q.bias", L.attn.bq);
    out.emplace_back(p + "attn.k.weight", L.attn.wk);
    out.emplace_back(p + "attn.v.weight", L.attn.wv);
    out.emplace_back(p + "attn.v.bias", L.attn.bv);
    out.emplace_back(p + "attn.out.weight", L.attn.wo);
    out.emplace_back(p + "attn.out.bias", L.attn.bo);
    out.emplace_back(p + "ln2.gamma", L.ln2_gamma);
    out.emplace_back(p + "ln2.beta", L.ln2_beta);
    out.emplace_back(p + "ff1.weight", L.ff1_w);
    out.emplace_back(p + "ff1.bias", L.ff1_b);
    out.emplace_back(p + "ff2.weight", L.ff2_w);
    out.emplace_back(p + "ff2.bias", L.ff2_b);
  }
  out.emplace_back(prefix + "final_ln.gamma", final_gamma);
  out.emplace_back(prefix + "final_ln.beta", final_beta);
  out.emplace_back(prefix + "out.weight", out_w);
  out.emplace_back(prefix + "out.bias", out_b);
}

template <typename T>
Tensor<T> transformer_block_forward(const TransformerBlock<T>& block, const Tensor<T>& x, bool residual) {
  return block.forward(x, residual);
}

// ---------------------------------------------------------------------------
// SegNetwork

template <typename T>
ConvUnit<T> SegNetwork<T>::make_unit(std::int64_t cin, std::int64_t cout, Int3 kernel, Int3 stride,
                                     std::mt19937_64& rng, const std::string& name) {
  ConvUnit<T> u;
  const double fan_in = static_cast<double>(cin * kernel[0] * kernel[1] * kernel[2]);
  const double a = opts_.leaky_slope;
  u.w = normal_param<T>(Shape{cout, cin, kernel[0], kernel[1], kernel[2]}, std::sqrt(2.0 / ((1.0 + a * a) * fan_in)), rng);
  u.gamma = const_param<T>(Shape{cout}, T(1));
  u.beta = const_param<T>(Shape{cout}, T(0));
  u.stride = stride;
  u.pad = {kernel[0] / 2, kernel[1] / 2, kernel[2] / 2};
  params_.emplace_back(name + ".weight", u.w);
  params_.emplace_back(name + ".norm.gamma", u.gamma);
  params_.emplace_back(name + ".norm.beta", u.beta);
  return u;
}

template <typename T>
SegNetwork<T>::SegNetwork(NetworkPlan plan, int in_channels, int class_count, NetworkOptions opts)
    : plan_(std::move(plan)), in_channels_(in_channels), class_count_(class_count), opts_(opts) {
  plan_.validate();
  if (in_channels < 1) throw ConfigError("network needs at least one input channel");
  if (class_count < 2) throw ConfigError("network needs at least two classes");
  if (!(opts.dropout >= 0.0 && opts.dropout < 1.0)) throw ParameterError("dropout probability must lie in [0, 1)");
  std::mt19937_64 rng(opts.seed);
  const int S = plan_.stage_count;
  const auto& strides = plan_.strides_per_stage;
  const auto& kernels = plan_.kernels_per_stage;

  std::int64_t cin = in_channels;
  for (int l = 0; l <= S; ++l) {
    const auto c = plan_.channels_at(l);
    const auto k = kernels[static_cast<std::size_t>(l)];
    const std::string p = "enc" + std::to_string(l);
    encoder_.push_back({make_unit(cin, c, k, strides[static_cast<std::size_t>(l)], rng, p + ".conv0"),
                        make_unit(c, c, k, {1, 1, 1}, rng, p + ".conv1")});
    cin = c;
  }
  if (has_transformer()) {
    TransformerConfig tc = plan_.transformer;
    transformer_ = TransformerBlock<T>(tc, plan_.bottleneck_tokens(), rng, opts_);
    transformer_.collect(params_, "transformer.");
  }
  up_.resize(static_cast<std::size_t>(S));
  decoder_.resize(static_cast<std::size_t>(S));
  for (int l = S - 1; l >= 0; --l) {
    const auto c = plan_.channels_at(l);
    const auto cdeep = plan_.channels_at(l + 1);
    const Int3 s = strides[static_cast<std::size_t>(l) + 1];
    const std::string p = "dec" + std::to_string(l);
    ConvUnit<T> up;
    const double fan_in = static_cast<double>(cdeep * s[0] * s[1] * s[2]);
    up.w = normal_param<T>(Shape{cdeep, c, s[0], s[1], s[2]}, std::sqrt(2.0 / fan_in), rng);
    up.b = const_param<T>(Shape{c}, T(0));
    up.stride = s;
    up.pad = {0, 0, 0};
    params_.emplace_back(p + ".up.weight", up.w);
    params_.emplace_back(p + ".up.bias", up.b);
    up_[static_cast<std::size_t>(l)] = up;
    const auto k = kernels[static_cast<std::size_t>(l)];
    decoder_[static_cast<std::size_t>(l)] = {make_unit(2 * c, c, k, {1, 1, 1}, rng, p + ".conv0"),
                                              make_unit(c, c, k, {1, 1, 1}, rng, p + ".conv1")};
  }
  for (int l = 0; l <= plan_.deep_supervision_levels; ++l) {
    const auto c = plan_.channels_at(l);
    ConvUnit<T> head;
    head.w = normal_param<T>(Shape{class_count, c, 1, 1, 1}, std::sqrt(1.0 / static_cast<double>(c)), rng);
    head.b = const_param<T>(Shape{class_count}, T(0));
    head.pad = {0, 0, 0};
    params_.emplace_back("head" + std::to_string(l) + ".weight", head.w);
    params_.emplace_back("head" + std::to_string(l) + ".bias", head.b);
    heads_.push_back(head);
  }
}

template <typename T>
std::int64_t SegNetwork<T>::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename T>
Tensor<T> SegNetwork<T>::run_unit(const ConvUnit<T>& u, const Tensor<T>& x, bool training) {
  auto h = conv3d(x, u.w, u.b, u.stride, u.pad);
  if (opts_.dropout > 0.0) h = dropout(h, opts_.dropout, training, opts_.seed * 1000003ULL + forward_calls_++);
  h = instance_norm(h, u.gamma, u.beta, static_cast<T>(opts_.norm_eps));
  return leaky_relu(h, static_cast<T>(opts_.leaky_slope));
}

template <typename T>
std::vector<Tensor<T>> SegNetwork<T>::forward(const Tensor<T>& patch, bool training) {
  const auto& ps = plan_.patch_size;
  if (patch.ndim() != 5 || patch.dim(1) != in_channels_ || patch.dim(2) != ps[0] || patch.dim(3) != ps[1] ||
      patch.dim(4) != ps[2])
    throw ShapeError("network expects [N, " + std::to_string(in_channels_) + ", " + std::to_string(ps[0]) + ", " +
                     std::to_string(ps[1]) + ", " + std::to_string(ps[2]) + "], got " + shape_str(patch.shape()));
  const int S = plan_.stage_count;
  std::vector<Tensor<T>> skips;
  Tensor<T> h = patch;
  for (int l = 0; l <= S; ++l) {
    const auto& units = encoder_[static_cast<std::size_t>(l)];
    h = run_unit(units[1], run_unit(units[0], h, training), training);
    if (l < S) skips.push_back(h);
  }
  last_attention_.clear();
  if (has_transformer() && !bypass_transformer_)
    h = transformer_.forward(h, plan_.residual_connection, &last_attention_);

  std::vector<Tensor<T>> outputs(static_cast<std::size_t>(plan_.deep_supervision_levels) + 1);
  for (int l = S - 1; l >= 0; --l) {
    const auto& up = up_[static_cast<std::size_t>(l)];
    auto u = conv3d_transposed(h, up.w, up.b, up.stride, up.pad);
    h = concat<T>({u, skips[static_cast<std::size_t>(l)]}, 1);
    const auto& units = decoder_[static_cast<std::size_t>(l)];
    h = run_unit(units[1], run_unit(units[0], h, training), training);
    if (l <= plan_.deep_supervision_levels) {
      const auto& head = heads_[static_cast<std::size_t>(l)];
      outputs[static_cast<std::size_t>(l)] = conv3d(h, head.w, head.b, {1, 1, 1}, {0, 0, 0});
    }
  }
  return outputs;
}

template <typename T>
SegNetwork<T> SegNetwork<T>::clone() const {
  SegNetwork copy(plan_, in_channels_, class_count_, opts_);
  for (std::size_t i = 0; i < params_.size(); ++i) copy.params_[i].second.value() = params_[i].second.value();
  copy.bypass_transformer_ = bypass_transformer_;
  return copy;
}

// ---------------------------------------------------------------------------
// Inference

template <typename T>
Tensor<T> volume_to_tensor(const Volume& v) {
  const auto [X, Y, Z] = v.dims;
  ArrayX<T> vals(v.channels * X * Y * Z);
  for (std::int64_t c = 0; c < v.channels; ++c)
    for (std::int64_t x = 0; x < X; ++x)
      for (std::int64_t y = 0; y < Y; ++y)
        for (std::int64_t z = 0; z < Z; ++z) vals[((c * X + x) * Y + y) * Z + z] = static_cast<T>(v.at(c, x, y, z));
  return Tensor<T>::from_values(Shape{1, v.channels, X, Y, Z}, std::move(vals));
}

std::vector<std::int64_t> window_origins(std::int64_t extent, std::int64_t patch, double overlap) {
  if (extent <= patch) return {0};
  const auto step = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(static_cast<double>(patch) * (1.0 - overlap))));
  std::vector<std::int64_t> out;
  for (std::int64_t o = 0; o + patch < extent; o += step) out.push_back(o);
  out.push_back(extent - patch);
  return out;
}

template <typename T>
Volume predict_probabilities(SegNetwork<T>& net, const Volume& volume, const PredictOptions& opts) {
  if (volume.channels != net.in_channels())
    throw ShapeError("volume has " + std::to_string(volume.channels) + " channels, network expects " +
                     std::to_string(net.in_channels()));
  if (!(opts.overlap >= 0.0 && opts.overlap < 1.0)) throw ParameterError("overlap must lie in [0, 1)");
  const Int3 patch = net.plan().patch_size;
  const Dims3 dims = volume.dims;
  Dims3 padded;
  for (int a = 0; a < 3; ++a) padded[a] = std::max(dims[a], patch[a]);
  const std::int64_t K = net.class_count();
  const std::int64_t C = volume.channels;
  const std::int64_t Pv = voxel_count(padded);
  Eigen::ArrayXd acc = Eigen::ArrayXd::Zero(K * Pv);
  Eigen::ArrayXd hits = Eigen::ArrayXd::Zero(Pv);

  const auto ox = window_origins(padded[0], patch[0], opts.overlap);
  const auto oy = window_origins(padded[1], patch[1], opts.overlap);
  const auto oz = window_origins(padded[2], patch[2], opts.overlap);
  const auto [px, py, pz] = patch;
  NoGradGuard no_grad;
  ArrayX<T> window(C * px * py * pz);
  for (auto x0 : ox)
    for (auto y0 : oy)
      for (auto z0 : oz) {
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t x = 0; x < px; ++x)
            for (std::int64_t y = 0; y < py; ++y)
              for (std::int64_t z = 0; z < pz; ++z) {
                const auto gx = x0 + x, gy = y0 + y, gz = z0 + z;
                const bool inside = gx < dims[0] && gy < dims[1] && gz < dims[2];
                window[((c * px + x) * py + y) * pz + z] = inside ? static_cast<T>(volume.at(c, gx, gy, gz)) : T(0);
              }
        auto input = Tensor<T>::from_values(Shape{1, C, px, py, pz}, window);
        auto probs = softmax(net.forward(input, false).front(), 1);
        const auto& pv = probs.value();
        for (std::int64_t x = 0; x < px; ++x)
          for (std::int64_t y = 0; y < py; ++y)
            for (std::int64_t z = 0; z < pz; ++z) {
              const auto g = linear_index(padded, x0 + x, y0 + y, z0 + z);
              hits[g] += 1.0;
              for (std::int64_t k = 0; k < K; ++k) acc[k * Pv + g] += static_cast<double>(pv[((k * px + x) * py + y) * pz + z]);
            }
      }

  Volume out(K, dims, volume.spacing);
  out.channel_names.clear();
  for (std::int64_t k = 0; k < K; ++k) out.channel_names.push_back("P" + std::to_string(k));
  for (std::int64_t k = 0; k < K; ++k)
    for (std::int64_t z = 0; z < dims[2]; ++z)
      for (std::int64_t y = 0; y < dims[1]; ++y)
        for (std::int64_t x = 0; x < dims[0]; ++x) {
          const auto g = linear_index(padded, x, y, z);
          out.at(k, x, y, z) = static_cast<float>(acc[k * Pv + g] / hits[g]);
        }
  return out;
}

LabelMap probabilities_to_labels(const Volume& probs) {
  if (probs.channels != kClassCount)
    throw ShapeError("probability volume must have " + std::to_string(kClassCount) + " channels");
  LabelMap m(probs.dims, probs.spacing);
  const auto n = probs.voxels();
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    float bv = probs.data[i];
    for (int k = 1; k < kClassCount; ++k) {
      const float v = probs.data[k * n + i];
      if (v > bv) {
        bv = v;
        best = k;
      }
    }
    m.data[static_cast<std::size_t>(i)] = class_to_label(best);
  }
  return m;
}

template <typename T>
LabelMap predict_labels(SegNetwork<T>& net, const Volume& volume, const PredictOptions& opts) {
  return probabilities_to_labels(predict_probabilities(net, volume, opts));
}

#define VSG_INSTANTIATE(T)                                                                                  \
  template Tensor<T> attention<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*);         \
  template Tensor<T> multi_head_attention<T>(const Tensor<T>&, const AttentionParams<T>&, int, Tensor<T>*); \
  template class TransformerBlock<T>;                                                                       \
  template Tensor<T> transformer_block_forward<T>(const TransformerBlock<T>&, const Tensor<T>&, bool);       \
  template class SegNetwork<T>;                                                                             \
  template Tensor<T> volume_to_tensor<T>(const Volume&);                                                    \
  template Volume predict_probabilities<T>(SegNetwork<T>&, const Volume&, const PredictOptions&);           \
  template LabelMap predict_labels<T>(SegNetwork<T>&, const Volume&, const PredictOptions&);

VSG_INSTANTIATE(float)
VSG_INSTANTIATE(double)

#undef VSG_INSTANTIATE

}  // namespace vsg
