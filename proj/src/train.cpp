#include "vsg/train.hpp"

#include "vsg/checkpoint.hpp"
#include "vsg/error.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace vsg {

// ---------------------------------------------------------------------------
// Targets

TargetBatch make_target(std::span<const LabelMap> maps) {
  if (maps.empty()) throw UsageError("make_target: empty batch");
  const Dims3 d = maps.front().dims;
  TargetBatch t;
  t.shape = {static_cast<std::int64_t>(maps.size()), d[0], d[1], d[2]};
  t.classes.resize(static_cast<std::size_t>(numel(t.shape)));
  const auto S = voxel_count(d);
  for (std::size_t n = 0; n < maps.size(); ++n) {
    if (maps[n].dims != d) throw ShapeError("make_target: label maps differ in shape");
    for (std::int64_t x = 0; x < d[0]; ++x)
      for (std::int64_t y = 0; y < d[1]; ++y)
        for (std::int64_t z = 0; z < d[2]; ++z)
          t.classes[static_cast<std::size_t>(static_cast<std::int64_t>(n) * S + (x * d[1] + y) * d[2] + z)] =
              static_cast<std::uint8_t>(label_to_class(maps[n].at(x, y, z)));
  }
  return t;
}

TargetBatch downsample_target(const TargetBatch& t, Int3 factor) {
  if (factor == Int3{1, 1, 1}) return t;
  TargetBatch out;
  out.shape = {t.shape[0], t.shape[1] / factor[0], t.shape[2] / factor[1], t.shape[3] / factor[2]};
  out.classes.resize(static_cast<std::size_t>(numel(out.shape)));
  const auto [X, Y, Z] = std::array{t.shape[1], t.shape[2], t.shape[3]};
  const auto [Xo, Yo, Zo] = std::array{out.shape[1], out.shape[2], out.shape[3]};
  for (std::int64_t n = 0; n < t.shape[0]; ++n)
    for (std::int64_t x = 0; x < Xo; ++x)
      for (std::int64_t y = 0; y < Yo; ++y)
        for (std::int64_t z = 0; z < Zo; ++z) {
          const auto sx = x * factor[0] + factor[0] / 2, sy = y * factor[1] + factor[1] / 2,
                     sz = z * factor[2] + factor[2] / 2;
          out.classes[static_cast<std::size_t>(((n * Xo + x) * Yo + y) * Zo + z)] =
              t.classes[static_cast<std::size_t>(((n * X + sx) * Y + sy) * Z + sz)];
        }
  return out;
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
std::pair<Tensor<T>, LossReport> dice_ce_loss(const Tensor<T>& logits, const TargetBatch& target,
                                              std::span<const double> class_weights) {
  if (logits.ndim() != 5) throw ShapeError("dice_ce_loss: logits must be [N, K, X, Y, Z]");
  const std::int64_t N = logits.dim(0), K = logits.dim(1);
  const std::int64_t S = logits.dim(2) * logits.dim(3) * logits.dim(4);
  if (target.shape != Shape{N, logits.dim(2), logits.dim(3), logits.dim(4)})
    throw ShapeError("dice_ce_loss: target shape " + shape_str(target.shape) + " does not match logits " +
                     shape_str(logits.shape()));
  if (K < 2) throw ShapeError("dice_ce_loss: need at least two classes");
  if (!class_weights.empty() && static_cast<std::int64_t>(class_weights.size()) != K)
    throw ShapeError("dice_ce_loss: class_weights must have one entry per class");
  for (auto c : target.classes)
    if (c >= K) throw ValidationError("dice_ce_loss: target class out of range");

  const auto& z = logits.value();
  ArrayX<T> p(z.size());
  double ce_num = 0.0, ce_den = 0.0;
  std::vector<double> inter(static_cast<std::size_t>(K), 0.0), psum(inter), gsum(inter);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t s = 0; s < S; ++s) {
      const std::int64_t base = n * K * S + s;
      T mx = z[base];
      for (std::int64_t k = 1; k < K; ++k) mx = std::max(mx, z[base + k * S]);
      double denom = 0.0;
      for (std::int64_t k = 0; k < K; ++k) denom += std::exp(static_cast<double>(z[base + k * S] - mx));
      const int g = target.classes[static_cast<std::size_t>(n * S + s)];
      for (std::int64_t k = 0; k < K; ++k) {
        const double pk = std::exp(static_cast<double>(z[base + k * S] - mx)) / denom;
        p[base + k * S] = static_cast<T>(pk);
        psum[static_cast<std::size_t>(k)] += pk;
        if (k == g) inter[static_cast<std::size_t>(k)] += pk;
      }
      gsum[static_cast<std::size_t>(g)] += 1.0;
      const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(g)];
      const double nll = std::log(denom) - static_cast<double>(z[base + g * S] - mx);
      ce_num += w * nll;
      ce_den += w;
    }
  if (!(ce_den > 0.0)) throw ValidationError("dice_ce_loss: class weights sum to zero over the target");

  LossReport rep;
  const auto F = static_cast<double>(K - 1);
  double dice_loss = 0.0;
  std::vector<double> denom_k(static_cast<std::size_t>(K), 0.0), numer_k(denom_k);
  for (std::int64_t k = 1; k < K; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    numer_k[kk] = 2.0 * inter[kk] + kDiceEps;
    denom_k[kk] = psum[kk] + gsum[kk] + kDiceEps;
    const double d = numer_k[kk] / denom_k[kk];
    rep.per_class_dice.push_back(d);
    dice_loss += (1.0 - d) / F;
  }
  rep.dice_component = dice_loss;
  rep.ce_component = ce_num / ce_den;
  rep.total = rep.dice_component + rep.ce_component;

  ArrayX<T> value(1);
  value[0] = static_cast<T>(rep.total);
  auto ln = logits.node();
  std::vector<std::uint8_t> classes = target.classes;
  std::vector<double> weights(class_weights.begin(), class_weights.end());
  auto loss = make_result<T>(
      "dice_ce_loss", Shape{1}, std::move(value), {logits},
      [ln, p = std::move(p), classes = std::move(classes), weights = std::move(weights), numer_k, denom_k, ce_den, N,
       K, S, F](const Node<T>& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        const double up = static_cast<double>(self.grad[0]);
        std::vector<double> dp(static_cast<std::size_t>(K));
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t s = 0; s < S; ++s) {
            const std::int64_t base = n * K * S + s;
            const int g = classes[static_cast<std::size_t>(n * S + s)];
            // d(dice part)/dp_k, then through the softmax Jacobian.
            double dot = 0.0;
            for (std::int64_t k = 0; k < K; ++k) {
              const auto kk = static_cast<std::size_t>(k);
              double d = 0.0;
              if (k >= 1) {
                const double gk = (k == g) ? 1.0 : 0.0;
                d = -(2.0 * gk * denom_k[kk] - numer_k[kk]) / (denom_k[kk] * denom_k[kk]) / F;
              }
              dp[kk] = d;
              dot += d * static_cast<double>(p[base + k * S]);
            }
            const double w = weights.empty() ? 1.0 : weights[static_cast<std::size_t>(g)];
            for (std::int64_t k = 0; k < K; ++k) {
              const double pk = static_cast<double>(p[base + k * S]);
              const double dice_grad = pk * (dp[static_cast<std::size_t>(k)] - dot);
              const double ce_grad = w * (pk - (k == g ? 1.0 : 0.0)) / ce_den;
              ln->grad[base + k * S] += static_cast<T>(up * (dice_grad + ce_grad));
            }
          }
      });
  return {loss, rep};
}

std::vector<double> default_supervision_weights(int outputs) {
  std::vector<double> w(static_cast<std::size_t>(outputs));
  double s = 0.0;
  for (int i = 0; i < outputs; ++i) s += (w[static_cast<std::size_t>(i)] = std::ldexp(1.0, -i));
  for (auto& v : w) v /= s;
  return w;
}

template <typename T>
std::pair<Tensor<T>, LossReport> deep_supervision_loss(const std::vector<Tensor<T>>& outputs,
                                                       const TargetBatch& target, std::span<const double> weights) {
  if (outputs.empty() || outputs.size() != weights.size())
    throw ConfigError("deep supervision needs one weight per output");
  Tensor<T> total;
  LossReport rep;
  for (std::size_t l = 0; l < outputs.size(); ++l) {
    const auto& o = outputs[l];
    Int3 factor{};
    for (int a = 0; a < 3; ++a) {
      const auto full = target.shape[static_cast<std::size_t>(a) + 1];
      if (full % o.dim(a + 2) != 0) throw ShapeError("supervision output does not divide the target grid");
      factor[a] = full / o.dim(a + 2);
    }
    auto [loss, r] = dice_ce_loss(o, downsample_target(target, factor));
    const double w = weights[l];
    auto term = scale(loss, static_cast<T>(w));
    total = total.defined() ? add(total, term) : term;
    rep.dice_component += w * r.dice_component;
    rep.ce_component += w * r.ce_component;
    if (l == 0) rep.per_class_dice = r.per_class_dice;
  }
  rep.total = rep.dice_component + rep.ce_component;
  return {total, rep};
}

// ---------------------------------------------------------------------------
// Folds

std::vector<FoldSplit> make_folds(std::span<const std::string> subject_ids, int fold_count, std::uint64_t seed) {
  if (fold_count < 2) throw UsageError("fold_count must be at least 2");
  if (static_cast<std::int64_t>(subject_ids.size()) < fold_count)
    throw UsageError("need at least " + std::to_string(fold_count) + " subjects for " + std::to_string(fold_count) +
                     " folds");
  std::vector<std::string> ids(subject_ids.begin(), subject_ids.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(ids[i - 1], ids[pick(rng)]);
  }
  const std::size_t n = ids.size(), k = static_cast<std::size_t>(fold_count);
  std::vector<FoldSplit> folds;
  std::size_t start = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    FoldSplit split;
    split.fold_index = static_cast<int>(f);
    for (std::size_t i = 0; i < n; ++i)
      (i >= start && i < start + size ? split.val_subject_ids : split.train_subject_ids).push_back(ids[i]);
    start += size;
    folds.push_back(std::move(split));
  }
  return folds;
}

// ---------------------------------------------------------------------------
// Optimizer

void TrainConfig::validate(int supervision_outputs) const {
  if (epochs < 0 || steps_per_epoch < 0) throw ConfigError("epochs and steps_per_epoch must be >= 0");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (fold_count < 2) throw ConfigError("fold_count must be at least 2");
  if (!(foreground_fraction >= 0.0 && foreground_fraction <= 1.0)) throw ConfigError("foreground_fraction must lie in [0, 1]");
  if (!deep_supervision_weights.empty()) {
    if (static_cast<int>(deep_supervision_weights.size()) != supervision_outputs)
      throw ConfigError("deep_supervision_weights needs " + std::to_string(supervision_outputs) + " entries");
    double s = 0.0;
    for (double w : deep_supervision_weights) {
      if (w < 0.0) throw ConfigError("deep supervision weights must be nonnegative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("deep supervision weights must sum to 1");
  }
}

double poly_learning_rate(double base, int step, int total_steps, double power) {
  if (total_steps <= 0) return base;
  return base * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total_steps), power);
}

template <typename T>
SgdOptimizer<T>::SgdOptimizer(NamedTensors<T>& params, double momentum, bool nesterov, double weight_decay)
    : params_(params), momentum_(momentum), nesterov_(nesterov), weight_decay_(weight_decay) {
  for (const auto& [name, t] : params_) velocity_.push_back(ArrayX<T>::Zero(t.numel()));
}

template <typename T>
void SgdOptimizer<T>::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

template <typename T>
void SgdOptimizer<T>::step(double learning_rate, double clip_norm) {
  double sq = 0.0;
  for (auto& [name, t] : params_)
    if (t.requires_grad() && t.has_grad()) sq += t.grad().template cast<double>().square().sum();
  const double norm = std::sqrt(sq);
  const T clip = (clip_norm > 0.0 && norm > clip_norm) ? static_cast<T>(clip_norm / norm) : T(1);
  const T lr = static_cast<T>(learning_rate), mu = static_cast<T>(momentum_), wd = static_cast<T>(weight_decay_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& t = params_[i].second;
    if (!t.requires_grad() || !t.has_grad()) continue;
    ArrayX<T> g = t.grad() * clip + wd * t.value();
    auto& v = velocity_[i];
    v = mu * v + g;
    if (nesterov_)
      t.value() -= lr * (g + mu * v);
    else
      t.value() -= lr * v;
  }
}

// ---------------------------------------------------------------------------
// Sampling

PatchSampler::PatchSampler(std::vector<const Subject*> subjects, Int3 patch, double foreground_fraction, bool mirror,
                           std::uint64_t seed)
    : subjects_(std::move(subjects)), patch_(patch), fg_fraction_(foreground_fraction), mirror_(mirror), rng_(seed) {
  if (subjects_.empty()) throw UsageError("no training subjects");
  for (const auto* s : subjects_) {
    std::vector<std::int64_t> fg;
    for (std::size_t i = 0; i < s->labels.data.size(); ++i)
      if (s->labels.data[i] != kBackground) fg.push_back(static_cast<std::int64_t>(i));
    tumour_voxels_.push_back(std::move(fg));
  }
}

std::pair<Tensor<float>, TargetBatch> PatchSampler::next(int batch_size) {
  const auto [px, py, pz] = patch_;
  const std::int64_t C = subjects_.front()->image.channels;
  const std::int64_t P = px * py * pz;
  ArrayX<float> img(batch_size * C * P);
  TargetBatch target;
  target.shape = {batch_size, px, py, pz};
  target.classes.assign(static_cast<std::size_t>(batch_size * P), 0);
  std::uniform_int_distribution<std::size_t> pick_subject(0, subjects_.size() - 1);
  std::bernoulli_distribution coin(0.5);
  for (int b = 0; b < batch_size; ++b) {
    const std::size_t si = pick_subject(rng_);
    const Subject& s = *subjects_[si];
    if (s.image.channels != C) throw ValidationError("subjects differ in channel count");
    const Dims3 d = s.image.dims;
    // Forced onto a tumour voxel whenever floor(drawn * fraction) advances.
    const auto before = std::floor(static_cast<double>(drawn_) * fg_fraction_ + 1e-9);
    ++drawn_;
    const auto after = std::floor(static_cast<double>(drawn_) * fg_fraction_ + 1e-9);
    const bool force_fg = after > before && !tumour_voxels_[si].empty();
    Int3 origin{};
    if (force_fg) {
      std::uniform_int_distribution<std::size_t> pick(0, tumour_voxels_[si].size() - 1);
      const auto idx = tumour_voxels_[si][pick(rng_)];
      const Int3 c{idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])};
      for (int a = 0; a < 3; ++a)
        origin[a] = std::clamp<std::int64_t>(c[a] - patch_[a] / 2, 0, std::max<std::int64_t>(0, d[a] - patch_[a]));
    } else {
      for (int a = 0; a < 3; ++a) {
        std::uniform_int_distribution<std::int64_t> pick(0, std::max<std::int64_t>(0, d[a] - patch_[a]));
        origin[a] = pick(rng_);
      }
    }
    std::array<bool, 3> flip{false, false, false};
    if (mirror_)
      for (auto& f : flip) f = coin(rng_);
    for (std::int64_t x = 0; x < px; ++x)
      for (std::int64_t y = 0; y < py; ++y)
        for (std::int64_t z = 0; z < pz; ++z) {
          const auto gx = origin[0] + (flip[0] ? px - 1 - x : x);
          const auto gy = origin[1] + (flip[1] ? py - 1 - y : y);
          const auto gz = origin[2] + (flip[2] ? pz - 1 - z : z);
          const bool inside = gx < d[0] && gy < d[1] && gz < d[2];
          const std::int64_t o = (x * py + y) * pz + z;
          for (std::int64_t c = 0; c < C; ++c)
            img[(b * C + c) * P + o] = inside ? s.image.at(c, gx, gy, gz) : 0.f;
          target.classes[static_cast<std::size_t>(b * P + o)] =
              inside ? static_cast<std::uint8_t>(label_to_class(s.labels.at(gx, gy, gz))) : 0;
        }
  }
  return {Tensor<float>::from_values(Shape{batch_size, C, px, py, pz}, std::move(img)), std::move(target)};
}

// ---------------------------------------------------------------------------
// Training

TrainResult train_fold(SegNetwork<float>& net, const FoldSplit& fold, const TrainConfig& cfg,
                       std::span<const Subject> data) {
  const int outputs = net.plan().deep_supervision_levels + 1;
  cfg.validate(outputs);
  const std::vector<double> ds_weights =
      cfg.deep_supervision_weights.empty() ? default_supervision_weights(outputs) : cfg.deep_supervision_weights;
  std::map<std::string, const Subject*> by_id;
  for (const auto& s : data) by_id[s.id] = &s;
  std::vector<const Subject*> train;
  for (const auto& id : fold.train_subject_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw UsageError("training subject '" + id + "' not found in data");
    if (it->second->image.channels != net.in_channels())
      throw ValidationError("subject '" + id + "' channel count does not match the network");
    train.push_back(it->second);
  }
  PatchSampler sampler(train, net.plan().patch_size, cfg.foreground_fraction, cfg.mirror_augment, cfg.seed);
  SgdOptimizer<float> opt(net.parameters(), cfg.momentum, cfg.nesterov, cfg.weight_decay);
  const int batch = cfg.batch_size > 0 ? cfg.batch_size : net.plan().batch_size;
  const int total_steps = cfg.epochs * cfg.steps_per_epoch;

  TrainResult result;
  int step = 0;
  for (int e = 0; e < cfg.epochs; ++e) {
    LossReport mean;
    for (int s = 0; s < cfg.steps_per_epoch; ++s, ++step) {
      auto [images, target] = sampler.next(batch);
      auto outs = net.forward(images, true);
      auto [loss, rep] = deep_supervision_loss(outs, target, ds_weights);
      if (!std::isfinite(rep.total)) {
        std::ostringstream os;
        os << "non-finite loss at epoch " << e << " step " << step << " (dice " << rep.dice_component << ", ce "
           << rep.ce_component << ")";
        throw TrainingError(os.str());
      }
      opt.zero_grad();
      backward(loss);
      opt.step(poly_learning_rate(cfg.learning_rate, step, total_steps, cfg.poly_power), cfg.grad_clip_norm);
      result.step_losses.push_back(rep.total);
      mean.dice_component += rep.dice_component;
      mean.ce_component += rep.ce_component;
      if (mean.per_class_dice.empty()) mean.per_class_dice.assign(rep.per_class_dice.size(), 0.0);
      for (std::size_t k = 0; k < rep.per_class_dice.size(); ++k) mean.per_class_dice[k] += rep.per_class_dice[k];
    }
    if (cfg.steps_per_epoch > 0) {
      const double n = cfg.steps_per_epoch;
      mean.dice_component /= n;
      mean.ce_component /= n;
      for (auto& d : mean.per_class_dice) d /= n;
    }
    mean.total = mean.dice_component + mean.ce_component;
    result.epochs.push_back(mean);
  }
  if (cfg.checkpoint_path) write_checkpoint(to_checkpoint(net.parameters()), *cfg.checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckReport grad_check(const std::function<Tensor<double>()>& loss_fn, NamedTensors<double>& params,
                           const GradCheckOptions& opts) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  const bool any = std::any_of(params.begin(), params.end(), [](const auto& p) { return p.second.requires_grad(); });
  if (!any) return report;

  for (auto& [name, t] : params) t.zero_grad();
  backward(loss_fn());
  std::mt19937_64 rng(opts.seed);
  NoGradGuard no_grad;
  auto evaluate = [&](std::vector<std::uint8_t>& signs) {
    KinkRecorder rec;
    const double v = loss_fn().item();
    signs = rec.signs();
    return v;
  };
  std::vector<std::uint8_t> sp, sm;
  for (auto& [name, t] : params) {
    if (!t.requires_grad()) continue;
    const ArrayX<double> analytic = t.has_grad() ? t.grad() : ArrayX<double>::Zero(t.numel());
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(t.numel()));
    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
    if (opts.max_entries_per_tensor > 0 && t.numel() > opts.max_entries_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(static_cast<std::size_t>(opts.max_entries_per_tensor));
      std::sort(idx.begin(), idx.end());
    }
    GradCheckGroup group{name, 0.0, 0, 0};
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (auto i : idx) {
      const double x0 = t.value()[i];
      const double h = 1e-5 * (1.0 + std::abs(x0));
      t.value()[i] = x0 + h;
      const double fp = evaluate(sp);
      t.value()[i] = x0 - h;
      const double fm = evaluate(sm);
      t.value()[i] = x0;
      if (sp != sm) {
        ++group.entries_skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++group.entries_checked;
    }
    group.rel_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-6});
    if (group.rel_error >= report.max_rel_error) {
      report.max_rel_error = group.rel_error;
      report.worst_parameter = name;
    }
    report.groups.push_back(std::move(group));
  }
  report.passed = report.max_rel_error < opts.tolerance;
  return report;
}

NetworkPlan tiny_plan() {
  NetworkPlan p;
  p.patch_size = {8, 8, 8};
  p.batch_size = 2;
  p.stage_count = 2;
  p.strides_per_stage = {{1, 1, 1}, {2, 2, 2}, {2, 2, 2}};
  p.kernels_per_stage = {{3, 3, 3}, {3, 3, 3}, {3, 3, 3}};
  p.base_channels = 4;
  p.max_channels = 16;
  p.transformer.num_heads = 8;
  p.transformer.num_layers = 1;
  p.transformer.embed_dim = 16;
  p.transformer.mlp_ratio = 2.0;
  p.residual_connection = true;
  p.deep_supervision_levels = default_supervision_levels(2);
  p.validate();
  return p;
}

GradCheckReport grad_check(const NetworkPlan& plan, const GradCheckOptions& opts, int in_channels) {
  NetworkOptions nopts;
  nopts.seed = opts.seed;
  SegNetwork<double> net(plan, in_channels, kClassCount, nopts);
  const auto [px, py, pz] = plan.patch_size;
  const std::int64_t N = 2;
  std::mt19937_64 rng(opts.seed + 17);
  std::normal_distribution<double> normal(0.0, 1.0);
  ArrayX<double> x(N * in_channels * px * py * pz);
  for (auto& v : x) v = normal(rng);
  auto input = Tensor<double>::from_values(Shape{N, in_channels, px, py, pz}, std::move(x));
  TargetBatch target;
  target.shape = {N, px, py, pz};
  std::uniform_int_distribution<int> cls(0, kClassCount - 1);
  for (std::int64_t i = 0; i < N * px * py * pz; ++i) target.classes.push_back(static_cast<std::uint8_t>(cls(rng)));
  const auto weights = default_supervision_weights(plan.deep_supervision_levels + 1);
  auto loss_fn = [&]() { return deep_supervision_loss(net.forward(input, false), target, weights).first; };
  return grad_check(loss_fn, net.parameters(), opts);
}

// ---------------------------------------------------------------------------

void to_json(nlohmann::json& j, const LossReport& r) {
  j = nlohmann::json{{"total", r.total},
                     {"dice_component", r.dice_component},
                     {"ce_component", r.ce_component},
                     {"per_class_dice", r.per_class_dice}};
}

void to_json(nlohmann::json& j, const GradCheckReport& r) {
  nlohmann::json groups = nlohmann::json::array();
  for (const auto& g : r.groups)
    groups.push_back({{"name", g.name},
                      {"rel_error", g.rel_error},
                      {"entries_checked", g.entries_checked},
                      {"entries_skipped", g.entries_skipped}});
  j = nlohmann::json{{"passed", r.passed},
                     {"tolerance", r.tolerance},
                     {"max_rel_error", r.max_rel_error},
                     {"worst_parameter", r.worst_parameter},
                     {"groups", groups}};
}

template std::pair<Tensor<float>, LossReport> dice_ce_loss<float>(const Tensor<float>&, const TargetBatch&,
                                                                  std::span<const double>);
template std::pair<Tensor<double>, LossReport> dice_ce_loss<double>(const Tensor<double>&, const TargetBatch&,
                                                                    std::span<const double>);
template std::pair<Tensor<float>, LossReport> deep_supervision_loss<float>(const std::vector<Tensor<float>>&,
                                                                           const TargetBatch&,
                                                                           std::span<const double>);
template std::pair<Tensor<double>, LossReport> deep_supervision_loss<double>(const std::vector<Tensor<double>>&,
                                                                             const TargetBatch&,
                                                                             std::span<const double>);
template class SgdOptimizer<float>;
template class SgdOptimizer<double>;

}  // namespace vsg
