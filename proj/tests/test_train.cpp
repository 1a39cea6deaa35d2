#include "fd_check.hpp"
#include "oracles.hpp"
#include "test_util.hpp"
#include "vsg/error.hpp"
#include "vsg/train.hpp"

#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

using namespace vsg;
using fdcheck::random_tensor;
using fdcheck::TensorD;

namespace {

TargetBatch random_target(std::int64_t n, std::int64_t k, Int3 d, std::mt19937_64& rng) {
  TargetBatch t;
  t.shape = {n, d[0], d[1], d[2]};
  std::uniform_int_distribution<int> c(0, static_cast<int>(k) - 1);
  t.classes.resize(static_cast<std::size_t>(n * d[0] * d[1] * d[2]));
  for (auto& v : t.classes) v = static_cast<std::uint8_t>(c(rng));
  return t;
}

std::vector<Subject> phantom_subjects(int count, std::uint64_t seed) {
  std::vector<Subject> out;
  int i = 0;
  for (const auto& spec : phantom_series(count, {8, 8, 8}, seed)) {
    auto [vol, lab] = generate_phantom(spec);
    out.push_back({"s" + std::to_string(i++), standardize_intensity(vol), lab});
  }
  return out;
}

}  // namespace

TEST_CASE("targets use contiguous classes in row-major order") {
  LabelMap m({2, 1, 3});
  m.at(1, 0, 2) = 4;
  m.at(0, 0, 1) = 2;
  const auto t = make_target(std::span<const LabelMap>(&m, 1));
  CHECK(t.shape == Shape{1, 2, 1, 3});
  CHECK(t.classes == std::vector<std::uint8_t>{0, 2, 0, 0, 0, 3});

  TargetBatch big;
  big.shape = {1, 4, 4, 4};
  big.classes.resize(64);
  for (int i = 0; i < 64; ++i) big.classes[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(i % 4);
  const auto half = downsample_target(big, {2, 2, 2});
  CHECK(half.shape == Shape{1, 2, 2, 2});
  CHECK(half.classes[0] == big.classes[(1 * 4 + 1) * 4 + 1]);
}

TEST_CASE("loss matches the loop oracle") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 10; ++t) {
    const std::int64_t N = 2, K = 4;
    auto logits = random_tensor({N, K, 4, 4, 4}, rng, false, 2.0);
    const auto target = random_target(N, K, {4, 4, 4}, rng);
    const auto [loss, rep] = dice_ce_loss(logits, target);
    std::vector<double> lv(logits.value().data(), logits.value().data() + logits.numel());
    std::vector<int> tv(target.classes.begin(), target.classes.end());
    const auto ref = oracle::dice_ce(lv, N, K, 64, tv);
    CHECK(std::abs(rep.dice_component - ref.dice) < 1e-6);
    CHECK(std::abs(rep.ce_component - ref.ce) < 1e-6);
    CHECK(std::abs(rep.total - (rep.dice_component + rep.ce_component)) < 1e-9);
    CHECK(std::abs(loss.item() - rep.total) < 1e-9);
    CHECK(rep.per_class_dice.size() == 3);
  }
}

TEST_CASE("uniform two class logits give ln 2") {
  auto logits = TensorD::zeros({1, 2, 2, 2, 2});
  TargetBatch t;
  t.shape = {1, 2, 2, 2};
  t.classes = {0, 1, 0, 1, 0, 1, 0, 1};
  const auto rep = dice_ce_loss(logits, t).second;
  CHECK(std::abs(rep.ce_component - std::log(2.0)) < 1e-6);
}

TEST_CASE("confident correct logits drive the loss to zero monotonically") {
  std::mt19937_64 rng(2);
  const auto t = random_target(1, 4, {3, 3, 3}, rng);
  double prev = 1e9;
  for (double scale : {1.0, 2.0, 4.0, 8.0, 16.0, 32.0}) {
    auto logits = TensorD::zeros({1, 4, 3, 3, 3});
    for (int v = 0; v < 27; ++v) logits.value()[t.classes[static_cast<std::size_t>(v)] * 27 + v] = scale;
    const auto rep = dice_ce_loss(logits, t).second;
    CHECK(rep.total < prev);
    prev = rep.total;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("absent classes predicted absent cost nothing") {
  auto logits = TensorD::zeros({1, 3, 2, 2, 1});
  for (int v = 0; v < 4; ++v) logits.value()[v] = 40.0;
  TargetBatch t;
  t.shape = {1, 2, 2, 1};
  t.classes = {0, 0, 0, 0};
  const auto rep = dice_ce_loss(logits, t).second;
  CHECK(rep.dice_component < 1e-6);
}

TEST_CASE("class weights and shape errors") {
  std::mt19937_64 rng(3);
  auto logits = random_tensor({1, 4, 2, 2, 2}, rng, false);
  const auto t = random_target(1, 4, {2, 2, 2}, rng);
  const std::vector<double> ones(4, 1.0);
  CHECK(dice_ce_loss(logits, t, ones).second.total == doctest::Approx(dice_ce_loss(logits, t).second.total));
  CHECK_THROWS_AS(dice_ce_loss(logits, random_target(1, 4, {2, 2, 3}, rng)), ShapeError);
  const std::vector<double> three(3, 1.0);
  CHECK_THROWS_AS(dice_ce_loss(logits, t, three), ShapeError);
}

TEST_CASE("loss gradients match finite differences") {
  std::mt19937_64 rng(4);
  auto logits = random_tensor({2, 3, 2, 3, 2}, rng);
  const auto t = random_target(2, 3, {2, 3, 2}, rng);
  const std::vector<double> w{0.5, 1.0, 2.0};
  CHECK(fdcheck::max_relative_error([&] { return dice_ce_loss(logits, t, w).first; }, {logits}) < 1e-6);
}

TEST_CASE("deep supervision weights") {
  const auto w = default_supervision_weights(3);
  CHECK(w.size() == 3);
  CHECK(w[0] == doctest::Approx(4.0 / 7.0));
  CHECK(w[1] == doctest::Approx(2.0 / 7.0));
  CHECK(w[2] == doctest::Approx(1.0 / 7.0));

  std::mt19937_64 rng(5);
  const auto t = random_target(1, 4, {4, 4, 4}, rng);
  std::vector<TensorD> outs{random_tensor({1, 4, 4, 4, 4}, rng, false), random_tensor({1, 4, 2, 2, 2}, rng, false)};
  const std::vector<double> sw{0.75, 0.25};
  const auto [loss, rep] = deep_supervision_loss(outs, t, sw);
  const double l0 = dice_ce_loss(outs[0], t).second.total;
  const double l1 = dice_ce_loss(outs[1], downsample_target(t, {2, 2, 2})).second.total;
  CHECK(loss.item() == doctest::Approx(0.75 * l0 + 0.25 * l1));
  CHECK(std::abs(rep.total - rep.dice_component - rep.ce_component) < 1e-9);
}

TEST_CASE("folds partition the subjects") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("p" + std::to_string(i));
  const auto folds = make_folds(ids, 5, 3);
  REQUIRE(folds.size() == 5);
  std::set<std::string> seen;
  for (const auto& f : folds) {
    CHECK(f.val_subject_ids.size() == 2);
    CHECK(f.train_subject_ids.size() == 8);
    for (const auto& id : f.val_subject_ids) CHECK(seen.insert(id).second);
    for (const auto& id : f.train_subject_ids)
      CHECK(std::find(f.val_subject_ids.begin(), f.val_subject_ids.end(), id) == f.val_subject_ids.end());
  }
  CHECK(seen.size() == 10);

  const auto again = make_folds(ids, 5, 3);
  for (int i = 0; i < 5; ++i) CHECK(again[i].val_subject_ids == folds[i].val_subject_ids);

  ids.resize(7);
  std::vector<std::size_t> sizes;
  for (const auto& f : make_folds(ids, 5, 1)) sizes.push_back(f.val_subject_ids.size());
  CHECK(sizes == std::vector<std::size_t>{2, 2, 1, 1, 1});

  ids.resize(3);
  CHECK_THROWS_AS(make_folds(ids, 5, 1), UsageError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate(2));
  c.fold_count = 1;
  CHECK_THROWS_AS(c.validate(2), ConfigError);
  c = {};
  c.deep_supervision_weights = {0.5, 0.4};
  CHECK_THROWS_AS(c.validate(2), ConfigError);
  c.deep_supervision_weights = {1.2, -0.2};
  CHECK_THROWS_AS(c.validate(2), ConfigError);
  c.deep_supervision_weights = {0.5, 0.5, 0.0};
  CHECK_THROWS_AS(c.validate(2), ConfigError);
}

TEST_CASE("poly schedule") {
  CHECK(poly_learning_rate(0.01, 0, 100, 0.9) == doctest::Approx(0.01));
  CHECK(poly_learning_rate(0.01, 50, 100, 0.9) == doctest::Approx(0.01 * std::pow(0.5, 0.9)));
}

TEST_CASE("sgd step with nesterov momentum") {
  NamedTensors<double> params{{"w", TensorD::from_values({2}, (ArrayX<double>(2) << 1.0, -2.0).finished(), true)}};
  SgdOptimizer<double> opt(params, 0.9, true, 0.0);
  params[0].second.grad() << 0.5, 1.0;
  opt.step(0.1, 100.0);
  // v = g, w -= lr (g + mu v)
  CHECK(params[0].second.value()[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.9 * 0.5)));
  CHECK(params[0].second.value()[1] == doctest::Approx(-2.0 - 0.1 * (1.0 + 0.9 * 1.0)));
}

TEST_CASE("gradient clipping bounds the update") {
  NamedTensors<double> params{{"w", TensorD::zeros({2}, true)}};
  SgdOptimizer<double> opt(params, 0.0, false, 0.0);
  params[0].second.grad() << 30.0, 40.0;
  opt.step(1.0, 5.0);
  CHECK(params[0].second.value()[0] == doctest::Approx(-3.0));
  CHECK(params[0].second.value()[1] == doctest::Approx(-4.0));
}

TEST_CASE("patch sampler shapes and determinism") {
  const auto subjects = phantom_subjects(2, 1);
  std::vector<const Subject*> ptrs{&subjects[0], &subjects[1]};
  PatchSampler a(ptrs, {8, 8, 8}, 0.5, true, 7), b(ptrs, {8, 8, 8}, 0.5, true, 7);
  for (int i = 0; i < 3; ++i) {
    auto [xa, ta] = a.next(2);
    auto [xb, tb] = b.next(2);
    CHECK(xa.shape() == Shape{2, 4, 8, 8, 8});
    CHECK(ta.shape == Shape{2, 8, 8, 8});
    CHECK((xa.value() == xb.value()).all());
    CHECK(ta.classes == tb.classes);
  }
}

TEST_CASE("zero learning rate leaves weights untouched") {
  const auto subjects = phantom_subjects(3, 2);
  SegNetwork<float> net(tiny_plan(), 4);
  const auto before = to_checkpoint(net.parameters());
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 3;
  cfg.learning_rate = 0.0;
  FoldSplit fold{0, {"s0", "s1", "s2"}, {}};
  train_fold(net, fold, cfg, subjects);
  const auto after = to_checkpoint(net.parameters());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].values == after[i].values);
}

TEST_CASE("first step loss equals the loss on the initial weights") {
  const auto subjects = phantom_subjects(3, 3);
  SegNetwork<float> net(tiny_plan(), 4);
  auto initial = net.clone();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  cfg.seed = 5;
  FoldSplit fold{0, {"s0", "s1", "s2"}, {}};
  const auto res = train_fold(net, fold, cfg, subjects);
  REQUIRE(res.step_losses.size() == 2);

  PatchSampler sampler({&subjects[0], &subjects[1], &subjects[2]}, initial.plan().patch_size, cfg.foreground_fraction,
                       cfg.mirror_augment, cfg.seed);
  auto [x, t] = sampler.next(initial.plan().batch_size);
  const auto outs = initial.forward(x, true);
  const auto rep = deep_supervision_loss(outs, t, default_supervision_weights(static_cast<int>(outs.size()))).second;
  CHECK(res.step_losses[0] == doctest::Approx(rep.total).epsilon(1e-6));
}

TEST_CASE("training is reproducible and writes checkpoints") {
  testutil::TempDir dir("train");
  const auto subjects = phantom_subjects(3, 4);
  FoldSplit fold{0, {"s0", "s1", "s2"}, {}};
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 2;
  cfg.seed = 9;
  cfg.mirror_augment = true;
  std::string bytes[2];
  for (int r = 0; r < 2; ++r) {
    SegNetwork<float> net(tiny_plan(), 4, kClassCount, {.seed = 9});
    cfg.checkpoint_path = dir / ("ck" + std::to_string(r));
    const auto res = train_fold(net, fold, cfg, subjects);
    CHECK(res.epochs.size() == 2);
    for (const auto& e : res.epochs) CHECK(std::abs(e.total - e.dice_component - e.ce_component) < 1e-9);
    bytes[r] = testutil::slurp(*cfg.checkpoint_path);
  }
  CHECK(!bytes[0].empty());
  CHECK(bytes[0] == bytes[1]);

  FoldSplit unknown{0, {"nope"}, {}};
  SegNetwork<float> net(tiny_plan(), 4);
  CHECK_THROWS_AS(train_fold(net, unknown, cfg, subjects), UsageError);
}

TEST_CASE("divergence raises a training error") {
  const auto subjects = phantom_subjects(2, 5);
  SegNetwork<float> net(tiny_plan(), 4);
  net.parameters()[0].second.value()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 1;
  FoldSplit fold{0, {"s0", "s1"}, {}};
  CHECK_THROWS_AS(train_fold(net, fold, cfg, subjects), TrainingError);
}

TEST_CASE("gradient check on the tiny network") {
  const auto plan = tiny_plan();
  CHECK(plan.stage_count == 2);
  CHECK(plan.patch_size == Int3{8, 8, 8});
  const auto rep = grad_check(plan);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
  CHECK(!rep.groups.empty());
  const nlohmann::json j = rep;
  CHECK(j.contains("max_rel_error"));
  CHECK(j.contains("worst_parameter"));
}

TEST_CASE("gradient check on the transformer alone") {
  TransformerConfig cfg;
  cfg.embed_dim = 16;
  cfg.num_heads = 4;
  std::mt19937_64 rng(6);
  TransformerBlock<double> block(cfg, 8, rng, {});
  NamedTensors<double> params;
  block.collect(params, "t");
  auto x = random_tensor({1, 16, 2, 2, 2}, rng, false);
  auto r = random_tensor({1, 16, 2, 2, 2}, rng, false);
  const auto rep = grad_check([&] { return fdcheck::weighted_sum(block.forward(x, true), r); }, params);
  CHECK(rep.passed);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("gradient check with nothing to check") {
  NamedTensors<double> frozen{{"w", TensorD::zeros({2})}};
  const auto rep = grad_check([&] { return sum(frozen[0].second); }, frozen);
  CHECK(rep.passed);
  CHECK(rep.groups.empty());
}

TEST_CASE("gradient check reports a wrong gradient") {
  NamedTensors<double> params{{"w", TensorD::full({3}, 0.5, true)}};
  auto& w = params[0].second;
  const auto rep = grad_check(
      [&] {
        // Forward is w^2 summed, backward claims 3w.
        ArrayX<double> v(1);
        v[0] = (w.value() * w.value()).sum();
        return make_result<double>("bad", Shape{1}, v, {w}, [w](const Node<double>& self) mutable {
          w.grad() += 3.0 * self.grad[0] * w.value();
        });
      },
      params);
  CHECK_FALSE(rep.passed);
  CHECK(rep.worst_parameter == "w");
}
