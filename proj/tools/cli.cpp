#include "cli.hpp"

#include "vsg/checkpoint.hpp"
#include "vsg/ensemble.hpp"
#include "vsg/error.hpp"
#include "vsg/metrics.hpp"
#include "vsg/network.hpp"
#include "vsg/planner.hpp"
#include "vsg/train.hpp"
#include "vsg/volio.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

namespace vsg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kImageSuffix = ".img.vsg";
constexpr const char* kLabelSuffix = ".seg.vsg";
constexpr const char* kProbSuffix = ".prob.vsg";
constexpr std::int64_t kDefaultBudget = 32LL * 32 * 32 * 4 * 2;

struct Run {
  std::string command;
  std::vector<std::string> args;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::object();
  std::uint64_t seed = 0;
  fs::path manifest;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

void write_json(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_file_atomic(path, j.dump(2) + "\n");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void finish(const Run& run) {
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
  json m{{"command", run.command},
         {"argv", run.args},
         {"config", run.config},
         {"inputs", run.inputs},
         {"outputs", run.outputs},
         {"seed", run.seed},
         {"tool_version", kToolVersion},
         {"wall_clock_seconds", seconds}};
  write_json(m, run.manifest);
}

fs::path manifest_for(const std::string& explicit_path, const fs::path& output, bool output_is_dir) {
  if (!explicit_path.empty()) return explicit_path;
  if (output_is_dir) return output / "manifest.json";
  return fs::path(output.string() + ".manifest.json");
}

std::vector<std::string> subject_ids(const fs::path& dir, const char* suffix) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::string> ids;
  const std::string sfx = suffix;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.is_regular_file() && name.size() > sfx.size() && name.ends_with(sfx))
      ids.push_back(name.substr(0, name.size() - sfx.size()));
  }
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) throw UsageError("no *" + sfx + " files in " + dir.string());
  return ids;
}

// Runs fn(i, worker) for i in [0, n) on up to `threads` workers; rethrows the first failure.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t, std::size_t)>& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i, w);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

NetworkPlan load_plan(const fs::path& p) { return read_json(p).get<NetworkPlan>(); }

int checkpoint_in_channels(const std::vector<CheckpointEntry>& entries) {
  for (const auto& e : entries)
    if (e.name == "enc0.conv0.weight" && e.shape.size() == 5) return static_cast<int>(e.shape[1]);
  throw ValidationError("checkpoint has no enc0.conv0.weight tensor");
}

// ---------------------------------------------------------------------------

struct PhantomArgs {
  std::string out;
  int count = 4;
  int grid = 32;
  float noise = 0.1f;
  std::uint64_t seed = 0;
};

void run_phantom(const PhantomArgs& a, Run& run, std::ostream& err) {
  const fs::path out = a.out;
  fs::create_directories(out);
  const auto specs = phantom_series(a.count, {a.grid, a.grid, a.grid}, a.seed, a.noise);
  json files = json::array();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%03zu", i);
    auto [vol, labels] = generate_phantom(specs[i]);
    write_volume(vol, out / (std::string(id) + kImageSuffix));
    write_label_map(labels, out / (std::string(id) + kLabelSuffix));
    files.push_back(id);
  }
  err << "wrote " << specs.size() << " phantom subjects to " << out.string() << "\n";
  run.seed = a.seed;
  run.config = {{"count", a.count}, {"grid", a.grid}, {"noise_sigma", a.noise}};
  run.outputs = {{"directory", out.string()}, {"subjects", files}};
}

struct FingerprintArgs {
  std::string data, out;
};

void run_fingerprint(const FingerprintArgs& a, Run& run, std::ostream& err) {
  std::vector<SubjectGeometry> geo;
  for (const auto& id : subject_ids(a.data, kImageSuffix)) {
    const Volume v = read_volume(fs::path(a.data) / (id + kImageSuffix));
    geo.push_back({v.dims, v.spacing, v.channels});
  }
  const auto fp = fingerprint_dataset(std::span<const SubjectGeometry>(geo));
  write_json(fp, a.out);
  err << "fingerprint of " << fp.subject_count << " subjects written to " << a.out << "\n";
  run.inputs = {{"data", a.data}};
  run.outputs = {{"fingerprint", a.out}};
}

struct PlanArgs {
  std::string fingerprint, out;
  std::int64_t budget = kDefaultBudget;
  PlannerOptions opts;
  bool no_residual = false;
  std::string positional = "learned";
};

void run_plan(PlanArgs a, Run& run, std::ostream& err) {
  const auto fp = read_json(a.fingerprint).get<DatasetFingerprint>();
  a.opts.residual_connection = !a.no_residual;
  if (a.positional == "none")
    a.opts.positional_encoding = PositionalEncoding::None;
  else if (a.positional != "learned")
    throw UsageError("--positional must be 'learned' or 'none'");
  const auto plan = make_plan(fp, a.budget, a.opts);
  write_json(plan, a.out);
  err << "plan: patch " << plan.patch_size[0] << "x" << plan.patch_size[1] << "x" << plan.patch_size[2] << ", "
      << plan.stage_count << " stages, batch " << plan.batch_size << "\n";
  run.config = {{"budget", a.budget},
                {"base_channels", a.opts.base_channels},
                {"max_channels", a.opts.max_channels},
                {"num_heads", a.opts.num_heads},
                {"num_layers", a.opts.num_layers},
                {"mlp_ratio", a.opts.mlp_ratio},
                {"positional", a.positional},
                {"residual", a.opts.residual_connection}};
  run.inputs = {{"fingerprint", a.fingerprint}};
  run.outputs = {{"plan", a.out}};
}

struct TrainArgs {
  std::string plan, data, out, log;
  int fold = 0;
  int folds = 5;
  std::uint64_t seed = 0;
  TrainConfig cfg;
  bool deterministic = false;
  bool mirror = false;
};

void run_train(TrainArgs a, Run& run, std::ostream& err) {
  const NetworkPlan plan = load_plan(a.plan);
  std::vector<Subject> subjects;
  for (const auto& id : subject_ids(a.data, kImageSuffix)) {
    Subject s{id, standardize_intensity(read_volume(fs::path(a.data) / (id + kImageSuffix))),
              read_label_map(fs::path(a.data) / (id + kLabelSuffix))};
    if (s.image.dims != s.labels.dims) throw ValidationError("subject '" + id + "': image and labels differ in shape");
    subjects.push_back(std::move(s));
  }
  std::vector<std::string> ids;
  for (const auto& s : subjects) ids.push_back(s.id);
  FoldSplit split;
  if (a.fold < 0) {
    split.fold_index = -1;
    split.train_subject_ids = ids;
  } else {
    if (a.fold >= a.folds) throw UsageError("--fold must be < --folds");
    split = make_folds(ids, a.folds, a.seed)[static_cast<std::size_t>(a.fold)];
  }
  a.cfg.seed = a.seed;
  a.cfg.fold_count = a.folds;
  a.cfg.mirror_augment = a.mirror;
  a.cfg.checkpoint_path = a.out;
  NetworkOptions nopts;
  nopts.seed = a.seed;
  SegNetwork<float> net(plan, static_cast<int>(subjects.front().image.channels), kClassCount, nopts);
  err << "training fold " << split.fold_index << " on " << split.train_subject_ids.size() << " subjects, "
      << net.parameter_count() << " parameters\n";
  const auto result = train_fold(net, split, a.cfg, subjects);
  for (std::size_t e = 0; e < result.epochs.size(); ++e)
    err << "epoch " << e << " loss " << result.epochs[e].total << "\n";
  json log{{"fold", split.fold_index},
           {"train_subject_ids", split.train_subject_ids},
           {"val_subject_ids", split.val_subject_ids},
           {"epochs", result.epochs},
           {"step_losses", result.step_losses}};
  const std::string log_path = a.log.empty() ? a.out + ".log.json" : a.log;
  write_json(log, log_path);
  run.seed = a.seed;
  run.config = {{"fold", a.fold},
                {"folds", a.folds},
                {"epochs", a.cfg.epochs},
                {"steps_per_epoch", a.cfg.steps_per_epoch},
                {"learning_rate", a.cfg.learning_rate},
                {"momentum", a.cfg.momentum},
                {"weight_decay", a.cfg.weight_decay},
                {"batch_size", a.cfg.batch_size},
                {"mirror", a.mirror},
                {"deterministic", a.deterministic}};
  run.inputs = {{"plan", a.plan}, {"data", a.data}};
  run.outputs = {{"checkpoint", a.out}, {"log", log_path}};
}

struct PredictArgs {
  std::string plan, checkpoint, data, out;
  double overlap = 0.5;
  bool probabilities = false;
  int threads = 1;
};

void run_predict(const PredictArgs& a, Run& run, std::ostream& err) {
  const NetworkPlan plan = load_plan(a.plan);
  const auto entries = read_checkpoint(a.checkpoint);
  SegNetwork<float> net(plan, checkpoint_in_channels(entries));
  load_checkpoint(entries, net.parameters());
  const auto ids = subject_ids(a.data, kImageSuffix);
  fs::create_directories(a.out);
  std::vector<SegNetwork<float>> nets;
  for (int t = 0; t < std::max(1, a.threads); ++t) nets.push_back(net.clone());
  parallel_for(ids.size(), a.threads, [&](std::size_t i, std::size_t worker) {
    SegNetwork<float>* mine = &nets[worker];
    const Volume img = standardize_intensity(read_volume(fs::path(a.data) / (ids[i] + kImageSuffix)));
    const Volume probs = predict_probabilities(*mine, img, PredictOptions{a.overlap});
    write_label_map(probabilities_to_labels(probs), fs::path(a.out) / (ids[i] + kLabelSuffix));
    if (a.probabilities) write_volume(probs, fs::path(a.out) / (ids[i] + kProbSuffix));
  });
  err << "predicted " << ids.size() << " subjects into " << a.out << "\n";
  run.config = {{"overlap", a.overlap}, {"probabilities", a.probabilities}, {"threads", a.threads}};
  run.inputs = {{"plan", a.plan}, {"checkpoint", a.checkpoint}, {"data", a.data}};
  run.outputs = {{"directory", a.out}, {"subjects", ids}};
}

struct EvaluateArgs {
  std::string pred, truth, out;
  double percentile = kDefaultHdPercentile;
  int threads = 1;
};

void run_evaluate(const EvaluateArgs& a, Run& run, std::ostream& err) {
  const auto ids = subject_ids(a.truth, kLabelSuffix);
  std::vector<SubjectReport> reports(ids.size());
  parallel_for(ids.size(), a.threads, [&](std::size_t i, std::size_t) {
    const LabelMap gt = read_label_map(fs::path(a.truth) / (ids[i] + kLabelSuffix));
    const LabelMap pred = read_label_map(fs::path(a.pred) / (ids[i] + kLabelSuffix));
    reports[i] = evaluate_subject(pred, gt, gt.spacing, a.percentile, ids[i]);
  });
  const SubjectReport mean = aggregate_reports(reports);
  write_json(json{{"subjects", reports}, {"aggregate", mean}}, a.out);
  err << "mean dice " << mean.mean_dice << ", mean hd" << a.percentile << " " << mean.mean_hd << "\n";
  run.config = {{"percentile", a.percentile}, {"threads", a.threads}};
  run.inputs = {{"pred", a.pred}, {"truth", a.truth}};
  run.outputs = {{"report", a.out}};
}

struct EnsembleArgs {
  std::string manifest, out, strategy;
};

// Manifest layout:
//   {"strategy": "mode", "weights": {"A": 2},
//    "subjects": [{"id": "s1", "predictions": {"A": "a/s1.seg.vsg", ...},
//                  "probabilities": {...}}],
//    "threshold": {...}, "ground_truth": {"s1": "gt/s1.seg.vsg"}}
// Relative paths resolve against the manifest's directory.
void run_ensemble(const EnsembleArgs& a, Run& run, std::ostream& err) {
  const json m = read_json(a.manifest);
  const fs::path base = fs::path(a.manifest).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };
  const std::string strategy_name = a.strategy.empty() ? m.at("strategy").get<std::string>() : a.strategy;
  const bool oracle = strategy_name == "oracle";
  const FusionStrategy strategy = oracle ? FusionStrategy::Mode : parse_strategy(strategy_name);
  const auto weights = m.value("weights", std::map<std::string, int>{});
  ThresholdRule rule;
  if (m.contains("threshold")) rule = m.at("threshold").get<ThresholdRule>();

  std::vector<EnsembleInput> inputs;
  for (const auto& s : m.at("subjects")) {
    EnsembleInput in;
    in.subject_id = s.at("id").get<std::string>();
    for (const auto& [model, path] : s.at("predictions").items())
      in.predictions[model] = read_label_map(resolve(path.get<std::string>()));
    if (s.contains("probabilities"))
      for (const auto& [model, path] : s.at("probabilities").items())
        in.probabilities[model] = read_volume(resolve(path.get<std::string>()));
    for (const auto& [model, w] : weights)
      if (in.predictions.count(model)) in.weights[model] = w;
    inputs.push_back(std::move(in));
  }

  fs::create_directories(a.out);
  json log = json::array();
  if (oracle) {
    std::map<std::string, LabelMap> gt;
    for (const auto& [id, path] : m.at("ground_truth").items()) gt[id] = read_label_map(resolve(path.get<std::string>()));
    for (const auto& [id, choice] : oracle_select(inputs, gt)) {
      write_label_map(choice.prediction, fs::path(a.out) / (id + kLabelSuffix));
      log.push_back({{"subject_id", id}, {"chosen_model", choice.model}, {"mean_dice", choice.mean_dice}});
    }
  } else {
    for (const auto& in : inputs) {
      LabelMap fused;
      switch (strategy) {
        case FusionStrategy::Mode: fused = fuse_mode(in); break;
        case FusionStrategy::Average: fused = fuse_average(in); break;
        case FusionStrategy::Median: fused = fuse_median(in); break;
        case FusionStrategy::Threshold: {
          ThresholdDecision d;
          fused = fuse_threshold(in, rule, &d);
          log.push_back(d);
          break;
        }
      }
      if (strategy != FusionStrategy::Threshold) log.push_back({{"subject_id", in.subject_id}});
      write_label_map(fused, fs::path(a.out) / (in.subject_id + kLabelSuffix));
    }
  }
  const fs::path log_path = fs::path(a.out) / "decisions.json";
  write_json(json{{"strategy", strategy_name}, {"threshold", rule}, {"weights", weights}, {"subjects", log}}, log_path);
  err << strategy_name << " fusion of " << inputs.size() << " subjects written to " << a.out << "\n";
  run.config = {{"strategy", strategy_name}, {"weights", weights}, {"threshold", rule}};
  run.inputs = {{"manifest", a.manifest}};
  run.outputs = {{"directory", a.out}, {"decision_log", log_path.string()}};
}

struct GradcheckArgs {
  std::string out;
  double tolerance = 1e-4;
  std::int64_t entries = 24;
  std::uint64_t seed = 0;
};

bool run_gradcheck(const GradcheckArgs& a, Run& run, std::ostream& err) {
  GradCheckOptions opts;
  opts.tolerance = a.tolerance;
  opts.max_entries_per_tensor = a.entries;
  opts.seed = a.seed;
  const auto report = grad_check(tiny_plan(), opts);
  err << "gradcheck: max relative error " << report.max_rel_error << " (" << report.worst_parameter << "), tolerance "
      << report.tolerance << " -> " << (report.passed ? "pass" : "FAIL") << "\n";
  if (!a.out.empty()) {
    write_json(report, a.out);
    run.outputs = {{"report", a.out}};
  }
  run.seed = a.seed;
  run.config = {{"tolerance", a.tolerance}, {"entries_per_tensor", a.entries}, {"plan", tiny_plan()}};
  return report.passed;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& err) {
  CLI::App app{"Volumetric segmentation toolkit", "vsg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  std::string manifest;
  int threads = 1;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--run-manifest", manifest, "Run manifest path (default next to the output)");
    sub->add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);
  };

  PhantomArgs ph;
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic nested-sphere dataset");
  phantom->add_option("--out", ph.out, "Output directory")->required();
  phantom->add_option("--count", ph.count, "Number of subjects")->check(CLI::PositiveNumber);
  phantom->add_option("--grid", ph.grid, "Cubic grid extent")->check(CLI::Range(8, 512));
  phantom->add_option("--noise", ph.noise, "Gaussian noise sigma");
  phantom->add_option("--seed", ph.seed, "Random seed");
  common(phantom);

  FingerprintArgs fpa;
  auto* fingerprint = app.add_subcommand("fingerprint", "Summarize dataset geometry");
  fingerprint->add_option("--data", fpa.data, "Data directory")->required();
  fingerprint->add_option("--out", fpa.out, "Fingerprint JSON")->required();
  common(fingerprint);

  PlanArgs pa;
  auto* plan = app.add_subcommand("plan", "Derive a network plan from a fingerprint");
  plan->add_option("--fingerprint", pa.fingerprint, "Fingerprint JSON")->required();
  plan->add_option("--out", pa.out, "Plan JSON")->required();
  plan->add_option("--budget", pa.budget, "Memory budget in voxels (patch voxels x channels x batch)");
  plan->add_option("--base-channels", pa.opts.base_channels);
  plan->add_option("--max-channels", pa.opts.max_channels);
  plan->add_option("--num-heads", pa.opts.num_heads);
  plan->add_option("--num-layers", pa.opts.num_layers, "Transformer layers (0 disables the transformer)");
  plan->add_option("--mlp-ratio", pa.opts.mlp_ratio);
  plan->add_option("--positional", pa.positional, "learned | none");
  plan->add_flag("--no-residual", pa.no_residual, "Drop the residual around the transformer");
  common(plan);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train one cross-validation fold");
  train->add_option("--plan", ta.plan, "Plan JSON")->required();
  train->add_option("--data", ta.data, "Data directory")->required();
  train->add_option("--out", ta.out, "Checkpoint path")->required();
  train->add_option("--log", ta.log, "Training log JSON (default <out>.log.json)");
  train->add_option("--fold", ta.fold, "Fold index; -1 trains on every subject");
  train->add_option("--folds", ta.folds, "Fold count");
  train->add_option("--seed", ta.seed);
  train->add_option("--epochs", ta.cfg.epochs);
  train->add_option("--steps-per-epoch", ta.cfg.steps_per_epoch);
  train->add_option("--lr", ta.cfg.learning_rate);
  train->add_option("--momentum", ta.cfg.momentum);
  train->add_option("--weight-decay", ta.cfg.weight_decay);
  train->add_option("--batch-size", ta.cfg.batch_size, "0 uses the plan's batch size");
  train->add_flag("--mirror", ta.mirror, "Random flips");
  train->add_flag("--deterministic", ta.deterministic, "Single-threaded, bitwise reproducible");
  common(train);

  PredictArgs pr;
  auto* predict = app.add_subcommand("predict", "Sliding-window inference");
  predict->add_option("--plan", pr.plan)->required();
  predict->add_option("--checkpoint", pr.checkpoint)->required();
  predict->add_option("--data", pr.data, "Directory of *.img.vsg")->required();
  predict->add_option("--out", pr.out, "Output directory")->required();
  predict->add_option("--overlap", pr.overlap)->check(CLI::Range(0.0, 0.95));
  predict->add_flag("--probabilities", pr.probabilities, "Also write *.prob.vsg");
  common(predict);

  EvaluateArgs ev;
  auto* evaluate = app.add_subcommand("evaluate", "Dice and Hausdorff per region");
  evaluate->add_option("--pred", ev.pred, "Prediction directory")->required();
  evaluate->add_option("--truth", ev.truth, "Ground-truth directory")->required();
  evaluate->add_option("--out", ev.out, "Report JSON")->required();
  evaluate->add_option("--percentile", ev.percentile)->check(CLI::Range(1e-9, 100.0));
  common(evaluate);

  EnsembleArgs en;
  auto* ensemble = app.add_subcommand("ensemble", "Fuse predictions of several models");
  ensemble->add_option("--manifest", en.manifest, "Ensemble manifest JSON")->required();
  ensemble->add_option("--out", en.out, "Output directory")->required();
  ensemble->add_option("--strategy", en.strategy, "mode | average | median | threshold | oracle");
  common(ensemble);

  GradcheckArgs ga;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check on a tiny network");
  gradcheck->add_option("--tolerance", ga.tolerance);
  gradcheck->add_option("--entries", ga.entries, "Entries per tensor (0 = all)");
  gradcheck->add_option("--seed", ga.seed);
  gradcheck->add_option("--out", ga.out, "Report JSON");
  common(gradcheck);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, std::cout, err);
      return 0;
    }
    app.exit(e, err, err);
    return 1;
  }

  Run run;
  run.args = args;
  run.command = app.get_subcommands().front()->get_name();
  try {
    bool ok = true;
    if (phantom->parsed()) {
      run.manifest = manifest_for(manifest, ph.out, true);
      run_phantom(ph, run, err);
    } else if (fingerprint->parsed()) {
      run.manifest = manifest_for(manifest, fpa.out, false);
      run_fingerprint(fpa, run, err);
    } else if (plan->parsed()) {
      run.manifest = manifest_for(manifest, pa.out, false);
      run_plan(pa, run, err);
    } else if (train->parsed()) {
      run.manifest = manifest_for(manifest, ta.out, false);
      if (ta.deterministic) threads = 1;
      run_train(ta, run, err);
    } else if (predict->parsed()) {
      run.manifest = manifest_for(manifest, pr.out, true);
      pr.threads = threads;
      run_predict(pr, run, err);
    } else if (evaluate->parsed()) {
      run.manifest = manifest_for(manifest, ev.out, false);
      ev.threads = threads;
      run_evaluate(ev, run, err);
    } else if (ensemble->parsed()) {
      run.manifest = manifest_for(manifest, en.out, true);
      run_ensemble(en, run, err);
    } else if (gradcheck->parsed()) {
      run.manifest = manifest_for(manifest, ga.out.empty() ? fs::path("gradcheck") : fs::path(ga.out), false);
      ok = run_gradcheck(ga, run, err);
    }
    run.config["threads"] = threads;
    finish(run);
    return ok ? 0 : 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 2;
  }
}

int dispatch(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args, std::cerr);
}

}  // namespace vsg::cli
