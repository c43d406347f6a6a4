// mmseg: synthetic data, two-phase training, evaluation, prediction and gradient checks.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "mmseg/binary_io.hpp"
#include "mmseg/checkpoint.hpp"
#include "mmseg/config.hpp"
#include "mmseg/dataset.hpp"
#include "mmseg/gradcheck_suite.hpp"
#include "mmseg/metrics.hpp"

namespace fs = std::filesystem;
using namespace mmseg;

namespace {

constexpr int kGradcheckFailure = 4;

std::vector<Index> parse_dims(const std::string& text) {
  std::vector<Index> dims;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      dims.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("--dims expects D,H,W integers, got '" + text + "'");
    }
  }
  if (dims.size() != 3) throw UsageError("--dims expects D,H,W, got '" + text + "'");
  return dims;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir);
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string out;
  std::uint64_t count = 4;
  std::uint64_t seed = 0;
  std::string dims = "32,64,64";
};

int cmd_gen(const GenArgs& a) {
  const auto d = parse_dims(a.dims);
  generate_cases(a.out, a.count, a.seed, d[0], d[1], d[2]);
  std::printf("wrote %llu cases to %s\n", static_cast<unsigned long long>(a.count), a.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config, data, out;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<Index> phase1_steps, phase2_steps, batch_size;
  std::optional<double> lr_phase1, lr_phase2;
};

RunConfig resolve_config(const TrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  for (const auto& s : a.sets) {
    const auto kv = parse_key_values(s);
    if (kv.size() != 1) throw UsageError("--set expects key=value, got '" + s + "'");
    cfg.set(kv[0].first, kv[0].second);
  }
  if (a.seed) cfg.set("seed", std::to_string(*a.seed));
  if (a.phase1_steps) cfg.train.phase1_steps = *a.phase1_steps;
  if (a.phase2_steps) cfg.train.phase2_steps = *a.phase2_steps;
  if (a.batch_size) cfg.train.batch_size = *a.batch_size;
  if (a.lr_phase1) cfg.train.lr_phase1 = *a.lr_phase1;
  if (a.lr_phase2) cfg.train.lr_phase2 = *a.lr_phase2;
  if (!a.data.empty()) cfg.data_dir = a.data;
  if (!a.out.empty()) cfg.out_dir = a.out;
  if (cfg.data_dir.empty()) throw UsageError("no data directory (--data or data_dir)");
  if (cfg.out_dir.empty()) throw UsageError("no output directory (--out or out_dir)");
  cfg.validate();
  return cfg;
}

int cmd_train(const TrainArgs& a) {
  const RunConfig cfg = resolve_config(a);
  std::vector<TrainingCase> cases;
  for (const auto& files : find_cases(cfg.data_dir)) {
    cases.push_back(load_case(files, cfg.model.class_count));
    const auto& img = cases.back().image;
    if (img.modalities() != cfg.model.modality_count)
      throw ShapeError(files.image + " has " + std::to_string(img.modalities()) + " modalities, config expects " +
                       std::to_string(cfg.model.modality_count));
    if (img.height() % cfg.model.downsample() || img.width() % cfg.model.downsample())
      throw ShapeError(files.image + ": height and width must be multiples of " + std::to_string(cfg.model.downsample()));
  }
  const auto data = TrainingSet::from_cases(cases, cfg.train.sequence_length, cfg.train.sequence_stride, cfg.model.class_count);

  ensure_dir(cfg.out_dir);
  bin::write_file_atomic((fs::path(cfg.out_dir) / "config.txt").string(), cfg.to_text());

  const auto started = std::chrono::steady_clock::now();
  std::string log;
  const Index total = cfg.train.phase1_steps + cfg.train.phase2_steps;
  auto result = run_two_phase(cfg.train, cfg.model, init_params<float>(cfg.model), data, [&](const TrainLogRecord& r) {
    log += r.to_line() + "\n";
    if (r.step == 1 || r.step % 25 == 0 || r.step == total) std::fprintf(stderr, "%s\n", r.to_line().c_str());
  });
  bin::write_file_atomic((fs::path(cfg.out_dir) / "train.log").string(), log);
  save_checkpoint((fs::path(cfg.out_dir) / "model.mmck").string(), result.params, cfg.model);

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  std::printf("trained %lld steps on %zu sequences in %.1fs; wrote %s\n", static_cast<long long>(total),
              data.sequences.size(), secs, cfg.out_dir.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string model, data, report, config;
  bool truth_as_prediction = false;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig run;
  if (!a.config.empty()) run = load_run_config(a.config);
  Checkpoint ck;
  if (!a.truth_as_prediction) {
    ck = load_checkpoint(a.model);
    if (!a.config.empty() && !(run.model == ck.config))
      throw FormatError(FormatErrc::config_mismatch, "model in " + a.model + " was trained with a different model config");
  } else {
    ck.config = run.model;
  }
  for (const auto& r : run.regions) r.validate();

  ConfusionMatrix total(ck.config.class_count);
  for (const auto& files : find_cases(a.data)) {
    const auto c = load_case(files, ck.config.class_count);
    LabelTensor pred = c.labels.labels;
    if (!a.truth_as_prediction) {
      if (c.image.modalities() != ck.config.modality_count)
        throw ShapeError(files.image + ": modality count does not match the model");
      if (c.image.height() % ck.config.downsample() || c.image.width() % ck.config.downsample())
        throw ShapeError(files.image + ": height and width must be multiples of " + std::to_string(ck.config.downsample()));
      pred = predict_volume(ck.params, ck.config, c.image.data, ck.config.sequence_length);
    }
    total += confusion(pred, c.labels.labels, ck.config.class_count);
  }
  const std::string text = make_report(total, run.regions).to_text();
  bin::write_file_atomic(a.report, text);
  std::fputs(text.c_str(), stdout);
  return 0;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string model, volume, out;
};

int cmd_predict(const PredictArgs& a) {
  const Checkpoint ck = load_checkpoint(a.model);
  MultiModalVolume vol = read_modal_volume(a.volume);
  const Index step = ck.config.downsample();
  if (vol.height() % step || vol.width() % step)
    throw ShapeError("volume is " + std::to_string(vol.height()) + "x" + std::to_string(vol.width()) +
                     " in-plane; pad or crop height and width to multiples of " + std::to_string(step));
  if (vol.modalities() != ck.config.modality_count)
    throw ShapeError("volume has " + std::to_string(vol.modalities()) + " modalities, model expects " +
                     std::to_string(ck.config.modality_count));
  zscore_normalize(vol);
  LabelVolume out{predict_volume(ck.params, ck.config, vol.data, ck.config.sequence_length)};
  write_volume(a.out, out);
  std::printf("wrote %s (%s)\n", a.out.c_str(), shape_str(out.labels.shape()).c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::uint64_t seed = 0;
  double tol = 1e-4;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const auto report = run_gradcheck_suite(a.seed, a.tol);
  std::printf("%-40s %7s %8s %14s  %s\n", "check", "probes", "skipped", "max_rel_err", "result");
  int failures = 0;
  for (const auto& e : report.entries) {
    const bool ok = e.passed(a.tol);
    failures += !ok;
    std::printf("%-40s %7lld %8lld %14.6e  %s\n", e.name.c_str(), static_cast<long long>(e.probes),
                static_cast<long long>(e.rejected),
                e.finite ? e.max_rel_error : INFINITY, ok ? "PASS" : "FAIL");
  }
  std::printf("%zu checks, %d failed, tolerance %g, seed %llu\n", report.entries.size(), failures, a.tol,
              static_cast<unsigned long long>(a.seed));
  return failures ? kGradcheckFailure : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal slice-sequence segmentation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Write synthetic case pairs");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--count", gen.count, "Number of cases");
  g->add_option("--seed", gen.seed, "Generator seed");
  g->add_option("--dims", gen.dims, "Volume extents D,H,W");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Two-phase training");
  t->add_option("--config", train.config, "key = value config file")->check(CLI::ExistingFile);
  t->add_option("--data", train.data, "Directory of case pairs");
  t->add_option("--out", train.out, "Output directory");
  t->add_option("--set", train.sets, "Config override key=value (repeatable)");
  t->add_option("--seed", train.seed, "Seed for initialization and sampling");
  t->add_option("--phase1-steps", train.phase1_steps);
  t->add_option("--phase2-steps", train.phase2_steps);
  t->add_option("--batch-size", train.batch_size);
  t->add_option("--lr-phase1", train.lr_phase1);
  t->add_option("--lr-phase2", train.lr_phase2);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a case directory");
  e->add_option("--model", eval.model, "Checkpoint (.mmck)");
  e->add_option("--data", eval.data, "Directory of case pairs")->required();
  e->add_option("--report", eval.report, "Report output file")->required();
  e->add_option("--config", eval.config, "Config giving regions; its model keys must match the checkpoint")
      ->check(CLI::ExistingFile);
  e->add_flag("--truth-as-prediction", eval.truth_as_prediction, "Score the ground truth against itself");

  PredictArgs predict;
  auto* p = app.add_subcommand("predict", "Label one volume");
  p->add_option("--model", predict.model, "Checkpoint (.mmck)")->required();
  p->add_option("--volume", predict.volume, "Modal volume (.mmv)")->required();
  p->add_option("--out", predict.out, "Label volume output (.mmv)")->required();

  GradcheckArgs gc;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  c->add_option("--seed", gc.seed);
  c->add_option("--tol", gc.tol, "Relative tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(train);
    if (*e) {
      if (!eval.truth_as_prediction && eval.model.empty()) throw UsageError("eval needs --model (or --truth-as-prediction)");
      return cmd_eval(eval);
    }
    if (*p) return cmd_predict(predict);
    if (*c) return cmd_gradcheck(gc);
  } catch (const Error& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return err.exit_code();
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  }
  return 1;
}
