#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <optional>
#include <stdexcept>

#include "etide/config.hpp"
#include "etide/events.hpp"
#include "etide/gradcheck_suite.hpp"
#include "etide/io_error.hpp"
#include "etide/metrics.hpp"
#include "etide/model.hpp"
#include "etide/training.hpp"

namespace etide::cli {

namespace fs = std::filesystem;

namespace {

/// Raised for command-level checks that fail before any output is written.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::pair<int, int> parse_size(const std::string& text) {
  const auto x = text.find_first_of("xX");
  if (x == std::string::npos) throw ValidationError("size '" + text + "' is not HxW");
  const int h = parse_int("size", text.substr(0, x));
  const int w = parse_int("size", text.substr(x + 1));
  return {h, w};
}

// "N" or "MIN-MAX"
std::pair<int, int> parse_objects(const std::string& text) {
  const auto dash = text.find('-');
  if (dash == std::string::npos) {
    const int n = parse_int("objects", text);
    return {n, n};
  }
  return {parse_int("objects", text.substr(0, dash)), parse_int("objects", text.substr(dash + 1))};
}

void require_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("data directory " + dir.string() + " does not exist");
}

void require_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw IoError(path.string() + " does not exist");
}

void check_shapes(const ModelConfig& m, const Dataset& data, const std::string& what) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data.samples[i];
    if (s.input.steps() != m.t_in || s.target.steps() != m.t_out || s.input.height() != m.height ||
        s.input.width() != m.width)
      throw ValidationError(what + " sample " + std::to_string(i) + " does not match the model's " +
                            std::to_string(m.t_in) + "->" + std::to_string(m.t_out) + " frames at " +
                            std::to_string(m.height) + "x" + std::to_string(m.width));
  }
}

// ---- commands ----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  int sequences = 200;
  int frames = 10;
  std::string size = "128x128";
  std::string sensor;
  std::string objects = "1-3";
  std::int64_t min_active = 1;
};

int cmd_synth(const SynthArgs& a, std::uint64_t seed, std::ostream& out) {
  SynthConfig cfg;
  cfg.sequences = a.sequences;
  cfg.t_in = cfg.t_out = a.frames;
  std::tie(cfg.height, cfg.width) = parse_size(a.size);
  std::tie(cfg.sensor_height, cfg.sensor_width) =
      a.sensor.empty() ? std::pair{cfg.height, cfg.width} : parse_size(a.sensor);
  std::tie(cfg.min_objects, cfg.max_objects) = parse_objects(a.objects);
  cfg.min_active = a.min_active;
  cfg.seed = seed;
  cfg.validate();
  const auto data = synth_dataset(cfg);
  write_dataset(a.out, data);
  out << "synth sequences=" << data.size() << " frames=" << a.frames << " size=" << cfg.height << "x" << cfg.width
      << " seed=" << seed << " out=" << a.out << "\n";
  return kOk;
}

struct TrainArgs {
  std::string data;
  std::string config;
  std::string out;
  std::string resume;
};

int cmd_train(const TrainArgs& a, std::optional<std::uint64_t> seed, std::ostream& out) {
  require_dir(a.data);
  require_file(a.config);
  auto cfg = TrainConfig::load(a.config);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  auto [train_data, val_data] = split_validation(load_dataset(a.data), cfg.val_split);
  if (train_data.empty()) throw ValidationError("no training samples in " + a.data);
  check_shapes(cfg.model, train_data, "training");
  check_shapes(cfg.model, val_data, "validation");

  TrainState state;
  if (!a.resume.empty()) {
    require_file(a.resume);
    state = load_state(a.resume);
    if (!(state.model.config == cfg.model)) throw ValidationError("--resume checkpoint was trained with another model config");
    if (state.epoch > cfg.epochs) throw ValidationError("--resume checkpoint is past the configured epoch count");
    out << "resume epoch=" << state.epoch << " step=" << state.adam.step << "\n";
  } else {
    state = fresh_state(cfg);
  }
  out << "train samples=" << train_data.size() << " val=" << val_data.size()
      << " params=" << count_params(state.model) << " seed=" << cfg.seed << "\n";
  out.flush();

  TrainHooks hooks;
  hooks.checkpoint = fs::path(a.out);
  hooks.on_epoch = [&](const EpochRecord& r) { out << r.record() << "\n" << std::flush; };
  train(state, train_data, val_data, cfg, hooks);
  out << "checkpoint " << a.out << "\n";
  return kOk;
}

struct PredictArgs {
  std::string ckpt;
  std::string in;
  std::string out;
  std::string probs;
};

int cmd_predict(const PredictArgs& a, std::ostream& out) {
  require_file(a.ckpt);
  require_file(a.in);
  const auto model = load_checkpoint(a.ckpt);
  const auto input = read_ocm(a.in);
  const auto& m = model.config;
  if (input.steps() != m.t_in || input.channels() != 2 || input.height() != m.height || input.width() != m.width)
    throw ValidationError(a.in + " does not match the model's input window");
  const auto probs = predict(model, input);
  OccurrenceTensor binary{binarize(probs.probs), probs.t0, probs.bin_duration};
  const fs::path prob_path = a.probs.empty() ? fs::path(a.out + ".prob") : fs::path(a.probs);
  write_probability_ocm(prob_path, probs);
  write_ocm(a.out, binary);
  out << "predict frames=" << binary.steps() << " active=" << binary.count_ones() << " out=" << a.out
      << " probs=" << prob_path.string() << "\n";
  return kOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  bool grid = false;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.ckpt);
  require_dir(a.data);
  const auto model = load_checkpoint(a.ckpt);
  const auto data = load_dataset(a.data);
  if (data.empty()) throw ValidationError("no samples in " + a.data);
  check_shapes(model.config, data, "evaluation");
  const auto r = rollout_eval(model, data, a.grid, true);
  out << r.model.record("") << "\n";
  out << r.persistence.record("persistence_") << "\n";
  for (const auto& [t, rep] : r.grid) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "threshold=%.1f iou_on=%.6f iou_off=%.6f miou=%.6f aiou=%.6f", t, rep.iou_on,
                  rep.iou_off, rep.miou, rep.aiou);
    out << buf << "\n";
  }
  return kOk;
}

int cmd_gradcheck(bool full, std::ostream& out) {
  bool ok = true;
  double worst = 0;
  auto report = [&](const GradCheckCase& c) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "gradcheck case=%s seed=%llu max_rel_err=%.3e checked=%zu %s", c.name.c_str(),
                  static_cast<unsigned long long>(c.seed), c.result.max_rel_error, c.result.checked,
                  c.passed() ? "PASS" : "FAIL");
    out << buf;
    if (!c.passed()) out << " worst=" << c.result.worst_param << "[" << c.result.worst_index << "]";
    out << "\n" << std::flush;
    ok = ok && c.passed();
    worst = std::max(worst, c.result.max_rel_error);
  };
  for (const auto& c : run_op_gradchecks()) report(c);
  if (full)
    for (std::uint64_t s = 0; s < 5; ++s) report(run_model_gradcheck(s));
  char buf[96];
  std::snprintf(buf, sizeof buf, "gradcheck max_rel_err=%.3e tolerance=%.0e %s", worst, kGradTolerance,
                ok ? "PASS" : "FAIL");
  out << buf << "\n";
  return ok ? kOk : kValidation;
}

struct BenchArgs {
  std::string config;
  int iterations = 50;
  int warmup = 3;
};

int cmd_bench(const BenchArgs& a, std::uint64_t seed, std::ostream& out) {
  require_file(a.config);
  // Model keys may sit alone or inside a full training config.
  const auto kv = KeyValues::load(a.config);
  const auto cfg = TrainConfig::from(kv).model;
  if (a.iterations < 1 || a.warmup < 0) throw ValidationError("bench needs iterations >= 1 and warmup >= 0");
  const auto model = init_params<float>(cfg, seed);
  out << benchmark(model, a.iterations, a.warmup, seed).record() << "\n";
  return kOk;
}

int cmd_inspect(const std::string& ckpt, std::ostream& out) {
  require_file(ckpt);
  const auto model = load_checkpoint(ckpt);
  std::int64_t total = 0;
  for (const auto* p : model.parameters()) {
    out << p->name << " [";
    const auto& s = p->value.shape();
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
    out << "] " << p->value.size() << "\n";
    total += static_cast<std::int64_t>(p->value.size());
  }
  KeyValues kv;
  model.config.write(kv);
  for (const auto& [k, v] : kv.items()) out << "config " << k << "=" << v << "\n";
  out << "total_params=" << total << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Event occurrence-map forecaster", "etide"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random draw (default 0)");

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Write a synthetic moving-bar dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--sequences", synth.sequences, "Number of sequences")->capture_default_str();
  s->add_option("--frames", synth.frames, "Frames in the input and in the target window")->capture_default_str();
  s->add_option("--size", synth.size, "Frame size HxW")->capture_default_str();
  s->add_option("--sensor", synth.sensor, "Simulated sensor HxW; crops an active window when larger than --size");
  s->add_option("--objects", synth.objects, "Bars per scene, N or MIN-MAX")->capture_default_str();
  s->add_option("--min-active", synth.min_active, "Minimum events in a cropped window")->capture_default_str();

  TrainArgs train_args;
  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--data", train_args.data, "Dataset directory")->required();
  t->add_option("--config", train_args.config, "key=value training config")->required();
  t->add_option("--out", train_args.out, "Checkpoint path")->required();
  t->add_option("--resume", train_args.resume, "Continue from this checkpoint");

  PredictArgs pred;
  auto* p = app.add_subcommand("predict", "Forecast one input window");
  p->add_option("--ckpt", pred.ckpt, "Checkpoint")->required();
  p->add_option("--in", pred.in, "Input OCM1 window")->required();
  p->add_option("--out", pred.out, "Binarized OCM1 forecast")->required();
  p->add_option("--probs", pred.probs, "Probability sidecar (default <out>.prob)");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint against a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_flag("--threshold-grid", ev.grid, "Add IoU at fixed thresholds 0.1..0.9");

  bool full = false;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  g->add_flag("--full", full, "Include the end-to-end model check");

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Batch-1 forward latency");
  b->add_option("--config", bench.config, "key=value model config")->required();
  b->add_option("--iterations", bench.iterations, "Timed forwards")->capture_default_str();
  b->add_option("--warmup", bench.warmup, "Untimed forwards")->capture_default_str();

  std::string inspect_ckpt;
  auto* i = app.add_subcommand("inspect", "List checkpoint parameters");
  i->add_option("--ckpt", inspect_ckpt, "Checkpoint")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }
  const bool seed_given = app.count("--seed") > 0;

  try {
    if (s->parsed()) return cmd_synth(synth, seed, out);
    if (t->parsed()) return cmd_train(train_args, seed_given ? std::optional(seed) : std::nullopt, out);
    if (p->parsed()) return cmd_predict(pred, out);
    if (e->parsed()) return cmd_eval(ev, out);
    if (g->parsed()) return cmd_gradcheck(full, out);
    if (b->parsed()) return cmd_bench(bench, seed, out);
    if (i->parsed()) return cmd_inspect(inspect_ckpt, out);
  } catch (const IoError& ex) {
    err << "error: " << ex.what() << "\n";
    return kIo;
  } catch (const ValidationError& ex) {
    err << "error: " << ex.what() << "\n";
    return kValidation;
  } catch (const std::invalid_argument& ex) {
    err << "error: " << ex.what() << "\n";
    return kValidation;
  } catch (const std::filesystem::filesystem_error& ex) {
    err << "error: " << ex.what() << "\n";
    return kIo;
  }
  return kUsage;
}

}  // namespace etide::cli
