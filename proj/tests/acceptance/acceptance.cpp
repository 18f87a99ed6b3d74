// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only when all pass.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "etide/events.hpp"
#include "etide/gradcheck_suite.hpp"
#include "etide/kernels.hpp"
#include "etide/losses.hpp"
#include "etide/metrics.hpp"
#include "etide/model.hpp"
#include "etide/training.hpp"

using namespace etide;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + ("failed: " + what);
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("etide_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// ---- 1 ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0;
  std::size_t cases = 0;
  auto take = [&](const GradCheckCase& c) {
    ++cases;
    worst = std::max(worst, c.result.max_rel_error);
    o.require(c.passed(), c.name + " seed " + std::to_string(c.seed) + " rel err " + fmt("%.2e", c.result.max_rel_error));
  };
  for (const auto& c : run_op_gradchecks()) take(c);
  const auto tiny = tiny_model_config();
  o.require(tiny.t_in == 3 && tiny.t_out == 3 && tiny.step_channels == 2 && tiny.blocks == 1 && tiny.height == 8 &&
                tiny.width == 8 && tiny.drop_path == 0.0,
            "tiny config");
  for (std::uint64_t s = 0; s < 5; ++s) take(run_model_gradcheck(s));
  const double secs = seconds_since(t0);
  o.require(secs < 120.0, "runtime under 2 min");
  o.note(std::to_string(cases) + " cases, max rel err " + fmt("%.2e", worst) + ", " + fmt("%.1f s", secs));
  return o;
}

// ---- 2 ---------------------------------------------------------------------------

Outcome structural_invariants() {
  Outcome o;
  const ModelConfig cfg;  // default hyperparameters
  auto model = init_params<double>(cfg, 1);
  SeededRng rng(2);
  const auto D = cfg.packed_channels();
  const int h = static_cast<int>(cfg.latent_height()), w = static_cast<int>(cfg.latent_width());

  {  // (a) zero in, zero out with the initial zero biases
    Graph<double> g(false);
    const auto y = tide_core(cfg, model.blocks[0], g.constant(Tensor<double>(Shape{2, D, h, w})), static_cast<TideCoreTrace<double>*>(nullptr)).value();
    bool zero = true;
    for (auto v : y.data()) zero = zero && v == 0.0;
    o.require(zero, "(a) tide_core(0) = 0");
  }
  {  // (b), (c) on random latents
    Tensor<double> u(Shape{3, D, h, w});
    for (auto& v : u.data()) v = rng.uniform(-2, 2);
    Graph<double> g(false);
    TideCoreTrace<double> trace;
    tide_core(cfg, model.blocks[0], g.constant(u), &trace);
    bool open = true;
    for (auto v : trace.gate.data()) open = open && v > 0.0 && v < 1.0;
    o.require(open, "(b) gate in (0,1)");
    const auto need = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor((1.0 - cfg.mask_quantile) * h * w)));
    bool covered = !trace.mask_count.empty();
    for (auto n : trace.mask_count) covered = covered && n >= need;
    o.require(covered, "(c) mask count >= " + std::to_string(need));
    o.note("mask counts " + std::to_string(trace.mask_count.front()) + " of " + std::to_string(h * w));
  }
  {  // (d) stacked mixing receptive field
    const int n = 41, c = n / 2;
    Tensor<double> x(Shape{1, 1, n, n});
    x[static_cast<std::size_t>(c * n + c)] = 1.0;
    Graph<double> g(false);
    auto k1 = g.constant(Tensor<double>(Shape{1, 1, cfg.mix_kernel1, cfg.mix_kernel1}, 1.0));
    auto k2 = g.constant(Tensor<double>(Shape{1, 1, cfg.mix_kernel2, cfg.mix_kernel2}, 1.0));
    const int r1 = cfg.mix_kernel1 / 2, r2 = cfg.mix_dilation * (cfg.mix_kernel2 / 2);
    auto y = conv2d_depthwise(conv2d_depthwise(g.constant(x), k1, 1, r1), k2, cfg.mix_dilation, r2).value();
    int lo_r = n, hi_r = -1, lo_c = n, hi_c = -1, nonzero = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        if (y[static_cast<std::size_t>(i * n + j)] != 0.0) {
          ++nonzero;
          lo_r = std::min(lo_r, i), hi_r = std::max(hi_r, i), lo_c = std::min(lo_c, j), hi_c = std::max(hi_c, j);
        }
    const int extent_r = hi_r - lo_r + 1, extent_c = hi_c - lo_c + 1;
    o.require(extent_r == 23 && extent_c == 23 && nonzero == 23 * 23, "(d) impulse support 23x23");
    o.note("support " + std::to_string(extent_r) + "x" + std::to_string(extent_c));
  }
  {  // (e)
    Tensor<double> e(Shape{2 * cfg.t_in, cfg.step_channels, h, w});
    for (auto& v : e.data()) v = rng.uniform(-1, 1);
    Graph<double> g(false);
    const auto back = unpack_time(pack_time(g.constant(e), cfg.t_in), cfg.t_in).value();
    o.require(back == e, "(e) pack/unpack round trip");
  }
  return o;
}

// ---- 3 ---------------------------------------------------------------------------

Outcome default_config_audit() {
  Outcome o;
  const ModelConfig cfg;
  o.require(cfg.blocks == 4 && cfg.step_channels == 8 && cfg.t_in == 10 && cfg.t_out == 10 && cfg.height == 128 &&
                cfg.width == 128 && cfg.kernel == 3 && cfg.mix_kernel1 == 5 && cfg.mix_kernel2 == 7 &&
                cfg.mix_dilation == 3 && cfg.mask_quantile == 0.98 && cfg.gate_reduction == 16,
            "default hyperparameters");
  auto model = init_params<float>(cfg, 0);
  const auto params = count_params(model);
  SeededRng rng(3);
  Tensor<float> x(Shape{1, 10, 2, 128, 128});
  for (auto& v : x.data()) v = rng.bernoulli(0.01) ? 1.f : 0.f;
  Graph<float> g(false);
  const auto shape = forward(model, g.constant(x)).shape();
  o.require(shape == Shape{1, 10, 2, 128, 128}, "output shape");
  o.require(params >= 300'000 && params <= 600'000, "parameter count in [0.3M, 0.6M]");
  o.note("output [1,10,2,128,128], params " + std::to_string(params));
  return o;
}

// ---- 4 ---------------------------------------------------------------------------

Outcome loss_oracles() {
  Outcome o;
  const double pos = focal_elem(0.5, 1, 0.75, 2.0), neg = focal_elem(0.5, 0, 0.75, 2.0);
  o.require(std::abs(pos - 0.12997) < 1e-4, "focal y=1 " + fmt("%.6f", pos));
  o.require(std::abs(neg - 0.04332) < 1e-4, "focal y=0 " + fmt("%.6f", neg));

  Graph<double> g(false);
  SeededRng rng(4);
  Tensor<double> p(Shape{2, 4, 2, 3, 3});
  for (auto& v : p.data()) v = rng.uniform(0, 1);
  o.require(ddr_loss(g.constant(p), p, 1.0).value()[0] == 0.0, "ddr identical inputs");

  // T=2, 1x1, 2 channels. Differences (0.4, -0.6) against (1, -1), softmax at tau = 1.
  Tensor<double> q(Shape{1, 2, 2, 1, 1}), y(q.shape());
  q[0] = 0.2, q[1] = 0.7, q[2] = 0.6, q[3] = 0.1;
  y[0] = 0.0, y[1] = 1.0, y[2] = 1.0, y[3] = 0.0;
  const double pa = std::exp(0.4) / (std::exp(0.4) + std::exp(-0.6)), pb = 1 - pa;
  const double qa = std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0)), qb = 1 - qa;
  const double hand = pa * std::log(pa / qa) + pb * std::log(pb / qb);
  const double got = ddr_loss(g.constant(q), y, 1.0).value()[0];
  o.require(std::abs(got - hand) < 1e-6, "ddr hand oracle");

  Tensor<double> logits(Shape{2, 3, 2, 4, 4}), t(logits.shape());
  for (auto& v : logits.data()) v = rng.uniform(-3, 3);
  for (auto& v : t.data()) v = rng.bernoulli(0.3) ? 1.0 : 0.0;
  LossConfig no_ddr;
  no_ddr.alpha_ddr = 0.0;
  const double a = total_loss(g.constant(logits), t, no_ddr).value()[0];
  const double b = polarity_focal(g.constant(logits), t, no_ddr).value()[0];
  o.require(std::memcmp(&a, &b, sizeof a) == 0, "total_loss bit-equal to polarity_focal at alpha_ddr=0");
  o.note("focal " + fmt("%.5f", pos) + "/" + fmt("%.5f", neg) + ", ddr " + fmt("%.8f", got) + " vs " + fmt("%.8f", hand));
  return o;
}

// ---- 5 ---------------------------------------------------------------------------

double otsu_exhaustive(const std::vector<float>& px) {
  double best = -1;
  int best_k = 0;
  for (int k = 1; k < 256; ++k) {
    double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (float v : px) {
      const int bin = std::min(255, static_cast<int>(std::floor(static_cast<double>(v) * 256)));
      const double centre = (bin + 0.5) / 256;
      (bin < k ? n0 : n1) += 1;
      (bin < k ? s0 : s1) += centre;
    }
    if (n0 == 0 || n1 == 0) continue;
    const double d = s0 / n0 - s1 / n1;
    const double var = n0 * n1 * d * d;
    if (var > best * (1 + 1e-12)) best = var, best_k = k;
  }
  return best_k == 0 ? 0.5 : best_k / 256.0;
}

Outcome metric_oracles() {
  Outcome o;
  SeededRng rng(5);
  int agree = 0;
  for (int i = 0; i < 100; ++i) {
    std::vector<float> px(24 * 24);
    const double split = rng.uniform(0.05, 0.5);
    for (auto& v : px)
      v = static_cast<float>(rng.bernoulli(split) ? rng.uniform(0.4, 1.0) : rng.uniform(0.0, 0.45));
    agree += otsu_threshold(px) == otsu_exhaustive(px);
  }
  o.require(agree == 100, "otsu oracle agreement " + std::to_string(agree) + "/100");

  const Shape s{1, 2, 4, 4};
  auto iou_of = [&](std::initializer_list<std::size_t> pred, std::initializer_list<std::size_t> gt) {
    Tensor<std::uint8_t> p(s), q(s);
    for (auto i : pred) p[i] = 1;
    for (auto i : gt) q[i] = 1;
    MetricAccumulator acc;
    acc.update(p, q);
    return acc.on().iou();
  };
  o.require(iou_of({1, 6, 9}, {1, 6, 9}) == 1.0, "IoU identity");
  o.require(iou_of({0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}, {0, 5, 10, 15}) == 0.25, "IoU cover");
  o.require(iou_of({0, 1}, {2, 3}) == 0.0, "IoU disjoint");

  std::vector<float> x(32 * 32);
  for (auto& v : x) v = static_cast<float>(rng.uniform(0, 1));
  const double sx = ssim(x, x, 32, 32);
  o.require(std::abs(sx - 1.0) < 1e-6, "SSIM(x,x) = 1");
  o.note("otsu " + std::to_string(agree) + "/100, IoU 1/0.25/0, SSIM(x,x) " + fmt("%.9f", sx));
  return o;
}

// ---- 6 ---------------------------------------------------------------------------

// Moving-bar task: 200 training sequences, 128x128, 10 -> 10 frames.
Outcome learning_check(double budget_s) {
  Outcome o;
  const auto t0 = Clock::now();
  SynthConfig sc;  // 200 sequences of 10 -> 10 frames at 128x128
  sc.seed = 1;
  const auto train_data = synth_dataset(sc);
  sc.sequences = 20;
  sc.seed = 2;
  const auto test_data = synth_dataset(sc);
  sc.seed = 4;
  const auto val_data = synth_dataset(sc);

  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.seed = 3;
  cfg.lr = 3e-3;
  cfg.model.decoder_widths = {64, 16};
  auto state = fresh_state(cfg);

  // Epochs stop once another one would overrun the budget; the best
  // validation aIoU so far is kept.
  std::vector<double> losses;
  TideModel<float> best = state.model;
  double best_val = -1, slowest = 0;
  int best_epoch = 0;
  auto stop_cfg = cfg;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto e0 = Clock::now();
    stop_cfg.epochs = epoch;
    const auto rec = train(state, train_data, {}, stop_cfg);
    losses.push_back(rec.back().train_loss);
    const double val = rollout_eval(state.model, val_data, false, false).model.aiou;
    if (val > best_val) best_val = val, best = state.model, best_epoch = epoch;
    std::printf("  learning epoch=%d loss=%.6f val_aiou=%.4f elapsed=%.0fs\n", epoch, losses.back(), val,
                seconds_since(t0));
    std::fflush(stdout);
    slowest = std::max(slowest, seconds_since(e0));
    if (seconds_since(t0) + 1.2 * slowest > budget_s) break;
  }
  const auto report = rollout_eval(best, test_data, false, false);
  const double secs = seconds_since(t0);
  o.require(secs <= budget_s, "within the time budget");
  o.require(losses.size() >= 3 && losses[0] > losses[1] && losses[1] > losses[2], "loss strictly decreasing over 3 epochs");
  const double margin = report.model.aiou - report.persistence.aiou;
  o.require(margin >= 0.05, "aIoU margin over persistence >= 0.05");
  o.note("test aIoU " + fmt("%.4f", report.model.aiou) + " vs persistence " + fmt("%.4f", report.persistence.aiou) +
         " (margin " + fmt("%+.4f", margin) + "), epoch " + std::to_string(best_epoch) + " of " +
         std::to_string(losses.size()) + ", " + fmt("%.0f s", secs));
  return o;
}

// ---- 7 ---------------------------------------------------------------------------

Outcome single_pass_latency() {
  Outcome o;
  const ModelConfig cfg;
  const auto model = init_params<float>(cfg, 0);
  // Packing time into channels keeps the graph size independent of the window length.
  auto nodes = [](const ModelConfig& c) {
    auto m = init_params<float>(c, 0);
    Graph<float> g(false);
    forward(m, g.constant(Tensor<float>(Shape{1, c.t_in, 2, c.height, c.width})));
    return g.size();
  };
  ModelConfig short_cfg = cfg;
  short_cfg.t_in = short_cfg.t_out = 2;
  o.require(nodes(cfg) == nodes(short_cfg), "forward graph independent of window length");
  const auto r = benchmark(model, 50, 3);
  o.require(r.median_ms < 1000.0, "median under 1 s");
  o.note(r.record() + " backend=" + kernels::backend_name(kernels::active_backend()));
  return o;
}

// ---- 8 ---------------------------------------------------------------------------

Outcome determinism_and_persistence() {
  Outcome o;
  const auto dir = scratch("determinism");
  SynthConfig sc;
  sc.sequences = 8;
  sc.t_in = sc.t_out = 4;
  sc.height = sc.width = sc.sensor_height = sc.sensor_width = 32;
  sc.seed = 6;
  const auto data = synth_dataset(sc);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 7;
  cfg.model.t_in = cfg.model.t_out = 4;
  cfg.model.height = cfg.model.width = 32;
  cfg.model.blocks = 2;
  cfg.model.decoder_widths = {32, 16};

  std::vector<std::vector<double>> step_losses(2);
  for (int run = 0; run < 2; ++run) {
    auto st = fresh_state(cfg);
    TrainHooks hooks;
    hooks.checkpoint = dir / ("run" + std::to_string(run) + ".etw");
    hooks.on_step = [&, run](std::int64_t, double l) { step_losses[static_cast<std::size_t>(run)].push_back(l); };
    train(st, data, {}, cfg, hooks);
  }
  o.require(file_bytes(dir / "run0.etw") == file_bytes(dir / "run1.etw"), "bit-identical checkpoints");

  // Resume after epoch 1.
  auto half = cfg;
  half.epochs = 1;
  auto st = fresh_state(half);
  TrainHooks h1;
  h1.checkpoint = dir / "half.etw";
  train(st, data, {}, half, h1);
  auto resumed = load_state(dir / "half.etw");
  std::vector<double> rest;
  TrainHooks h2;
  h2.on_step = [&](std::int64_t, double l) { rest.push_back(l); };
  train(resumed, data, {}, cfg, h2);
  const auto& full = step_losses[0];
  const std::size_t next = full.size() / 2;
  const double diff = rest.empty() ? 1.0 : std::abs(rest.front() - full[next]);
  o.require(diff < 1e-7, "resumed next-step loss within 1e-7");

  // Lossless file formats.
  const auto model = load_checkpoint(dir / "run0.etw");
  save_checkpoint(dir / "again.etw", model);
  o.require(file_bytes(dir / "again.etw") == file_bytes(dir / "run0.etw"), "ETW1 round trip");
  const auto& occ = data.samples[3].input;
  write_ocm(dir / "x.ocm", occ);
  o.require(read_ocm(dir / "x.ocm") == occ, "OCM1 round trip");
  SeededRng scene_rng(8);
  const auto stream = synth_scene(random_bar_scene(64, 48, 6, scene_rng), 9);
  write_evt(dir / "x.evt", stream);
  o.require(read_evt(dir / "x.evt") == stream, "EVT1 round trip");
  o.note("resume diff " + fmt("%.1e", diff) + ", " + std::to_string(stream.events.size()) + " events round-tripped");
  return o;
}

// ---- 9 ---------------------------------------------------------------------------

Outcome ablations() {
  Outcome o;
  SynthConfig sc;
  sc.sequences = 8;
  sc.height = sc.width = sc.sensor_height = sc.sensor_width = 32;
  sc.seed = 10;
  const auto data = synth_dataset(sc);
  struct Variant {
    const char* name;
    std::function<void(TrainConfig&)> apply;
  };
  const Variant variants[] = {
      {"polarity_weighting=false", [](TrainConfig& c) { c.loss.polarity_weighting = false; }},
      {"masked_pooling=false", [](TrainConfig& c) { c.model.masked_pooling = false; }},
      {"multiplicative_residual=false", [](TrainConfig& c) { c.model.multiplicative_residual = false; }},
      {"alpha_ddr=0", [](TrainConfig& c) { c.loss.alpha_ddr = 0.0; }},
  };
  std::string losses;
  for (const auto& v : variants) {
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.model.height = cfg.model.width = 32;
    cfg.model.decoder_widths = {32, 16};
    v.apply(cfg);
    try {
      // Flags survive a trip through the config file format.
      KeyValues kv;
      cfg.write(kv);
      const auto parsed = TrainConfig::from(KeyValues::parse(kv.to_text()));
      auto st = fresh_state(parsed);
      const auto rec = train(st, data, data, parsed);
      const bool ok = rec.size() == 1 && std::isfinite(rec[0].train_loss);
      o.require(ok, v.name);
      losses += std::string(losses.empty() ? "" : ", ") + v.name + " loss " + fmt("%.4f", rec[0].train_loss);
    } catch (const std::exception& e) {
      o.require(false, std::string(v.name) + ": " + e.what());
    }
  }
  o.note(losses);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::set<int> only;
  double budget = 1800;
  app.add_option("--only", only, "Run only these criteria")->check(CLI::Range(1, 9))->delimiter(',');
  app.add_option("--learning-budget", budget, "Wall-clock seconds for the learning check")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  retain_freed_memory();

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"structural invariants", structural_invariants},
      {"default-config audit", default_config_audit},
      {"loss oracles", loss_oracles},
      {"metric oracles", metric_oracles},
      {"learning check", [budget] { return learning_check(budget); }},
      {"single-pass latency", single_pass_latency},
      {"determinism and persistence", determinism_and_persistence},
      {"ablation switches", ablations},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    failed += !o.pass;
    std::printf("%s criterion %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
