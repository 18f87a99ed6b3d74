#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "etide/config.hpp"
#include "etide/events.hpp"
#include "etide/losses.hpp"
#include "etide/metrics.hpp"
#include "etide/model.hpp"

namespace etide {

struct TrainConfig {
  int epochs = 10;
  int batch_size = 4;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 writes only the final one
  double val_split = 0.0;    // trailing fraction of the training data held out
  double grad_clip = 0.0;    // global-norm clip, 0 disables
  LossConfig loss;
  ModelConfig model;

  void validate() const;
  /// Every key must belong to the trainer, the loss or the model.
  static TrainConfig from(const KeyValues& kv);
  static TrainConfig load(const std::filesystem::path& path);
  void write(KeyValues& kv) const;
};

// ---- optimizer -------------------------------------------------------------

struct AdamState {
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;
  std::int64_t step = 0;

  static AdamState zeros_like(std::span<Parameter<float>* const> params);
};

/// Bias-corrected Adam update of every parameter from its grad.
void adam_step(std::span<Parameter<float>* const> params, AdamState& state, double lr, double beta1, double beta2,
               double eps);

/// Rescales all grads so their joint L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(std::span<Parameter<float>* const> params, double max_norm);

// ---- data --------------------------------------------------------------------

struct Sample {
  OccurrenceTensor input;   // [T_in,2,H,W]
  OccurrenceTensor target;  // [T_out,2,H,W]
};

struct Dataset {
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct SynthConfig {
  int sequences = 200;
  int t_in = 10;
  int t_out = 10;
  int height = 128;
  int width = 128;
  /// Scenes are simulated at this size and an active window of height x width is cropped out.
  int sensor_height = 128;
  int sensor_width = 128;
  std::int64_t min_active = 1;  // minimum events in a sampled crop
  int min_objects = 1;
  int max_objects = 3;
  std::uint64_t seed = 0;
  std::uint64_t bin_duration = kDefaultBinDurationUs;

  void validate() const;
};

/// One sequence, deterministic in (cfg.seed, index).
Sample synth_sample(const SynthConfig& cfg, int index);
Dataset synth_dataset(const SynthConfig& cfg);

inline constexpr const char* kManifestName = "manifest.txt";

/// Writes seq_NNNNN.in.ocm / seq_NNNNN.out.ocm pairs and a manifest listing them.
void write_dataset(const std::filesystem::path& dir, const Dataset& data);
Dataset load_dataset(const std::filesystem::path& dir);

/// Stacks samples[indices] into x[B,T_in,2,H,W] and y[B,T_out,2,H,W].
std::pair<Tensor<float>, Tensor<float>> make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Splits off the trailing floor(fraction * N) samples.
std::pair<Dataset, Dataset> split_validation(Dataset data, double fraction);

// ---- training ------------------------------------------------------------------

struct EpochRecord {
  int epoch = 0;  // 1-based
  std::int64_t step = 0;
  double train_loss = 0;
  double focal = 0;
  double ddr = 0;
  std::optional<MetricReport> validation;
  double seconds = 0;

  std::string record() const;
};

struct TrainState {
  TideModel<float> model;
  AdamState adam;
  int epoch = 0;  // completed epochs
};

struct TrainHooks {
  std::function<void(std::int64_t step, double loss)> on_step;
  std::function<void(const EpochRecord&)> on_epoch;
  /// Written every checkpoint_every epochs and after the last one, with a training-state sidecar.
  std::optional<std::filesystem::path> checkpoint;
};

TrainState fresh_state(const TrainConfig& cfg);

/// Runs epochs state.epoch .. cfg.epochs-1. Shuffling and drop-path draws
/// depend only on (seed, epoch, step), so a restored state continues the run exactly.
std::vector<EpochRecord> train(TrainState& state, const Dataset& train_data, const Dataset& val_data,
                               const TrainConfig& cfg, const TrainHooks& hooks = {});

/// Loss of one batch without updating anything (eval mode).
double evaluate_loss(const TideModel<float>& model, const Dataset& data, const LossConfig& loss, int batch_size);

std::filesystem::path state_path(const std::filesystem::path& checkpoint);
void save_state(const std::filesystem::path& checkpoint, const TrainState& state);
/// Loads weights and, when the sidecar exists, optimizer moments and the epoch counter.
TrainState load_state(const std::filesystem::path& checkpoint);

// ---- evaluation ----------------------------------------------------------------

/// Eval-mode probabilities for one input window.
ProbabilityMaps predict(const TideModel<float>& model, const OccurrenceTensor& input);

/// Repeats the last input frame t_out times.
OccurrenceTensor persistence_forecast(const OccurrenceTensor& input, int t_out);

struct EvalResult {
  MetricReport model;
  MetricReport persistence;
  std::vector<std::pair<double, MetricReport>> grid;  // fixed thresholds 0.1 .. 0.9
};

/// One forward per sample; counts accumulate globally over the set.
EvalResult rollout_eval(const TideModel<float>& model, const Dataset& data, bool threshold_grid = false,
                        bool fidelity = true);

// ---- benchmark -----------------------------------------------------------------

struct BenchResult {
  int iterations = 0;
  double median_ms = 0;
  double p95_ms = 0;
  std::int64_t params = 0;
  std::int64_t peak_bytes_estimate = 0;

  std::string record() const;
};

/// Bytes of every value an eval-mode forward records, inputs and bound parameters included.
std::int64_t forward_value_bytes(const ModelConfig& cfg, int batch);
/// forward_value_bytes plus the largest convolution scratch buffer.
std::int64_t peak_bytes_estimate(const ModelConfig& cfg, int batch);

/// Times batch-1 forwards after `warmup` untimed ones.
BenchResult benchmark(const TideModel<float>& model, int iterations = 50, int warmup = 3, std::uint64_t seed = 0);

/// Keeps large freed blocks in the heap so each step's activations reuse
/// already-mapped pages. Process-wide; glibc only, a no-op elsewhere.
void retain_freed_memory();

}  // namespace etide
