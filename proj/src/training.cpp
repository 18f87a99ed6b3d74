#include "etide/training.hpp"

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "binary_io.hpp"
#include "etide/io_error.hpp"

namespace etide {

// ---- configuration -------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (epochs < 0) fail("epochs must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(lr > 0.0)) fail("lr must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must be in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be > 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
  if (!(val_split >= 0.0 && val_split < 1.0)) fail("val_split must be in [0, 1)");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
  loss.validate();
  model.validate();
}

TrainConfig TrainConfig::from(const KeyValues& kv) {
  TrainConfig cfg;
  for (const auto& [k, v] : kv.items()) {
    if (k == "epochs") cfg.epochs = parse_int(k, v);
    else if (k == "batch_size") cfg.batch_size = parse_int(k, v);
    else if (k == "lr") cfg.lr = parse_double(k, v);
    else if (k == "beta1") cfg.beta1 = parse_double(k, v);
    else if (k == "beta2") cfg.beta2 = parse_double(k, v);
    else if (k == "adam_eps") cfg.adam_eps = parse_double(k, v);
    else if (k == "seed") {
      const int s = parse_int(k, v);
      if (s < 0) throw std::invalid_argument("config key 'seed': must be >= 0");
      cfg.seed = static_cast<std::uint64_t>(s);
    } else if (k == "checkpoint_every") cfg.checkpoint_every = parse_int(k, v);
    else if (k == "val_split") cfg.val_split = parse_double(k, v);
    else if (k == "grad_clip") cfg.grad_clip = parse_double(k, v);
    else if (!cfg.loss.apply(k, v) && !cfg.model.apply(k, v))
      throw std::invalid_argument("unknown config key '" + k + "'");
  }
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) { return from(KeyValues::load(path)); }

void TrainConfig::write(KeyValues& kv) const {
  kv.set("epochs", std::to_string(epochs));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("lr", format_double(lr));
  kv.set("beta1", format_double(beta1));
  kv.set("beta2", format_double(beta2));
  kv.set("adam_eps", format_double(adam_eps));
  kv.set("seed", std::to_string(seed));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  kv.set("val_split", format_double(val_split));
  kv.set("grad_clip", format_double(grad_clip));
  loss.write(kv);
  model.write(kv);
}

// ---- optimizer -------------------------------------------------------------

AdamState AdamState::zeros_like(std::span<Parameter<float>* const> params) {
  AdamState s;
  for (const auto* p : params) {
    s.m.emplace_back(p->value.shape());
    s.v.emplace_back(p->value.shape());
  }
  return s;
}

void adam_step(std::span<Parameter<float>* const> params, AdamState& state, double lr, double beta1, double beta2,
               double eps) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                                " moments for " + std::to_string(params.size()) + " parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.shape() != p.value.shape() || v.shape() != p.value.shape() || p.grad.shape() != p.value.shape())
      throw ShapeError("adam_step: state for " + p.name + " does not match its shape " + shape_str(p.value.shape()));
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      const double mj = beta1 * m[j] + (1.0 - beta1) * g;
      const double vj = beta2 * v[j] + (1.0 - beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      p.value[j] = static_cast<float>(p.value[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + eps));
    }
  }
}

double clip_grad_norm(std::span<Parameter<float>* const> params, double max_norm) {
  double sq = 0;
  for (const auto* p : params)
    for (float g : p->grad.data()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto s = static_cast<float>(max_norm / norm);
    for (auto* p : params)
      for (auto& g : p->grad.data()) g *= s;
  }
  return norm;
}

// ---- data --------------------------------------------------------------------

void SynthConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("synth: " + msg); };
  if (sequences < 0) fail("sequence count must be >= 0");
  if (t_in < 1 || t_out < 1) fail("frame counts must be >= 1");
  if (height < 1 || width < 1 || height > 65535 || width > 65535) fail("size must be in [1, 65535]");
  if (sensor_height < height || sensor_width < width || sensor_height > 65535 || sensor_width > 65535)
    fail("sensor must be at least the crop size");
  if (min_objects < 0 || max_objects < min_objects) fail("object range must satisfy 0 <= min <= max");
  if (bin_duration == 0) fail("bin duration must be > 0");
}

Sample synth_sample(const SynthConfig& cfg, int index) {
  SeededRng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(index)));
  const int bins = cfg.t_in + cfg.t_out;
  auto spec = random_bar_scene(static_cast<std::uint16_t>(cfg.sensor_width), static_cast<std::uint16_t>(cfg.sensor_height),
                               bins, rng, cfg.min_objects, cfg.max_objects);
  spec.bin_duration = cfg.bin_duration;
  const auto stream = synth_scene(spec, rng.next());
  auto frames = bin_events(stream, 0, cfg.bin_duration, bins);
  if (cfg.sensor_height != cfg.height || cfg.sensor_width != cfg.width) {
    const auto win = sample_active_crop(frames, cfg.height, cfg.width, cfg.min_active, rng);
    frames = crop(frames, win.top, win.left, cfg.height, cfg.width);
  }
  return {slice_steps(frames, 0, cfg.t_in), slice_steps(frames, cfg.t_in, cfg.t_out)};
}

Dataset synth_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.samples.reserve(static_cast<std::size_t>(cfg.sequences));
  for (int i = 0; i < cfg.sequences; ++i) d.samples.push_back(synth_sample(cfg, i));
  return d;
}

namespace {

std::string sample_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%05zu", i);
  return buf;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const Dataset& data) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::string manifest = "# input target\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto stem = sample_stem(i);
    write_ocm(dir / (stem + ".in.ocm"), data.samples[i].input);
    write_ocm(dir / (stem + ".out.ocm"), data.samples[i].target);
    manifest += stem + ".in.ocm " + stem + ".out.ocm\n";
  }
  detail::write_text_atomic(dir / kManifestName, manifest);
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("data directory " + dir.string() + " does not exist");
  const auto manifest_path = dir / kManifestName;
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  Dataset d;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    std::istringstream ss(line);
    std::string a, b, extra;
    if (!(ss >> a >> b) || (ss >> extra))
      throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": expected '<input> <target>'");
    Sample s{read_ocm(dir / a), read_ocm(dir / b)};
    if (!d.empty()) {
      const auto& f = d.samples.front();
      if (s.input.frames.shape() != f.input.frames.shape() || s.target.frames.shape() != f.target.frames.shape())
        throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": sample shapes differ from the first sample");
    }
    if (s.input.height() != s.target.height() || s.input.width() != s.target.width())
      throw FormatError(manifest_path.string() + ":" + std::to_string(line_no) + ": input and target sizes differ");
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::pair<Tensor<float>, Tensor<float>> make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const auto& first = data.samples.at(indices[0]);
  auto with_batch = [&](const Shape& s) {
    Shape out{static_cast<std::int64_t>(indices.size())};
    out.insert(out.end(), s.begin(), s.end());
    return out;
  };
  Tensor<float> x(with_batch(first.input.frames.shape())), y(with_batch(first.target.frames.shape()));
  const std::size_t nx = first.input.frames.size(), ny = first.target.frames.size();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& s = data.samples.at(indices[b]);
    if (s.input.frames.size() != nx || s.target.frames.size() != ny)
      throw ShapeError("make_batch: sample " + std::to_string(indices[b]) + " has a different shape");
    std::copy(s.input.frames.ptr(), s.input.frames.ptr() + nx, x.ptr() + b * nx);
    std::copy(s.target.frames.ptr(), s.target.frames.ptr() + ny, y.ptr() + b * ny);
  }
  return {std::move(x), std::move(y)};
}

std::pair<Dataset, Dataset> split_validation(Dataset data, double fraction) {
  const auto n_val = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(data.size())));
  Dataset val;
  val.samples.assign(std::make_move_iterator(data.samples.end() - static_cast<std::ptrdiff_t>(n_val)),
                     std::make_move_iterator(data.samples.end()));
  data.samples.resize(data.size() - n_val);
  return {std::move(data), std::move(val)};
}

// ---- training ------------------------------------------------------------------

std::string EpochRecord::record() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "epoch=%d step=%lld loss=%.8f focal=%.8f ddr=%.8f seconds=%.2f", epoch,
                static_cast<long long>(step), train_loss, focal, ddr, seconds);
  std::string out = buf;
  if (validation) out += " " + validation->record("val_");
  return out;
}

TrainState fresh_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState s{init_params<float>(cfg.model, cfg.seed), {}, 0};
  s.adam = AdamState::zeros_like(s.model.parameters());
  return s;
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5eed5u;
constexpr std::uint64_t kDropStream = 0xd209u;

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  SeededRng rng(mix_seed(mix_seed(seed, kShuffleStream), static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

void check_data(const Dataset& data, const ModelConfig& m, const char* what) {
  if (data.empty()) return;
  const auto& s = data.samples.front();
  if (s.input.steps() != m.t_in || s.target.steps() != m.t_out || s.input.height() != m.height ||
      s.input.width() != m.width)
    throw std::invalid_argument(std::string(what) + " samples are " + std::to_string(s.input.steps()) + "->" +
                                std::to_string(s.target.steps()) + " frames at " + std::to_string(s.input.height()) +
                                "x" + std::to_string(s.input.width()) + ", model expects " + std::to_string(m.t_in) +
                                "->" + std::to_string(m.t_out) + " at " + std::to_string(m.height) + "x" +
                                std::to_string(m.width));
}

}  // namespace

std::vector<EpochRecord> train(TrainState& state, const Dataset& train_data, const Dataset& val_data,
                               const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (!(state.model.config == cfg.model))
    throw std::invalid_argument("train: checkpoint model config differs from the training config");
  check_data(train_data, cfg.model, "training");
  check_data(val_data, cfg.model, "validation");
  if (train_data.empty() && state.epoch < cfg.epochs) throw std::invalid_argument("train: empty training set");

  std::vector<EpochRecord> history;
  auto params = state.model.parameters();
  if (state.adam.m.size() != params.size()) state.adam = AdamState::zeros_like(params);

  for (int epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const auto t_start = std::chrono::steady_clock::now();
    const auto order = epoch_order(train_data.size(), cfg.seed, epoch);
    double loss_sum = 0, focal_sum = 0, ddr_sum = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t nb = std::min(order.size() - b0, static_cast<std::size_t>(cfg.batch_size));
      auto [x, y] = make_batch(train_data, std::span(order).subspan(b0, nb));
      state.model.zero_grad();
      SeededRng drop_rng(mix_seed(mix_seed(cfg.seed, kDropStream), static_cast<std::uint64_t>(state.adam.step)));
      Graph<float> g;
      auto logits = forward(state.model, g.constant(std::move(x)), DropControl{true, &drop_rng});
      auto terms = loss_terms(logits, y, cfg.loss);
      g.backward(terms.total);
      if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
      adam_step(params, state.adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
      const double loss = terms.total.value().item();
      loss_sum += loss * static_cast<double>(nb);
      focal_sum += terms.focal.value().item() * static_cast<double>(nb);
      if (terms.ddr) ddr_sum += terms.ddr->value().item() * static_cast<double>(nb);
      if (hooks.on_step) hooks.on_step(state.adam.step, loss);
    }
    state.epoch = epoch + 1;

    EpochRecord rec;
    rec.epoch = state.epoch;
    rec.step = state.adam.step;
    const double n = static_cast<double>(train_data.size());
    rec.train_loss = loss_sum / n;
    rec.focal = focal_sum / n;
    rec.ddr = ddr_sum / n;
    if (!val_data.empty()) rec.validation = rollout_eval(state.model, val_data, false, false).model;
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);

    const bool last = state.epoch == cfg.epochs;
    const bool periodic = cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0;
    if (hooks.checkpoint && (last || periodic)) save_state(*hooks.checkpoint, state);
  }
  if (hooks.checkpoint && history.empty()) save_state(*hooks.checkpoint, state);
  return history;
}

double evaluate_loss(const TideModel<float>& model, const Dataset& data, const LossConfig& loss, int batch_size) {
  if (data.empty()) throw std::invalid_argument("evaluate_loss: empty dataset");
  auto& m = const_cast<TideModel<float>&>(model);
  double total = 0;
  std::vector<std::size_t> idx;
  for (std::size_t b0 = 0; b0 < data.size(); b0 += static_cast<std::size_t>(batch_size)) {
    idx.clear();
    for (std::size_t i = b0; i < std::min(data.size(), b0 + static_cast<std::size_t>(batch_size)); ++i) idx.push_back(i);
    auto [x, y] = make_batch(data, idx);
    Graph<float> g(false);
    total += total_loss(forward(m, g.constant(std::move(x))), y, loss).value().item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(data.size());
}

std::filesystem::path state_path(const std::filesystem::path& checkpoint) {
  auto p = checkpoint;
  p += ".state";
  return p;
}

void save_state(const std::filesystem::path& checkpoint, const TrainState& state) {
  save_checkpoint(checkpoint, state.model);
  WeightFile w;
  const auto params = state.model.parameters();
  for (std::size_t i = 0; i < params.size() && i < state.adam.m.size(); ++i) {
    w.tensors.emplace_back("adam.m." + params[i]->name, state.adam.m[i]);
    w.tensors.emplace_back("adam.v." + params[i]->name, state.adam.v[i]);
  }
  w.meta.set("step", std::to_string(state.adam.step));
  w.meta.set("epoch", std::to_string(state.epoch));
  write_etw(state_path(checkpoint), w);
}

TrainState load_state(const std::filesystem::path& checkpoint) {
  TrainState s{load_checkpoint(checkpoint), {}, 0};
  auto params = s.model.parameters();
  s.adam = AdamState::zeros_like(params);
  const auto sp = state_path(checkpoint);
  if (!std::filesystem::exists(sp)) return s;
  const auto w = read_etw(sp);
  if (w.tensors.size() != 2 * params.size())
    throw FormatError(sp.string() + ": optimizer state does not match the checkpoint");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [mn, m] = w.tensors[2 * i];
    const auto& [vn, v] = w.tensors[2 * i + 1];
    if (mn != "adam.m." + params[i]->name || vn != "adam.v." + params[i]->name || m.shape() != params[i]->value.shape() ||
        v.shape() != params[i]->value.shape())
      throw FormatError(sp.string() + ": optimizer state for " + params[i]->name + " is missing or misshapen");
    s.adam.m[i] = m;
    s.adam.v[i] = v;
  }
  try {
    s.adam.step = std::stoll(w.meta.at("step"));
    s.epoch = parse_int("epoch", w.meta.at("epoch"));
  } catch (const std::exception& e) {
    throw FormatError(sp.string() + ": " + e.what());
  }
  return s;
}

// ---- evaluation ----------------------------------------------------------------

ProbabilityMaps predict(const TideModel<float>& model, const OccurrenceTensor& input) {
  const auto& cfg = model.config;
  if (input.steps() != cfg.t_in || input.channels() != 2 || input.height() != cfg.height || input.width() != cfg.width)
    throw std::invalid_argument("predict: input " + shape_str(input.frames.shape()) + " does not match the model's [" +
                                std::to_string(cfg.t_in) + ",2," + std::to_string(cfg.height) + "," +
                                std::to_string(cfg.width) + "]");
  Shape batched{1};
  const auto& s = input.frames.shape();
  batched.insert(batched.end(), s.begin(), s.end());
  auto probs = predict_probabilities(model, input.frames.cast<float>().reshaped(batched));
  ProbabilityMaps out;
  out.probs = std::move(probs).reshaped(Shape{cfg.t_out, 2, cfg.height, cfg.width});
  out.bin_duration = input.bin_duration;
  out.t0 = input.t0 + static_cast<std::uint64_t>(input.steps()) * input.bin_duration;
  return out;
}

OccurrenceTensor persistence_forecast(const OccurrenceTensor& input, int t_out) {
  if (t_out < 1) throw std::invalid_argument("persistence_forecast: t_out must be >= 1");
  const auto last = slice_steps(input, static_cast<int>(input.steps()) - 1, 1);
  const std::size_t per = last.frames.size();
  OccurrenceTensor out{Tensor<std::uint8_t>(Shape{t_out, input.channels(), input.height(), input.width()}),
                       input.t0 + static_cast<std::uint64_t>(input.steps()) * input.bin_duration, input.bin_duration};
  for (int t = 0; t < t_out; ++t) std::copy(last.frames.ptr(), last.frames.ptr() + per, out.frames.ptr() + t * per);
  return out;
}

EvalResult rollout_eval(const TideModel<float>& model, const Dataset& data, bool threshold_grid, bool fidelity) {
  check_data(data, model.config, "evaluation");
  MetricAccumulator acc, base;
  std::vector<MetricAccumulator> grid(threshold_grid ? 9 : 0);
  for (const auto& s : data.samples) {
    const auto probs = predict(model, s.input).probs;
    acc.update(binarize(probs), s.target.frames);
    const auto persist = persistence_forecast(s.input, static_cast<int>(s.target.steps()));
    const auto persist_probs = persist.frames.cast<float>();
    base.update(binarize(persist_probs), s.target.frames);
    if (fidelity) {
      acc.update_fidelity(probs, s.target.frames);
      base.update_fidelity(persist_probs, s.target.frames);
    }
    for (std::size_t i = 0; i < grid.size(); ++i)
      grid[i].update(binarize_fixed(probs, 0.1 * static_cast<double>(i + 1)), s.target.frames);
  }
  EvalResult r{acc.finalize(), base.finalize(), {}};
  for (std::size_t i = 0; i < grid.size(); ++i) r.grid.emplace_back(0.1 * static_cast<double>(i + 1), grid[i].finalize());
  return r;
}

// ---- benchmark -----------------------------------------------------------------

namespace {

struct ForwardBytes {
  std::int64_t values = 0;   // elements
  std::int64_t scratch = 0;  // largest im2col buffer, elements
};

ForwardBytes count_forward(const ModelConfig& c, int batch) {
  c.validate();
  const std::int64_t B = batch, k2 = static_cast<std::int64_t>(c.kernel) * c.kernel;
  ForwardBytes f;
  const std::int64_t x = B * c.t_in * 2LL * c.height * c.width;
  f.values += 2 * x;  // input and its time-folded reshape
  std::int64_t h = c.height, w = c.width, cin = 2;
  const std::int64_t N = B * c.t_in;
  auto stage_params = [&](std::int64_t co, std::int64_t ci) { return co * ci * k2 + co + 2 * co; };
  for (int s = 0; s < c.stages; ++s) {
    const std::int64_t co = s == c.stages - 1 ? c.step_channels : c.encoder_width;
    const std::int64_t ho = (h + 2 * (c.kernel / 2) - c.kernel) / 2 + 1, wo = (w + 2 * (c.kernel / 2) - c.kernel) / 2 + 1;
    f.values += stage_params(co, cin) + 3 * N * co * ho * wo;  // conv, norm, gelu
    f.scratch = std::max(f.scratch, cin * k2 * ho * wo);
    h = ho;
    w = wo;
    cin = co;
  }
  const std::int64_t D = c.packed_channels(), hid = c.gate_hidden(), E = static_cast<std::int64_t>(c.ffn_expansion) * D;
  const std::int64_t S = B * D * h * w;
  f.values += S;  // packed
  const std::int64_t block_params = 2 * D + D * c.mix_kernel1 * c.mix_kernel1 + D * c.mix_kernel2 * c.mix_kernel2 +
                                    (D * D + D) + (hid * D + hid + D * hid + D) + 2 * D + (E * D + E) + (D * E + D);
  const std::int64_t full = 9 + (c.multiplicative_residual ? 2 : 0);
  f.values += c.blocks * (block_params + full * S + 2 * B * E * h * w + 3 * B * D + 2 * B * hid);
  cin = D;
  for (int s = 0; s < c.stages; ++s) {
    const std::int64_t co = c.decoder_widths[s];
    h *= 2;
    w *= 2;
    f.values += B * cin * h * w + stage_params(co, cin) + 3 * B * co * h * w;  // upsample, conv, norm, gelu
    f.scratch = std::max(f.scratch, cin * k2 * h * w);
    cin = co;
  }
  const std::int64_t out = B * 2LL * c.t_out * h * w;
  f.values += 2LL * c.t_out * cin + 2LL * c.t_out + 2 * out;  // head params, head output, reshape
  return f;
}

}  // namespace

std::int64_t forward_value_bytes(const ModelConfig& cfg, int batch) {
  return count_forward(cfg, batch).values * static_cast<std::int64_t>(sizeof(float));
}

std::int64_t peak_bytes_estimate(const ModelConfig& cfg, int batch) {
  const auto f = count_forward(cfg, batch);
  return (f.values + f.scratch) * static_cast<std::int64_t>(sizeof(float));
}

std::string BenchResult::record() const {
  char buf[200];
  std::snprintf(buf, sizeof buf, "iterations=%d median_ms=%.3f p95_ms=%.3f params=%lld peak_bytes_estimate=%lld",
                iterations, median_ms, p95_ms, static_cast<long long>(params), static_cast<long long>(peak_bytes_estimate));
  return buf;
}

BenchResult benchmark(const TideModel<float>& model, int iterations, int warmup, std::uint64_t seed) {
  if (iterations < 1) throw std::invalid_argument("benchmark: iterations must be >= 1");
  const auto& c = model.config;
  Tensor<float> x(Shape{1, c.t_in, 2, c.height, c.width});
  SeededRng rng(seed);
  for (auto& v : x.data()) v = rng.bernoulli(0.05) ? 1.0f : 0.0f;
  auto& m = const_cast<TideModel<float>&>(model);
  auto run = [&] {
    Graph<float> g(false);
    return forward(m, g.constant(x)).value().size();
  };
  for (int i = 0; i < warmup; ++i) run();
  std::vector<double> ms;
  for (int i = 0; i < iterations; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  std::sort(ms.begin(), ms.end());
  auto rank = [&](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(ms.size()))) - 1;
    return ms[std::min(idx, ms.size() - 1)];
  };
  BenchResult r;
  r.iterations = iterations;
  r.median_ms = ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]);
  r.p95_ms = rank(0.95);
  r.params = count_params(model);
  r.peak_bytes_estimate = peak_bytes_estimate(c, 1);
  return r;
}

void retain_freed_memory() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace etide
