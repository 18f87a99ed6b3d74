#include "etide/model.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "binary_io.hpp"
#include "etide/io_error.hpp"

namespace etide {

// ---- configuration -------------------------------------------------------

int ModelConfig::gate_hidden() const {
  const int d = packed_channels();
  return std::max(1, (d + gate_reduction - 1) / gate_reduction);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (t_in < 1 || t_out < 1) fail("t_in and t_out must be >= 1");
  if (step_channels < 1) fail("step_channels must be >= 1");
  if (blocks < 0) fail("blocks must be >= 0");
  if (kernel < 1 || kernel % 2 == 0) fail("kernel must be odd");
  if (mix_kernel1 < 1 || mix_kernel1 % 2 == 0) fail("mix_kernel1 must be odd");
  if (mix_kernel2 < 1 || mix_kernel2 % 2 == 0) fail("mix_kernel2 must be odd");
  if (mix_dilation < 1) fail("mix_dilation must be >= 1");
  if (!(mask_quantile > 0.0 && mask_quantile <= 1.0)) fail("mask_quantile must be in (0, 1]");
  if (gate_reduction < 1) fail("gate_reduction must be >= 1");
  if (ffn_expansion < 1) fail("ffn_expansion must be >= 1");
  if (!(drop_path >= 0.0 && drop_path < 1.0)) fail("drop_path must be in [0, 1)");
  if (stages < 1 || stages > 8) fail("stages must be in [1, 8]");
  if (encoder_width < 1) fail("encoder_width must be >= 1");
  if (static_cast<int>(decoder_widths.size()) != stages)
    fail("decoder_widths needs one entry per stage (" + std::to_string(stages) + ")");
  for (int w : decoder_widths)
    if (w < 1) fail("decoder widths must be >= 1");
  const int div = 1 << stages;
  if (height < div || height % div != 0) fail("height must be a positive multiple of " + std::to_string(div));
  if (width < div || width % div != 0) fail("width must be a positive multiple of " + std::to_string(div));
}

bool ModelConfig::apply(const std::string& key, const std::string& value) {
  const std::unordered_map<std::string, int*> ints = {
      {"t_in", &t_in},
      {"t_out", &t_out},
      {"height", &height},
      {"width", &width},
      {"step_channels", &step_channels},
      {"blocks", &blocks},
      {"kernel", &kernel},
      {"mix_kernel1", &mix_kernel1},
      {"mix_kernel2", &mix_kernel2},
      {"mix_dilation", &mix_dilation},
      {"gate_reduction", &gate_reduction},
      {"ffn_expansion", &ffn_expansion},
      {"stages", &stages},
      {"encoder_width", &encoder_width},
  };
  if (auto it = ints.find(key); it != ints.end()) {
    *it->second = parse_int(key, value);
    return true;
  }
  if (key == "mask_quantile") mask_quantile = parse_double(key, value);
  else if (key == "drop_path") drop_path = parse_double(key, value);
  else if (key == "decoder_widths") decoder_widths = parse_int_list(key, value);
  else if (key == "masked_pooling") masked_pooling = parse_bool(key, value);
  else if (key == "multiplicative_residual") multiplicative_residual = parse_bool(key, value);
  else return false;
  return true;
}

void ModelConfig::write(KeyValues& kv) const {
  kv.set("t_in", std::to_string(t_in));
  kv.set("t_out", std::to_string(t_out));
  kv.set("height", std::to_string(height));
  kv.set("width", std::to_string(width));
  kv.set("step_channels", std::to_string(step_channels));
  kv.set("blocks", std::to_string(blocks));
  kv.set("kernel", std::to_string(kernel));
  kv.set("mix_kernel1", std::to_string(mix_kernel1));
  kv.set("mix_kernel2", std::to_string(mix_kernel2));
  kv.set("mix_dilation", std::to_string(mix_dilation));
  kv.set("mask_quantile", format_double(mask_quantile));
  kv.set("gate_reduction", std::to_string(gate_reduction));
  kv.set("ffn_expansion", std::to_string(ffn_expansion));
  kv.set("drop_path", format_double(drop_path));
  kv.set("stages", std::to_string(stages));
  kv.set("encoder_width", std::to_string(encoder_width));
  std::string widths;
  for (std::size_t i = 0; i < decoder_widths.size(); ++i) widths += (i ? "," : "") + std::to_string(decoder_widths[i]);
  kv.set("decoder_widths", widths);
  kv.set("masked_pooling", masked_pooling ? "true" : "false");
  kv.set("multiplicative_residual", multiplicative_residual ? "true" : "false");
}

ModelConfig ModelConfig::from(const KeyValues& kv) {
  ModelConfig cfg;
  for (const auto& [k, v] : kv.items()) {
    if (!cfg.apply(k, v)) throw std::invalid_argument("unknown model config key '" + k + "'");
  }
  cfg.validate();
  return cfg;
}

namespace {

int encoder_out(const ModelConfig& c, int stage) { return stage == c.stages - 1 ? c.step_channels : c.encoder_width; }
int encoder_in(const ModelConfig& c, int stage) { return stage == 0 ? 2 : c.encoder_width; }
int decoder_in(const ModelConfig& c, int stage) { return stage == 0 ? c.packed_channels() : c.decoder_widths[stage - 1]; }

}  // namespace

std::int64_t count_params(const ModelConfig& c) {
  c.validate();
  const std::int64_t k2 = static_cast<std::int64_t>(c.kernel) * c.kernel;
  const std::int64_t D = c.packed_channels(), h = c.gate_hidden(), E = c.ffn_expansion * D;
  std::int64_t n = 0;
  for (int s = 0; s < c.stages; ++s) {
    const std::int64_t co = encoder_out(c, s);
    n += co * encoder_in(c, s) * k2 + co + 2 * co;
  }
  const std::int64_t block = 2 * D + D * c.mix_kernel1 * c.mix_kernel1 + D * c.mix_kernel2 * c.mix_kernel2 +
                             (D * D + D) + (h * D + h + D * h + D) + 2 * D + (E * D + E) + (D * E + D);
  n += block * c.blocks;
  for (int s = 0; s < c.stages; ++s) {
    const std::int64_t co = c.decoder_widths[s];
    n += co * decoder_in(c, s) * k2 + co + 2 * co;
  }
  n += 2LL * c.t_out * c.decoder_widths.back() + 2LL * c.t_out;
  return n;
}

// ---- parameters ----------------------------------------------------------

template <class T>
std::vector<Parameter<T>*> TideModel<T>::parameters() {
  std::vector<Parameter<T>*> out;
  auto conv = [&](ConvParams<T>& c) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
  };
  auto norm = [&](NormParams<T>& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
  };
  for (auto& s : encoder) {
    conv(s.conv);
    norm(s.norm);
  }
  for (auto& b : blocks) {
    norm(b.norm1);
    out.push_back(&b.mix1);
    out.push_back(&b.mix2);
    conv(b.proj);
    out.push_back(&b.gate_w1);
    out.push_back(&b.gate_b1);
    out.push_back(&b.gate_w2);
    out.push_back(&b.gate_b2);
    norm(b.norm2);
    conv(b.ffn1);
    conv(b.ffn2);
  }
  for (auto& s : decoder) {
    conv(s.conv);
    norm(s.norm);
  }
  conv(head);
  return out;
}

template <class T>
std::vector<const Parameter<T>*> TideModel<T>::parameters() const {
  auto ps = const_cast<TideModel*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

template <class T>
void TideModel<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <class T>
template <class U>
TideModel<U> TideModel<T>::cast() const {
  TideModel<U> out = init_params<U>(config, 0);
  auto dst = out.parameters();
  auto src = parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = src[i]->template cast<U>();
  return out;
}

template <class T>
std::int64_t count_params(const TideModel<T>& model) {
  std::int64_t n = 0;
  for (const auto* p : model.parameters()) n += static_cast<std::int64_t>(p->value.size());
  return n;
}

namespace {

template <class T>
Parameter<T> uniform_param(std::string name, Shape shape, std::int64_t fan_in, SeededRng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return Parameter<T>(std::move(name), std::move(t));
}

template <class T>
Parameter<T> const_param(std::string name, Shape shape, T value) {
  return Parameter<T>(std::move(name), Tensor<T>(std::move(shape), value));
}

template <class T>
ConvParams<T> make_conv(const std::string& name, int cout, int cin, int k, SeededRng& rng) {
  return {uniform_param<T>(name + ".weight", Shape{cout, cin, k, k}, static_cast<std::int64_t>(cin) * k * k, rng),
          const_param<T>(name + ".bias", Shape{cout}, T{0})};
}

template <class T>
NormParams<T> make_norm(const std::string& name, int c) {
  return {const_param<T>(name + ".gamma", Shape{c}, T{1}), const_param<T>(name + ".beta", Shape{c}, T{0})};
}

}  // namespace

template <class T>
TideModel<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  SeededRng rng(mix_seed(seed, 0x1417));
  TideModel<T> m;
  m.config = cfg;
  const int D = cfg.packed_channels(), h = cfg.gate_hidden(), E = cfg.ffn_expansion * D;
  for (int s = 0; s < cfg.stages; ++s) {
    const std::string n = "encoder." + std::to_string(s);
    const int co = encoder_out(cfg, s);
    m.encoder.push_back({make_conv<T>(n + ".conv", co, encoder_in(cfg, s), cfg.kernel, rng), make_norm<T>(n + ".norm", co)});
  }
  for (int b = 0; b < cfg.blocks; ++b) {
    const std::string n = "blocks." + std::to_string(b);
    TideBlockParams<T> p;
    p.norm1 = make_norm<T>(n + ".norm1", D);
    p.mix1 = uniform_param<T>(n + ".mix1", Shape{D, 1, cfg.mix_kernel1, cfg.mix_kernel1},
                              static_cast<std::int64_t>(cfg.mix_kernel1) * cfg.mix_kernel1, rng);
    p.mix2 = uniform_param<T>(n + ".mix2", Shape{D, 1, cfg.mix_kernel2, cfg.mix_kernel2},
                              static_cast<std::int64_t>(cfg.mix_kernel2) * cfg.mix_kernel2, rng);
    p.proj = make_conv<T>(n + ".proj", D, D, 1, rng);
    p.gate_w1 = uniform_param<T>(n + ".gate.w1", Shape{h, D}, D, rng);
    p.gate_b1 = const_param<T>(n + ".gate.b1", Shape{h}, T{0});
    p.gate_w2 = uniform_param<T>(n + ".gate.w2", Shape{D, h}, h, rng);
    p.gate_b2 = const_param<T>(n + ".gate.b2", Shape{D}, T{0});
    p.norm2 = make_norm<T>(n + ".norm2", D);
    p.ffn1 = make_conv<T>(n + ".ffn1", E, D, 1, rng);
    p.ffn2 = make_conv<T>(n + ".ffn2", D, E, 1, rng);
    m.blocks.push_back(std::move(p));
  }
  for (int s = 0; s < cfg.stages; ++s) {
    const std::string n = "decoder." + std::to_string(s);
    const int co = cfg.decoder_widths[s];
    m.decoder.push_back({make_conv<T>(n + ".conv", co, decoder_in(cfg, s), cfg.kernel, rng), make_norm<T>(n + ".norm", co)});
  }
  m.head = make_conv<T>("head", 2 * cfg.t_out, cfg.decoder_widths.back(), 1, rng);
  return m;
}

// ---- forward ---------------------------------------------------------------

namespace {

template <class T>
Var<T> conv_stage(Graph<T>& g, ConvStage<T>& s, const Var<T>& x, int stride, int pad) {
  auto y = conv2d(x, g.parameter(s.conv.weight), std::optional<Var<T>>(g.parameter(s.conv.bias)), stride, pad);
  y = layer_norm_channels(y, g.parameter(s.norm.gamma), g.parameter(s.norm.beta));
  return gelu(y);
}

template <class T>
Var<T> branch_drop(const Var<T>& x, double rate, const DropControl& drop) {
  if (drop.force_drop) {
    std::vector<T> zeros(static_cast<std::size_t>(x.value().dim(0)), T{0});
    return scale_samples<T>(x, zeros);
  }
  if (!drop.training || rate == 0.0) return x;
  if (!drop.rng) throw std::invalid_argument("drop-path in training mode needs an rng");
  return drop_path(x, rate, true, *drop.rng);
}

}  // namespace

template <class T>
Var<T> encode(TideModel<T>& model, const Var<T>& x) {
  const auto& cfg = model.config;
  const auto& xv = x.value();
  require_rank(xv.shape(), 5, "encode input");
  if (xv.dim(1) != cfg.t_in) throw ShapeError("encode: input dimension 1 (time) is " + std::to_string(xv.dim(1)) +
                                              ", expected t_in=" + std::to_string(cfg.t_in));
  if (xv.dim(2) != 2) throw ShapeError("encode: input dimension 2 (polarity) must be 2");
  if (xv.dim(3) != cfg.height || xv.dim(4) != cfg.width)
    throw ShapeError("encode: input spatial size " + std::to_string(xv.dim(3)) + "x" + std::to_string(xv.dim(4)) +
                     " does not match config " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  auto& g = x.graph();
  auto h = reshape(x, Shape{xv.dim(0) * cfg.t_in, 2, cfg.height, cfg.width});
  for (auto& s : model.encoder) h = conv_stage(g, s, h, 2, cfg.kernel / 2);
  return h;
}

template <class T>
Var<T> pack_time(const Var<T>& e, int t_in) {
  const auto& s = e.shape();
  require_rank(s, 4, "pack_time input");
  if (t_in < 1 || s[0] % t_in != 0)
    throw ShapeError("pack_time: dimension 0 (" + std::to_string(s[0]) + ") is not a multiple of t_in=" + std::to_string(t_in));
  return reshape(e, Shape{s[0] / t_in, s[1] * t_in, s[2], s[3]});
}

template <class T>
Var<T> unpack_time(const Var<T>& z, int t_in) {
  const auto& s = z.shape();
  require_rank(s, 4, "unpack_time input");
  if (t_in < 1 || s[1] % t_in != 0)
    throw ShapeError("unpack_time: dimension 1 (" + std::to_string(s[1]) + ") is not a multiple of t_in=" + std::to_string(t_in));
  return reshape(z, Shape{s[0] * t_in, s[1] / t_in, s[2], s[3]});
}

template <class T>
Var<T> tide_core(const ModelConfig& cfg, TideBlockParams<T>& p, const Var<T>& un, TideCoreTrace<T>* trace) {
  auto& g = un.graph();
  auto a1 = conv2d_depthwise(un, g.parameter(p.mix1), 1, (cfg.mix_kernel1 - 1) / 2);
  auto a2 = conv2d_depthwise(a1, g.parameter(p.mix2), cfg.mix_dilation, cfg.mix_dilation * (cfg.mix_kernel2 - 1) / 2);
  auto features = conv2d_pointwise(a2, g.parameter(p.proj.weight), std::optional<Var<T>>(g.parameter(p.proj.bias)));

  auto pooled = activity_masked_pool(un, cfg.mask_quantile, cfg.masked_pooling);
  auto hidden = relu(linear(pooled, g.parameter(p.gate_w1), std::optional<Var<T>>(g.parameter(p.gate_b1))));
  auto gate = sigmoid(linear(hidden, g.parameter(p.gate_w2), std::optional<Var<T>>(g.parameter(p.gate_b2))));
  if (trace) {
    trace->gate = gate.value();
    if (cfg.masked_pooling) {
      trace->mask_count = activity_mask(un.value(), cfg.mask_quantile).count;
    } else {
      trace->mask_count.assign(static_cast<std::size_t>(un.value().dim(0)), un.value().dim(2) * un.value().dim(3));
    }
  }
  auto out = mul_channel(features, gate);
  if (cfg.multiplicative_residual) out = mul(out, add_scalar(un, 1.0));
  return out;
}

template <class T>
Var<T> tide_block(const ModelConfig& cfg, TideBlockParams<T>& p, const Var<T>& u, const DropControl& drop,
                  TideCoreTrace<T>* trace) {
  auto& g = u.graph();
  auto n1 = layer_norm_channels(u, g.parameter(p.norm1.gamma), g.parameter(p.norm1.beta));
  auto mixed = add(u, branch_drop(tide_core(cfg, p, n1, trace), cfg.drop_path, drop));
  auto n2 = layer_norm_channels(mixed, g.parameter(p.norm2.gamma), g.parameter(p.norm2.beta));
  auto f = conv2d_pointwise(n2, g.parameter(p.ffn1.weight), std::optional<Var<T>>(g.parameter(p.ffn1.bias)));
  f = conv2d_pointwise(gelu(f), g.parameter(p.ffn2.weight), std::optional<Var<T>>(g.parameter(p.ffn2.bias)));
  return add(mixed, branch_drop(f, cfg.drop_path, drop));
}

template <class T>
Var<T> decode(TideModel<T>& model, const Var<T>& z) {
  const auto& cfg = model.config;
  require_rank(z.shape(), 4, "decode input");
  if (z.shape()[1] != cfg.packed_channels())
    throw ShapeError("decode: input dimension 1 is " + std::to_string(z.shape()[1]) + ", expected " +
                     std::to_string(cfg.packed_channels()));
  auto& g = z.graph();
  auto h = z;
  for (auto& s : model.decoder) h = conv_stage(g, s, upsample_nearest2x(h), 1, cfg.kernel / 2);
  h = conv2d_pointwise(h, g.parameter(model.head.weight), std::optional<Var<T>>(g.parameter(model.head.bias)));
  const auto& hs = h.shape();
  return reshape(h, Shape{hs[0], cfg.t_out, 2, hs[2], hs[3]});
}

template <class T>
Var<T> forward(TideModel<T>& model, const Var<T>& x, const DropControl& drop) {
  auto z = pack_time(encode(model, x), model.config.t_in);
  for (auto& b : model.blocks) z = tide_block(model.config, b, z, drop);
  return decode(model, z);
}

Tensor<float> predict_probabilities(const TideModel<float>& model, const Tensor<float>& x) {
  Graph<float> g(false);
  // A grad-free graph copies parameter values and never writes gradients.
  auto& m = const_cast<TideModel<float>&>(model);
  auto probs = sigmoid(forward(m, g.constant(x)));
  return probs.value();
}

// ---- checkpoints ---------------------------------------------------------

std::vector<std::uint8_t> encode_etw(const WeightFile& w) {
  detail::ByteWriter out;
  out.magic("ETW1");
  out.u32(1);
  out.u32(static_cast<std::uint32_t>(w.tensors.size()));
  for (const auto& [name, t] : w.tensors) {
    if (name.size() > 0xffff) throw std::invalid_argument("ETW1: parameter name too long");
    out.u16(static_cast<std::uint16_t>(name.size()));
    out.magic(name);
    out.u8(static_cast<std::uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) out.u32(static_cast<std::uint32_t>(t.dim(i)));
    for (float v : t.data()) out.f32(v);
  }
  const auto& items = w.meta.items();
  out.u32(static_cast<std::uint32_t>(items.size()));
  for (const auto& [k, v] : items) {
    const std::string line = k + "=" + v;
    out.u32(static_cast<std::uint32_t>(line.size()));
    out.magic(line);
  }
  return out.buffer();
}

WeightFile decode_etw(std::span<const std::uint8_t> bytes) {
  detail::ByteReader in(bytes, "ETW1");
  in.expect_magic("ETW1");
  const auto version = in.u32();
  if (version != 1) throw FormatError("ETW1: unsupported version " + std::to_string(version));
  const auto count = in.u32();
  WeightFile w;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.u16();
    auto name_bytes = in.take(len);
    std::string name(name_bytes.begin(), name_bytes.end());
    const auto rank = in.u8();
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    const auto n = static_cast<std::size_t>(shape_numel(shape));
    in.need(n * 4);
    std::vector<float> data(n);
    for (auto& v : data) v = in.f32();
    w.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  const auto lines = in.u32();
  std::string text;
  for (std::uint32_t i = 0; i < lines; ++i) {
    const auto len = in.u32();
    auto line = in.take(len);
    text.append(line.begin(), line.end());
    text.push_back('\n');
  }
  try {
    w.meta = KeyValues::parse(text, "ETW1 metadata");
  } catch (const std::invalid_argument& e) {
    throw FormatError(e.what());
  }
  return w;
}

void write_etw(const std::filesystem::path& path, const WeightFile& w) { detail::write_file_atomic(path, encode_etw(w)); }

WeightFile read_etw(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  return decode_etw(data);
}

void save_checkpoint(const std::filesystem::path& path, const TideModel<float>& model) {
  WeightFile w;
  for (const auto* p : model.parameters()) w.tensors.emplace_back(p->name, p->value);
  model.config.write(w.meta);
  write_etw(path, w);
}

TideModel<float> load_checkpoint(const std::filesystem::path& path) {
  auto w = read_etw(path);
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from(w.meta);
  } catch (const std::invalid_argument& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  auto model = init_params<float>(cfg, 0);
  auto params = model.parameters();
  if (params.size() != w.tensors.size())
    throw FormatError(path.string() + ": holds " + std::to_string(w.tensors.size()) + " tensors, config implies " +
                      std::to_string(params.size()));
  std::unordered_map<std::string, Tensor<float>*> by_name;
  for (auto& [name, t] : w.tensors) by_name[name] = &t;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw FormatError(path.string() + ": missing parameter " + p->name);
    if (it->second->shape() != p->value.shape())
      throw FormatError(path.string() + ": parameter " + p->name + " has shape " + shape_str(it->second->shape()) +
                        ", expected " + shape_str(p->value.shape()));
    p->value = std::move(*it->second);
    p->zero_grad();
  }
  return model;
}

#define ETIDE_INSTANTIATE_MODEL(T)                                                                               \
  template struct TideModel<T>;                                                                                  \
  template std::int64_t count_params(const TideModel<T>&);                                                       \
  template TideModel<T> init_params<T>(const ModelConfig&, std::uint64_t);                                       \
  template Var<T> encode(TideModel<T>&, const Var<T>&);                                                          \
  template Var<T> pack_time(const Var<T>&, int);                                                                 \
  template Var<T> unpack_time(const Var<T>&, int);                                                               \
  template Var<T> tide_core(const ModelConfig&, TideBlockParams<T>&, const Var<T>&, TideCoreTrace<T>*);          \
  template Var<T> tide_block(const ModelConfig&, TideBlockParams<T>&, const Var<T>&, const DropControl&,         \
                             TideCoreTrace<T>*);                                                                 \
  template Var<T> decode(TideModel<T>&, const Var<T>&);                                                          \
  template Var<T> forward(TideModel<T>&, const Var<T>&, const DropControl&);

ETIDE_INSTANTIATE_MODEL(float)
ETIDE_INSTANTIATE_MODEL(double)

template TideModel<double> TideModel<float>::cast<double>() const;
template TideModel<float> TideModel<double>::cast<float>() const;
template TideModel<float> TideModel<float>::cast<float>() const;

}  // namespace etide
