#include "etide/events.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "binary_io.hpp"

namespace etide {

void EventStream::validate() const {
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    if (e.u >= width || e.v >= height)
      throw std::invalid_argument("event record " + std::to_string(i) + " at (u=" + std::to_string(e.u) +
                                  ", v=" + std::to_string(e.v) + ") outside " + std::to_string(width) + "x" +
                                  std::to_string(height) + " sensor");
    if (e.p != 1 && e.p != -1)
      throw std::invalid_argument("event record " + std::to_string(i) + " has polarity " + std::to_string(e.p));
    if (i > 0 && e.t < events[i - 1].t)
      throw std::invalid_argument("event record " + std::to_string(i) + " breaks time ordering");
  }
}

std::int64_t OccurrenceTensor::count_ones() const {
  std::int64_t n = 0;
  for (auto v : frames.data()) n += v;
  return n;
}

OccurrenceTensor bin_events(const EventStream& stream, std::uint64_t t0, std::uint64_t bin_duration, int steps) {
  if (bin_duration == 0) throw std::invalid_argument("bin_events: bin_duration must be > 0");
  if (steps < 1) throw std::invalid_argument("bin_events: need at least one time bin");
  const std::int64_t H = stream.height, W = stream.width;
  OccurrenceTensor out{Tensor<std::uint8_t>(Shape{steps, 2, H, W}), t0, bin_duration};
  const std::uint64_t t_end = t0 + bin_duration * static_cast<std::uint64_t>(steps);
  auto* f = out.frames.ptr();
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const auto& e = stream.events[i];
    if (e.u >= stream.width || e.v >= stream.height)
      throw std::invalid_argument("bin_events: record " + std::to_string(i) + " at (u=" + std::to_string(e.u) +
                                  ", v=" + std::to_string(e.v) + ") is outside the sensor");
    if (e.p != 1 && e.p != -1)
      throw std::invalid_argument("bin_events: record " + std::to_string(i) + " has invalid polarity");
    if (e.t < t0 || e.t >= t_end) continue;
    const auto t = static_cast<std::int64_t>((e.t - t0) / bin_duration);
    const std::int64_t c = e.p > 0 ? kOnChannel : kOffChannel;
    f[((t * 2 + c) * H + e.v) * W + e.u] = 1;
  }
  return out;
}

OccurrenceTensor downsample_or(const OccurrenceTensor& x, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_or: factor must be >= 1");
  const std::int64_t T = x.steps(), C = x.channels(), H = x.height(), W = x.width();
  if (H % factor != 0) throw ShapeError("downsample_or: height " + std::to_string(H) + " not divisible by " + std::to_string(factor));
  if (W % factor != 0) throw ShapeError("downsample_or: width " + std::to_string(W) + " not divisible by " + std::to_string(factor));
  const std::int64_t h = H / factor, w = W / factor;
  OccurrenceTensor out{Tensor<std::uint8_t>(Shape{T, C, h, w}), x.t0, x.bin_duration};
  const auto* src = x.frames.ptr();
  auto* dst = out.frames.ptr();
  for (std::int64_t p = 0; p < T * C; ++p)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t xx = 0; xx < W; ++xx) dst[(p * h + y / factor) * w + xx / factor] |= src[(p * H + y) * W + xx];
  return out;
}

OccurrenceTensor crop(const OccurrenceTensor& x, int top, int left, int h, int w) {
  const std::int64_t T = x.steps(), C = x.channels(), H = x.height(), W = x.width();
  if (top < 0 || left < 0 || h < 1 || w < 1 || top + h > H || left + w > W)
    throw std::out_of_range("crop window (" + std::to_string(top) + "," + std::to_string(left) + ") " +
                            std::to_string(h) + "x" + std::to_string(w) + " exceeds " + std::to_string(H) + "x" +
                            std::to_string(W));
  OccurrenceTensor out{Tensor<std::uint8_t>(Shape{T, C, h, w}), x.t0, x.bin_duration};
  for (std::int64_t p = 0; p < T * C; ++p)
    for (int y = 0; y < h; ++y) {
      const auto* src = x.frames.ptr() + (p * H + top + y) * W + left;
      std::copy(src, src + w, out.frames.ptr() + (p * h + y) * w);
    }
  return out;
}

CropWindow sample_active_crop(const OccurrenceTensor& x, int h, int w, std::int64_t min_active, SeededRng& rng,
                              int max_tries) {
  const std::int64_t T = x.steps(), C = x.channels(), H = x.height(), W = x.width();
  if (h < 1 || w < 1 || h > H || w > W) throw std::out_of_range("sample_active_crop: window larger than frame");
  // Integral image of per-pixel event counts summed over time and polarity.
  std::vector<std::int64_t> integral(static_cast<std::size_t>((H + 1) * (W + 1)), 0);
  for (std::int64_t y = 0; y < H; ++y) {
    std::int64_t row = 0;
    for (std::int64_t xx = 0; xx < W; ++xx) {
      for (std::int64_t p = 0; p < T * C; ++p) row += x.frames[static_cast<std::size_t>((p * H + y) * W + xx)];
      integral[static_cast<std::size_t>((y + 1) * (W + 1) + xx + 1)] = integral[static_cast<std::size_t>(y * (W + 1) + xx + 1)] + row;
    }
  }
  auto window_sum = [&](int top, int left) {
    auto at = [&](std::int64_t y, std::int64_t xx) { return integral[static_cast<std::size_t>(y * (W + 1) + xx)]; };
    return at(top + h, left + w) - at(top, left + w) - at(top + h, left) + at(top, left);
  };
  CropWindow best{};
  std::int64_t best_sum = -1;
  for (int i = 0; i < std::max(1, max_tries); ++i) {
    const CropWindow c{static_cast<int>(rng.below(static_cast<std::uint64_t>(H - h + 1))),
                       static_cast<int>(rng.below(static_cast<std::uint64_t>(W - w + 1)))};
    const auto s = window_sum(c.top, c.left);
    if (s >= min_active) return c;
    if (s > best_sum) {
      best_sum = s;
      best = c;
    }
  }
  return best;
}

OccurrenceTensor slice_steps(const OccurrenceTensor& x, int first, int count) {
  if (first < 0 || count < 1 || first + count > x.steps())
    throw std::out_of_range("slice_steps: [" + std::to_string(first) + ", " + std::to_string(first + count) +
                            ") outside " + std::to_string(x.steps()) + " steps");
  const std::int64_t per = x.channels() * x.height() * x.width();
  std::vector<std::uint8_t> data(x.frames.ptr() + first * per, x.frames.ptr() + (first + count) * per);
  return OccurrenceTensor{Tensor<std::uint8_t>(Shape{count, x.channels(), x.height(), x.width()}, std::move(data)),
                          x.t0 + static_cast<std::uint64_t>(first) * x.bin_duration, x.bin_duration};
}

// ---- synthetic scenes ----------------------------------------------------

namespace {

struct Rect {
  int x0, y0, x1, y1;  // half-open, clipped to the sensor
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  bool operator==(const Rect&) const = default;
};

Rect object_rect(const MovingObject& o, double t_bins, int W, int H) {
  double x = o.x + o.vx * t_bins;
  double y = o.y + o.vy * t_bins;
  if (o.period_bins > 0.0) {
    const double phase = 2.0 * std::numbers::pi * t_bins / o.period_bins;
    x += o.amp_x * std::sin(phase);
    y += o.amp_y * std::sin(phase);
  }
  const auto fx = static_cast<long long>(std::floor(x));
  const auto fy = static_cast<long long>(std::floor(y));
  auto clip = [](long long v, int hi) { return static_cast<int>(std::clamp<long long>(v, 0, hi)); };
  return Rect{clip(fx, W), clip(fy, H), clip(fx + o.w, W), clip(fy + o.h, H)};
}

}  // namespace

EventStream synth_scene(const SceneSpec& spec, std::uint64_t seed) {
  if (spec.bins < 1 || spec.substeps < 1 || spec.bin_duration == 0)
    throw std::invalid_argument("synth_scene: bins, substeps and bin_duration must be positive");
  EventStream out{spec.width, spec.height, {}};
  const int W = spec.width, H = spec.height;
  const int total = spec.bins * spec.substeps;
  for (std::size_t oi = 0; oi < spec.objects.size(); ++oi) {
    const auto& obj = spec.objects[oi];
    if (obj.w < 1 || obj.h < 1) throw std::invalid_argument("synth_scene: object sizes must be >= 1");
    SeededRng rng(mix_seed(seed, oi));
    Rect prev = object_rect(obj, 0.0, W, H);
    for (int s = 1; s <= total; ++s) {
      const Rect cur = object_rect(obj, static_cast<double>(s) / spec.substeps, W, H);
      if (cur == prev) continue;
      const std::uint64_t begin = static_cast<std::uint64_t>(s - 1) * spec.bin_duration / static_cast<std::uint64_t>(spec.substeps);
      const std::uint64_t end = static_cast<std::uint64_t>(s) * spec.bin_duration / static_cast<std::uint64_t>(spec.substeps);
      const std::uint64_t span = std::max<std::uint64_t>(1, end - begin);
      const int y0 = std::min(prev.y0, cur.y0), y1 = std::max(prev.y1, cur.y1);
      const int x0 = std::min(prev.x0, cur.x0), x1 = std::max(prev.x1, cur.x1);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const bool was = prev.contains(x, y), now = cur.contains(x, y);
          if (was == now) continue;
          out.events.push_back(EventRecord{begin + rng.below(span), static_cast<std::uint16_t>(x),
                                           static_cast<std::uint16_t>(y), static_cast<std::int8_t>(now ? 1 : -1)});
        }
      prev = cur;
    }
  }
  std::sort(out.events.begin(), out.events.end());
  return out;
}

SceneSpec random_bar_scene(std::uint16_t width, std::uint16_t height, int bins, SeededRng& rng, int min_objects,
                           int max_objects) {
  if (min_objects < 0 || max_objects < min_objects)
    throw std::invalid_argument("random_bar_scene: object range must satisfy 0 <= min <= max");
  SceneSpec spec;
  spec.width = width;
  spec.height = height;
  spec.bins = bins;
  const int n = min_objects + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_objects - min_objects + 1)));
  for (int i = 0; i < n; ++i) {
    MovingObject o;
    const bool vertical = rng.bernoulli(0.5);
    const int thick = 3 + static_cast<int>(rng.below(8));
    const int length = std::max(4, static_cast<int>(std::min(width, height) * rng.uniform(0.1, 0.35)));
    o.w = vertical ? thick : length;
    o.h = vertical ? length : thick;
    const double speed = rng.uniform(1.0, 3.0);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    o.vx = speed * std::cos(angle);
    o.vy = speed * std::sin(angle);
    // Centre the trajectory's midpoint inside the middle of the frame.
    const double cx = rng.uniform(0.2, 0.8) * width;
    const double cy = rng.uniform(0.2, 0.8) * height;
    o.x = cx - o.w / 2.0 - o.vx * bins / 2.0;
    o.y = cy - o.h / 2.0 - o.vy * bins / 2.0;
    spec.objects.push_back(o);
  }
  return spec;
}

// ---- files ---------------------------------------------------------------

std::vector<std::uint8_t> encode_evt(const EventStream& stream) {
  detail::ByteWriter w;
  w.magic("EVT1");
  w.u16(stream.width);
  w.u16(stream.height);
  w.u64(stream.events.size());
  for (const auto& e : stream.events) {
    w.u64(e.t);
    w.u16(e.u);
    w.u16(e.v);
    w.i8(e.p);
    w.zeros(3);
  }
  return w.buffer();
}

EventStream decode_evt(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "EVT1");
  r.expect_magic("EVT1");
  EventStream s;
  s.width = r.u16();
  s.height = r.u16();
  const auto count = r.u64();
  if (count > r.remaining() / 16) throw FormatError("EVT1: truncated file");
  s.events.resize(static_cast<std::size_t>(count));
  for (auto& e : s.events) {
    e.t = r.u64();
    e.u = r.u16();
    e.v = r.u16();
    e.p = r.i8();
    r.skip(3);
  }
  try {
    s.validate();
  } catch (const std::invalid_argument& ex) {
    throw FormatError(std::string("EVT1: ") + ex.what());
  }
  return s;
}

std::vector<std::uint8_t> encode_ocm(const OccurrenceTensor& x) {
  if (x.frames.rank() != 4) throw ShapeError("OCM1 needs a rank-4 tensor, got " + shape_str(x.frames.shape()));
  detail::ByteWriter w;
  w.magic("OCM1");
  for (int i = 0; i < 4; ++i) w.u32(static_cast<std::uint32_t>(x.frames.dim(i)));
  w.u64(x.t0);
  w.u64(x.bin_duration);
  w.u8(0);
  w.bytes(x.frames.ptr(), x.frames.size());
  return w.buffer();
}

OccurrenceTensor decode_ocm(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "OCM1");
  r.expect_magic("OCM1");
  Shape shape(4);
  for (auto& d : shape) d = r.u32();
  OccurrenceTensor x;
  x.t0 = r.u64();
  x.bin_duration = r.u64();
  const auto dtype = r.u8();
  if (dtype != 0) throw FormatError("OCM1: dtype " + std::to_string(dtype) + " is not a binary occurrence payload");
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  auto payload = r.take(n);
  std::vector<std::uint8_t> data(payload.begin(), payload.end());
  for (auto v : data)
    if (v > 1) throw FormatError("OCM1: payload value " + std::to_string(v) + " is not binary");
  x.frames = Tensor<std::uint8_t>(shape, std::move(data));
  return x;
}

std::vector<std::uint8_t> encode_probability_ocm(const ProbabilityMaps& x) {
  if (x.probs.rank() != 4) throw ShapeError("OCM1 needs a rank-4 tensor, got " + shape_str(x.probs.shape()));
  detail::ByteWriter w;
  w.magic("OCM1");
  for (int i = 0; i < 4; ++i) w.u32(static_cast<std::uint32_t>(x.probs.dim(i)));
  w.u64(x.t0);
  w.u64(x.bin_duration);
  w.u8(1);
  for (float v : x.probs.data()) w.f32(v);
  return w.buffer();
}

ProbabilityMaps decode_probability_ocm(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes, "OCM1");
  r.expect_magic("OCM1");
  Shape shape(4);
  for (auto& d : shape) d = r.u32();
  ProbabilityMaps x;
  x.t0 = r.u64();
  x.bin_duration = r.u64();
  const auto dtype = r.u8();
  if (dtype != 1) throw FormatError("OCM1: dtype " + std::to_string(dtype) + " is not a probability payload");
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  r.need(n * 4);
  std::vector<float> data(n);
  for (auto& v : data) v = r.f32();
  x.probs = Tensor<float>(shape, std::move(data));
  return x;
}

void write_probability_ocm(const std::filesystem::path& path, const ProbabilityMaps& x) {
  detail::write_file_atomic(path, encode_probability_ocm(x));
}

ProbabilityMaps read_probability_ocm(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  return decode_probability_ocm(data);
}

void write_evt(const std::filesystem::path& path, const EventStream& stream) {
  detail::write_file_atomic(path, encode_evt(stream));
}

EventStream read_evt(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  return decode_evt(data);
}

void write_ocm(const std::filesystem::path& path, const OccurrenceTensor& x) {
  detail::write_file_atomic(path, encode_ocm(x));
}

OccurrenceTensor read_ocm(const std::filesystem::path& path) {
  const auto data = detail::read_file(path);
  return decode_ocm(data);
}

}  // namespace etide
