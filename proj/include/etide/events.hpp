#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "etide/io_error.hpp"
#include "etide/rng.hpp"
#include "etide/tensor.hpp"

namespace etide {

/// One asynchronous brightness-change event. u is the column, v the row.
struct EventRecord {
  std::uint64_t t = 0;  // microseconds
  std::uint16_t u = 0;
  std::uint16_t v = 0;
  std::int8_t p = 1;  // +1 ON, -1 OFF

  auto operator<=>(const EventRecord&) const = default;
};

struct EventStream {
  std::uint16_t width = 0;
  std::uint16_t height = 0;
  std::vector<EventRecord> events;  // non-decreasing in t

  /// Throws std::invalid_argument naming the first offending record.
  void validate() const;
  bool operator==(const EventStream&) const = default;
};

inline constexpr int kOnChannel = 0;
inline constexpr int kOffChannel = 1;
/// 30 Hz bins.
inline constexpr std::uint64_t kDefaultBinDurationUs = 33'333;

/// Binary occurrence maps, frames[t, c, row, col] in {0,1}; channel 0 is ON, 1 is OFF.
struct OccurrenceTensor {
  Tensor<std::uint8_t> frames;
  std::uint64_t t0 = 0;
  std::uint64_t bin_duration = kDefaultBinDurationUs;

  std::int64_t steps() const { return frames.dim(0); }
  std::int64_t channels() const { return frames.dim(1); }
  std::int64_t height() const { return frames.dim(2); }
  std::int64_t width() const { return frames.dim(3); }
  std::int64_t count_ones() const;
  bool operator==(const OccurrenceTensor&) const = default;
};

/// frames[t,c,v,u] = 1 iff some event of polarity c fell in [t0 + t*bin, t0 + (t+1)*bin).
OccurrenceTensor bin_events(const EventStream& stream, std::uint64_t t0, std::uint64_t bin_duration, int steps);

/// Each output pixel is the OR of its factor x factor source block.
OccurrenceTensor downsample_or(const OccurrenceTensor& x, int factor);

/// Exact sub-window [top, top+h) x [left, left+w) of every frame and channel.
OccurrenceTensor crop(const OccurrenceTensor& x, int top, int left, int h, int w);

/// Picks a random h x w window whose total event count is at least `min_active`.
/// Falls back to the most active of `max_tries` candidates.
struct CropWindow {
  int top = 0;
  int left = 0;
};
CropWindow sample_active_crop(const OccurrenceTensor& x, int h, int w, std::int64_t min_active, SeededRng& rng,
                              int max_tries = 64);

/// Frames [first, first+count) as a new tensor.
OccurrenceTensor slice_steps(const OccurrenceTensor& x, int first, int count);

// ---- synthetic scenes ----------------------------------------------------

/// Bright axis-aligned rectangle on a dark background. Position (top-left, in
/// pixels) at time s bins is origin + velocity*s + amplitude*sin(2*pi*s/period).
struct MovingObject {
  double x = 0.0;
  double y = 0.0;
  int w = 1;
  int h = 1;
  double vx = 0.0;  // pixels per bin
  double vy = 0.0;
  double amp_x = 0.0;
  double amp_y = 0.0;
  double period_bins = 0.0;  // 0 disables the sinusoidal term
};

struct SceneSpec {
  std::uint16_t width = 128;
  std::uint16_t height = 128;
  int bins = 20;
  std::uint64_t bin_duration = kDefaultBinDurationUs;
  /// Motion is sampled this many times per bin; each sample may emit events.
  int substeps = 4;
  std::vector<MovingObject> objects;
};

/// Edge-triggered events: pixels an object newly covers fire ON, pixels it
/// leaves fire OFF. Timestamps are jittered within each substep from `seed`.
/// Output is sorted by (t, u, v, p).
EventStream synth_scene(const SceneSpec& spec, std::uint64_t seed);

/// Random moving-bar scene used for desk-scale datasets.
SceneSpec random_bar_scene(std::uint16_t width, std::uint16_t height, int bins, SeededRng& rng, int min_objects = 1,
                           int max_objects = 3);

// ---- files ---------------------------------------------------------------

void write_evt(const std::filesystem::path& path, const EventStream& stream);
EventStream read_evt(const std::filesystem::path& path);
void write_ocm(const std::filesystem::path& path, const OccurrenceTensor& x);
OccurrenceTensor read_ocm(const std::filesystem::path& path);

/// Forecast probabilities stored as OCM1 with a float32 payload (dtype 1).
struct ProbabilityMaps {
  Tensor<float> probs;  // [T,2,H,W]
  std::uint64_t t0 = 0;
  std::uint64_t bin_duration = kDefaultBinDurationUs;
};

void write_probability_ocm(const std::filesystem::path& path, const ProbabilityMaps& x);
ProbabilityMaps read_probability_ocm(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_probability_ocm(const ProbabilityMaps& x);
ProbabilityMaps decode_probability_ocm(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_evt(const EventStream& stream);
EventStream decode_evt(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ocm(const OccurrenceTensor& x);
OccurrenceTensor decode_ocm(std::span<const std::uint8_t> bytes);

}  // namespace etide
