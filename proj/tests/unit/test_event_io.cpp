#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "etide/events.hpp"

using namespace etide;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("etide_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::uint8_t at(const OccurrenceTensor& x, int t, int c, int v, int u) {
  return x.frames[static_cast<std::size_t>(((t * x.channels() + c) * x.height() + v) * x.width() + u)];
}

OccurrenceTensor random_occupancy(int T, int H, int W, double density, SeededRng& rng) {
  OccurrenceTensor x{Tensor<std::uint8_t>(Shape{T, 2, H, W})};
  for (auto& v : x.frames.data()) v = rng.bernoulli(density) ? 1 : 0;
  return x;
}

std::int64_t ones(const OccurrenceTensor& x) { return x.count_ones(); }

}  // namespace

// ---- binning ------------------------------------------------------------------------

TEST_CASE("duplicate events set one indicator") {
  EventStream s{8, 8, {{10, 2, 3, 1}, {10, 2, 3, 1}}};
  const auto x = bin_events(s, 0, 100, 1);
  CHECK(at(x, 0, kOnChannel, 3, 2) == 1);
  CHECK(ones(x) == 1);
}

TEST_CASE("empty stream bins to zeros") {
  EventStream s{4, 4, {}};
  const auto x = bin_events(s, 0, 10, 3);
  CHECK(x.frames.shape() == Shape{3, 2, 4, 4});
  CHECK(ones(x) == 0);
}

TEST_CASE("hand bin assignment") {
  EventStream s{4, 4, {{5, 1, 1, 1}, {35, 1, 1, -1}}};
  const auto x = bin_events(s, 0, 30, 2);
  CHECK(at(x, 0, kOnChannel, 1, 1) == 1);
  CHECK(at(x, 1, kOffChannel, 1, 1) == 1);
  CHECK(ones(x) == 2);
}

TEST_CASE("events outside the window are ignored; bin edges are half-open") {
  EventStream s{4, 4, {{99, 0, 0, 1}, {100, 1, 0, 1}, {129, 2, 0, 1}, {130, 3, 0, 1}}};
  const auto x = bin_events(s, 100, 10, 3);
  CHECK(ones(x) == 2);
  CHECK(at(x, 0, 0, 0, 1) == 1);
  CHECK(at(x, 2, 0, 0, 2) == 1);
  CHECK(x.t0 == 100);
  CHECK(x.bin_duration == 10);
}

TEST_CASE("binning errors") {
  EventStream s{4, 4, {{1, 4, 0, 1}}};
  try {
    bin_events(s, 0, 10, 1);
    FAIL("expected an error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("record 0") != std::string::npos);
  }
  EventStream ok{4, 4, {}};
  CHECK_THROWS(bin_events(ok, 0, 0, 1));
  CHECK_THROWS(bin_events(ok, 0, 10, 0));
}

TEST_CASE("binning is order invariant and monotone under union") {
  SeededRng rng(1);
  EventStream s{16, 12, {}};
  for (int i = 0; i < 300; ++i)
    s.events.push_back({rng.below(1000), static_cast<std::uint16_t>(rng.below(16)),
                        static_cast<std::uint16_t>(rng.below(12)), static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : -1)});
  std::sort(s.events.begin(), s.events.end());
  const auto base = bin_events(s, 0, 100, 10);

  // Reorder within bins: same timestamps bucket, shuffled order of u/v.
  auto shuffled = s;
  std::stable_sort(shuffled.events.begin(), shuffled.events.end(),
                   [](const EventRecord& a, const EventRecord& b) { return a.t / 100 < b.t / 100; });
  std::reverse(shuffled.events.begin(), shuffled.events.end());
  std::stable_sort(shuffled.events.begin(), shuffled.events.end(),
                   [](const EventRecord& a, const EventRecord& b) { return a.t / 100 < b.t / 100; });
  CHECK(bin_events(shuffled, 0, 100, 10) == base);

  auto more = s;
  for (int i = 0; i < 50; ++i)
    more.events.push_back({rng.below(1000), static_cast<std::uint16_t>(rng.below(16)),
                           static_cast<std::uint16_t>(rng.below(12)), 1});
  std::sort(more.events.begin(), more.events.end());
  const auto bigger = bin_events(more, 0, 100, 10);
  for (std::size_t i = 0; i < base.frames.size(); ++i)
    if (base.frames[i]) CHECK(bigger.frames[i] == 1);
}

// ---- downsample / crop -------------------------------------------------------------------

TEST_CASE("downsample_or examples") {
  OccurrenceTensor z{Tensor<std::uint8_t>(Shape{1, 2, 8, 8})};
  CHECK(ones(downsample_or(z, 4)) == 0);

  OccurrenceTensor one{Tensor<std::uint8_t>(Shape{1, 1, 4, 4})};
  one.frames[6] = 1;
  const auto d = downsample_or(one, 4);
  CHECK(d.frames.shape() == Shape{1, 1, 1, 1});
  CHECK(d.frames[0] == 1);

  SeededRng rng(2);
  const auto big = random_occupancy(1, 512, 512, 0.01, rng);
  const auto small = downsample_or(big, 4);
  const double din = static_cast<double>(ones(big)) / static_cast<double>(big.frames.size());
  const double dout = static_cast<double>(ones(small)) / static_cast<double>(small.frames.size());
  CHECK(dout >= din);
  CHECK(downsample_or(downsample_or(big, 2), 2) == small);
  CHECK_THROWS_AS(downsample_or(big, 3), ShapeError);
}

TEST_CASE("crop examples") {
  OccurrenceTensor x{Tensor<std::uint8_t>(Shape{1, 1, 4, 4})};
  // Pattern: 1 where the row-major index is a multiple of 3.
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) x.frames[static_cast<std::size_t>(r * 4 + c)] = static_cast<std::uint8_t>((r * 4 + c) % 3 == 0);
  CHECK(crop(x, 0, 0, 4, 4) == x);
  const auto c = crop(x, 2, 2, 2, 2);
  // indices (2,2)=10, (2,3)=11, (3,2)=14, (3,3)=15 -> %3==0 only for 15
  CHECK(c.frames[0] == 0);
  CHECK(c.frames[1] == 0);
  CHECK(c.frames[2] == 0);
  CHECK(c.frames[3] == 1);
  CHECK_THROWS(crop(x, 3, 3, 2, 2));
  CHECK_THROWS(crop(x, -1, 0, 2, 2));
}

TEST_CASE("active crop honours the minimum event count") {
  OccurrenceTensor x{Tensor<std::uint8_t>(Shape{2, 2, 64, 64})};
  for (int y = 50; y < 54; ++y)
    for (int c = 50; c < 54; ++c) x.frames[static_cast<std::size_t>(y * 64 + c)] = 1;
  SeededRng rng(3);
  const auto w = sample_active_crop(x, 16, 16, 16, rng, 500);
  const auto cropped = crop(x, w.top, w.left, 16, 16);
  CHECK(ones(cropped) == 16);
}

TEST_CASE("slice_steps shifts t0") {
  OccurrenceTensor x{Tensor<std::uint8_t>(Shape{5, 2, 2, 2}), 1000, 10};
  x.frames[3 * 8] = 1;
  const auto s = slice_steps(x, 3, 2);
  CHECK(s.steps() == 2);
  CHECK(s.t0 == 1030);
  CHECK(s.frames[0] == 1);
  CHECK_THROWS(slice_steps(x, 4, 2));
}

// ---- synthesis -----------------------------------------------------------------------------

TEST_CASE("static object emits nothing") {
  SceneSpec spec;
  spec.width = spec.height = 32;
  spec.objects.push_back({10, 10, 5, 5});
  CHECK(synth_scene(spec, 1).events.empty());
}

TEST_CASE("1-px dot moving right 1 px per bin") {
  SceneSpec spec;
  spec.width = spec.height = 32;
  spec.bins = 10;
  spec.bin_duration = 1000;
  MovingObject dot;
  dot.x = 5;
  dot.y = 7;
  dot.vx = 1.0;
  spec.objects.push_back(dot);
  const auto s = synth_scene(spec, 2);
  const auto x = bin_events(s, 0, spec.bin_duration, spec.bins);
  for (int t = 0; t < spec.bins; ++t) {
    std::int64_t on = 0, off = 0;
    for (int u = 0; u < 32; ++u)
      for (int v = 0; v < 32; ++v) {
        on += at(x, t, kOnChannel, v, u);
        off += at(x, t, kOffChannel, v, u);
      }
    CHECK(on == 1);
    CHECK(off == 1);
  }
  CHECK(s.events.size() == 2u * spec.bins);
}

TEST_CASE("disjoint objects compose") {
  SceneSpec a, b, both;
  for (auto* s : {&a, &b, &both}) {
    s->width = s->height = 64;
    s->bins = 6;
  }
  MovingObject o1{4, 4, 6, 3, 1.5, 0.5};
  MovingObject o2{40, 40, 3, 8, -1.0, 1.25};
  a.objects = {o1};
  b.objects = {o2};
  both.objects = {o1, o2};
  // Timestamp jitter stays inside each substep, so binned maps compose exactly.
  const auto sa = bin_events(synth_scene(a, 5), 0, a.bin_duration, a.bins);
  const auto sb = bin_events(synth_scene(b, 5), 0, b.bin_duration, b.bins);
  const auto s12 = bin_events(synth_scene(both, 5), 0, both.bin_duration, both.bins);
  for (std::size_t i = 0; i < s12.frames.size(); ++i) CHECK(s12.frames[i] == (sa.frames[i] | sb.frames[i]));
  const auto ea = synth_scene(a, 5).events.size(), eb = synth_scene(b, 5).events.size();
  CHECK(synth_scene(both, 5).events.size() == ea + eb);
}

TEST_CASE("synthesis is deterministic and sorted") {
  SeededRng r1(7), r2(7);
  const auto spec1 = random_bar_scene(128, 128, 20, r1);
  const auto spec2 = random_bar_scene(128, 128, 20, r2);
  const auto s1 = synth_scene(spec1, 9), s2 = synth_scene(spec2, 9);
  CHECK(s1 == s2);
  CHECK(std::is_sorted(s1.events.begin(), s1.events.end()));
  CHECK_NOTHROW(s1.validate());
}

// ---- files ------------------------------------------------------------------------------------

TEST_CASE("EVT1 round trip and corruption") {
  const auto dir = temp_dir("evt");
  SeededRng rng(4);
  const auto s = synth_scene(random_bar_scene(64, 48, 8, rng), 3);
  REQUIRE(!s.events.empty());
  write_evt(dir / "a.evt", s);
  CHECK(read_evt(dir / "a.evt") == s);

  auto bytes = slurp(dir / "a.evt");
  CHECK(bytes.size() == 16 + 16 * s.events.size());
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "EVT1");
  auto bad = bytes;
  bad[0] = 'X';
  dump(dir / "bad.evt", bad);
  CHECK_THROWS_AS(read_evt(dir / "bad.evt"), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 5);
  dump(dir / "cut.evt", cut);
  CHECK_THROWS_AS(read_evt(dir / "cut.evt"), FormatError);
  CHECK_THROWS_AS(read_evt(dir / "missing.evt"), IoError);
}

TEST_CASE("OCM1 round trip and corruption") {
  const auto dir = temp_dir("ocm");
  SeededRng rng(5);
  auto x = random_occupancy(3, 6, 5, 0.3, rng);
  x.t0 = 123456789;
  x.bin_duration = 777;
  write_ocm(dir / "a.ocm", x);
  CHECK(read_ocm(dir / "a.ocm") == x);

  const auto bytes = slurp(dir / "a.ocm");
  CHECK(bytes.size() == 4 + 16 + 16 + 1 + x.frames.size());
  auto bad = bytes;
  bad[3] = '2';
  dump(dir / "bad.ocm", bad);
  CHECK_THROWS_AS(read_ocm(dir / "bad.ocm"), FormatError);
  auto cut = bytes;
  cut.pop_back();
  dump(dir / "cut.ocm", cut);
  CHECK_THROWS_AS(read_ocm(dir / "cut.ocm"), FormatError);
  auto nonbinary = bytes;
  nonbinary.back() = 2;
  dump(dir / "nb.ocm", nonbinary);
  CHECK_THROWS_AS(read_ocm(dir / "nb.ocm"), FormatError);
}

TEST_CASE("probability sidecar round trip") {
  const auto dir = temp_dir("prob");
  SeededRng rng(6);
  ProbabilityMaps p{Tensor<float>(Shape{2, 2, 3, 4}), 50, 10};
  for (auto& v : p.probs.data()) v = static_cast<float>(rng.uniform());
  write_probability_ocm(dir / "p.ocm", p);
  const auto q = read_probability_ocm(dir / "p.ocm");
  CHECK(q.probs == p.probs);
  CHECK(q.t0 == 50);
  CHECK(q.bin_duration == 10);
  // The binary reader refuses a probability payload and vice versa.
  CHECK_THROWS_AS(read_ocm(dir / "p.ocm"), FormatError);
  write_ocm(dir / "b.ocm", random_occupancy(1, 2, 2, 0.5, rng));
  CHECK_THROWS_AS(read_probability_ocm(dir / "b.ocm"), FormatError);
}
