#include <doctest.h>

#include <cmath>
#include <vector>

#include "etide/metrics.hpp"
#include "etide/rng.hpp"

using namespace etide;

namespace {

// Exhaustive search over the 255 boundaries k/256, variance from per-pixel
// class statistics at bin centres; strict > keeps the lowest maximizer.
double otsu_oracle(const std::vector<float>& px) {
  long double best = 0;
  int best_k = 0;
  for (int k = 1; k < 256; ++k) {
    long double n0 = 0, n1 = 0, s0 = 0, s1 = 0;
    for (float v : px) {
      const int bin = std::min(255, static_cast<int>(std::floor(static_cast<double>(v) * 256)));
      const long double centre = (bin + 0.5L) / 256;
      if (bin < k) n0 += 1, s0 += centre;
      else n1 += 1, s1 += centre;
    }
    if (n0 == 0 || n1 == 0) continue;
    const long double n = n0 + n1;
    const long double d = s0 / n0 - s1 / n1;
    const long double var = (n0 / n) * (n1 / n) * d * d;
    if (var > best * (1 + 1e-15L)) {
      best = var;
      best_k = k;
    }
  }
  return best_k == 0 ? 0.5 : best_k / 256.0;
}

std::vector<float> random_image(SeededRng& rng, int kind, std::size_t n) {
  std::vector<float> px(n);
  for (auto& v : px) {
    switch (kind) {
      case 0: v = static_cast<float>(rng.uniform(0, 1)); break;
      case 1: v = static_cast<float>(rng.bernoulli(0.4) ? rng.uniform(0.6, 0.95) : rng.uniform(0.02, 0.3)); break;
      case 2: v = static_cast<float>(rng.bernoulli(0.02) ? rng.uniform(0.3, 0.5) : rng.uniform(0.04, 0.05)); break;
      default: v = static_cast<float>(std::pow(rng.uniform(0, 1), 4.0)); break;
    }
  }
  return px;
}

Tensor<std::uint8_t> mask(Shape s, std::initializer_list<std::size_t> ones) {
  Tensor<std::uint8_t> t(std::move(s));
  for (auto i : ones) t[i] = 1;
  return t;
}

}  // namespace

TEST_CASE("otsu matches the exhaustive oracle on 100 random images") {
  SeededRng rng(31);
  for (int i = 0; i < 100; ++i) {
    const auto px = random_image(rng, i % 4, 32 * 32);
    CAPTURE(i);
    CHECK(otsu_threshold(px) == otsu_oracle(px));
  }
}

TEST_CASE("otsu examples") {
  std::vector<float> half(64);
  for (std::size_t i = 0; i < half.size(); ++i) half[i] = i % 2 ? 0.9f : 0.1f;
  const double t = otsu_threshold(half);
  CHECK(t > 0.1);
  CHECK(t < 0.9);
  // Every boundary between the two occupied bins is optimal; the lowest wins.
  CHECK(t == std::floor(0.1 * 256 + 1) / 256);
  CHECK(otsu_threshold(std::vector<float>(50, 0.37f)) == 0.5);
  CHECK(otsu_threshold(std::vector<float>{}) == 0.5);
  // Values at the upper edge land in the last bin.
  CHECK(otsu_threshold(std::vector<float>{0.f, 1.f}) == 1.0 / 256);
}

TEST_CASE("binarize") {
  CHECK(binarize(Tensor<float>(Shape{2, 2, 4, 4})) == Tensor<std::uint8_t>(Shape{2, 2, 4, 4}));

  SeededRng rng(32);
  Tensor<std::uint8_t> pattern(Shape{3, 2, 8, 8});
  Tensor<float> probs(pattern.shape());
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    pattern[i] = rng.bernoulli(0.3) ? 1 : 0;
    probs[i] = pattern[i] ? 0.99f : 0.01f;
  }
  CHECK(binarize(probs) == pattern);

  // Thresholds are per frame and channel: scaling one channel does not move the other.
  for (std::size_t i = 64; i < 128; ++i) probs[i] *= 0.5f;
  CHECK(binarize(probs) == pattern);

  // Each output frame is an upper set of its input values.
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> p(Shape{1, 2, 6, 6});
    for (auto& v : p.data()) v = static_cast<float>(std::pow(rng.uniform(0, 1), 3.0));
    const auto b = binarize(p);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 36; ++i)
        for (std::size_t j = 0; j < 36; ++j)
          if (b[c * 36 + i] && p[c * 36 + j] >= p[c * 36 + i]) CHECK(b[c * 36 + j] == 1);
  }
  CHECK_THROWS_AS(binarize(Tensor<float>(Shape{1, 3, 2, 2})), ShapeError);
  CHECK(binarize_fixed(probs, 0.5)[0] == (probs[0] >= 0.5f ? 1 : 0));
}

TEST_CASE("IoU hand cases") {
  const Shape s{1, 2, 4, 4};
  SUBCASE("identity") {
    const auto m = mask(s, {0, 5, 17, 30});
    MetricAccumulator acc;
    acc.update(m, m);
    const auto r = acc.finalize();
    CHECK(r.miou == 1.0);
    CHECK(r.aiou == 1.0);
  }
  SUBCASE("cover") {
    Tensor<std::uint8_t> pred(s);
    for (std::size_t i = 0; i < 16; ++i) pred[i] = 1;
    const auto gt = mask(s, {1, 2, 3, 4});
    MetricAccumulator acc;
    acc.update(pred, gt);
    const auto r = acc.finalize();
    CHECK(r.iou_on == 0.25);
    CHECK(r.iou_off == 1.0);  // both empty
    CHECK(r.aiou == 0.25);
  }
  SUBCASE("disjoint") {
    MetricAccumulator acc;
    acc.update(mask(s, {0, 16}), mask(s, {1, 17}));
    const auto r = acc.finalize();
    CHECK(r.iou_on == 0.0);
    CHECK(r.iou_off == 0.0);
    CHECK(r.miou == 0.0);
    CHECK(r.aiou == 0.0);
  }
  SUBCASE("aiou ors polarities") {
    // ON predicted where OFF happened: polarity-wise wrong, agnostic right.
    MetricAccumulator acc;
    acc.update(mask(s, {3}), mask(s, {16 + 3}));
    const auto r = acc.finalize();
    CHECK(r.miou == 0.0);
    CHECK(r.aiou == 1.0);
  }
}

TEST_CASE("overlap counts accumulate globally") {
  // Frame 0: one matching pixel. Frame 1: four predicted, none true.
  const Shape s{2, 2, 2, 2};
  const auto pred = mask(s, {0, 8, 9, 10, 11});
  const auto gt = mask(s, {0});
  MetricAccumulator acc;
  acc.update(pred, gt);
  CHECK(acc.on().intersection == 1);
  CHECK(acc.on().union_ == 5);
  CHECK(acc.finalize().iou_on == 0.2);  // per-frame averaging would give 0.5
  CHECK(acc.finalize().frames == 2);
}

TEST_CASE("merge equals single-pass accumulation") {
  SeededRng rng(33);
  auto random_mask = [&] {
    Tensor<std::uint8_t> m(Shape{2, 2, 5, 5});
    for (auto& v : m.data()) v = rng.bernoulli(0.3) ? 1 : 0;
    return m;
  };
  MetricAccumulator all, a, b;
  for (int i = 0; i < 6; ++i) {
    const auto p = random_mask(), g = random_mask();
    Tensor<float> probs(p.shape());
    for (auto& v : probs.data()) v = static_cast<float>(rng.uniform(0, 1));
    all.update(p, g);
    all.update_fidelity(probs, g);
    auto& half = i % 2 ? a : b;
    half.update(p, g);
    half.update_fidelity(probs, g);
  }
  a.merge(b);
  const auto x = all.finalize(), y = a.finalize();
  CHECK(x.aiou == y.aiou);
  CHECK(x.miou == y.miou);
  CHECK(x.mse == doctest::Approx(y.mse).epsilon(1e-12));
  CHECK(x.ssim == doctest::Approx(y.ssim).epsilon(1e-12));
  CHECK(a.agnostic().intersection <= a.agnostic().union_);
}

TEST_CASE("mse and ssim") {
  SeededRng rng(34);
  std::vector<float> x(16 * 16);
  for (auto& v : x) v = static_cast<float>(rng.uniform(0, 1));
  CHECK(mse(x, x) == 0.0);
  CHECK(mse(std::vector<float>(9, 1.f), std::vector<float>(9, 0.f)) == 1.0);
  CHECK(mse(std::vector<float>{0.5f, 0.f}, std::vector<float>{0.f, 0.f}) == 0.125);
  CHECK_THROWS_AS(mse(std::vector<float>(3), std::vector<float>(4)), ShapeError);

  CHECK(std::abs(ssim(x, x, 16, 16) - 1.0) < 1e-6);
  CHECK(std::abs(ssim(x, x, 4, 64) - 1.0) < 1e-6);  // window shrinks to 3
  std::vector<float> y = x;
  for (auto& v : y) v = std::min(1.f, v + static_cast<float>(rng.uniform(0, 0.3)));
  const double s = ssim(x, y, 16, 16);
  CHECK(s < 1.0);
  CHECK(s > 0.0);
  CHECK(ssim(x, y, 16, 16) == ssim(x, y, 16, 16));
  CHECK(ssim(std::vector<float>(121, 0.f), std::vector<float>(121, 0.f), 11, 11) == doctest::Approx(1.0));
  CHECK_THROWS_AS(ssim(x, x, 15, 16), ShapeError);
}

TEST_CASE("report formatting") {
  MetricReport r;
  r.miou = 0.5;
  r.aiou = 0.25;
  const auto line = r.record("persistence_");
  CHECK(line.find("persistence_miou=0.500000") != std::string::npos);
  CHECK(line.find("persistence_aiou=0.250000") != std::string::npos);
  CHECK(line.find('\n') == std::string::npos);
  CHECK(r.table("model").find("aIoU    0.2500") != std::string::npos);
}
