#include <doctest.h>

#include <cmath>
#include <vector>

#include "etide/losses.hpp"
#include "etide/rng.hpp"

using namespace etide;

namespace {

Tensor<double> random_logits(Shape s, SeededRng& rng, double scale = 2.0) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

Tensor<double> random_targets(Shape s, SeededRng& rng, double density = 0.3) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.data()) v = rng.bernoulli(density) ? 1.0 : 0.0;
  return t;
}

double scalar_of(const Var<double>& v) { return v.value()[0]; }

// Naive focal over logits[B,T,2,H,W] straight from the textbook formula.
double focal_oracle(const Tensor<double>& logits, const Tensor<double>& y, double a, double g, double w_on,
                    double w_off) {
  const auto& s = logits.shape();
  const std::int64_t plane = s[3] * s[4];
  double total = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    const double l = y[i] == 1.0 ? -a * std::pow(1 - p, g) * std::log(p + 1e-8)
                                 : -(1 - a) * std::pow(p, g) * std::log(1 - p + 1e-8);
    const bool on = (static_cast<std::int64_t>(i) / plane) % 2 == 0;
    total += (on ? w_on : w_off) * l;
  }
  return total / static_cast<double>(s[0] * s[1] * plane);
}

// KL(softmax(dp) || softmax(dq)) for one pair of difference vectors.
double kl_of_diffs(const std::vector<double>& dp, const std::vector<double>& dq, double tau) {
  auto softmax = [tau](const std::vector<double>& d) {
    std::vector<double> e(d.size());
    double z = 0;
    for (std::size_t i = 0; i < d.size(); ++i) z += e[i] = std::exp(d[i] / tau);
    for (auto& v : e) v /= z;
    return e;
  };
  const auto p = softmax(dp), q = softmax(dq);
  double kl = 0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

double ddr_oracle(const Tensor<double>& probs, const Tensor<double>& y, double tau) {
  const auto& s = probs.shape();
  const std::int64_t frame = s[2] * s[3] * s[4];
  double total = 0;
  for (std::int64_t b = 0; b < s[0]; ++b)
    for (std::int64_t t = 0; t + 1 < s[1]; ++t) {
      std::vector<double> dp(static_cast<std::size_t>(frame)), dq(dp.size());
      for (std::int64_t i = 0; i < frame; ++i) {
        const auto at = [&](std::int64_t tt) { return static_cast<std::size_t>((b * s[1] + tt) * frame + i); };
        dp[static_cast<std::size_t>(i)] = probs[at(t + 1)] - probs[at(t)];
        dq[static_cast<std::size_t>(i)] = y[at(t + 1)] - y[at(t)];
      }
      total += kl_of_diffs(dp, dq, tau);
    }
  return total / static_cast<double>(s[0] * (s[1] - 1));
}

}  // namespace

TEST_CASE("focal_elem hand values") {
  CHECK(focal_elem(0.5, 1, 0.75, 2.0) == doctest::Approx(0.12997).epsilon(1e-4));
  CHECK(focal_elem(0.5, 0, 0.75, 2.0) == doctest::Approx(0.04332).epsilon(1e-4));
  CHECK(std::abs(focal_elem(0.5, 1, 0.75, 2.0) - 0.75 * 0.25 * std::log(2.0)) < 1e-4);
  CHECK(focal_elem(1.0 - 1e-12, 1, 0.75, 2.0) < 1e-20);
  // Logit path agrees with the probability path.
  for (double s : {-6.0, -1.0, -0.1, 0.0, 0.3, 2.0, 7.0})
    for (int y : {0, 1}) {
      const double p = 1.0 / (1.0 + std::exp(-s));
      CHECK(focal_from_logit(s, y, 0.75, 2.0) == doctest::Approx(focal_elem(p, y, 0.75, 2.0)).epsilon(1e-9));
    }
  // Finite and non-negative far into saturation.
  for (double s : {-500.0, 500.0})
    for (int y : {0, 1}) {
      const double l = focal_from_logit(s, y, 0.75, 2.0);
      CHECK(std::isfinite(l));
      CHECK(l >= 0.0);
    }
}

TEST_CASE("polarity_focal closed form and textbook oracle") {
  Graph<double> g(false);
  const Tensor<double> zeros(Shape{2, 3, 2, 4, 4});
  CHECK(scalar_of(polarity_focal(g.constant(zeros), zeros, LossConfig{})) ==
        doctest::Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-6));

  SeededRng rng(21);
  const auto logits = random_logits({3, 4, 2, 5, 3}, rng);
  const auto y = random_targets(logits.shape(), rng);
  LossConfig cfg;
  CHECK(scalar_of(polarity_focal(g.constant(logits), y, cfg)) ==
        doctest::Approx(focal_oracle(logits, y, 0.75, 2.0, 0.65, 0.35)).epsilon(1e-12));
  cfg.polarity_weighting = false;
  CHECK(scalar_of(polarity_focal(g.constant(logits), y, cfg)) ==
        doctest::Approx(focal_oracle(logits, y, 0.75, 2.0, 0.5, 0.5)).epsilon(1e-12));
  cfg = LossConfig{};
  cfg.lambda_on = 1.3;  // normalized with lambda_off
  cfg.lambda_off = 0.7;
  CHECK(scalar_of(polarity_focal(g.constant(logits), y, cfg)) ==
        doctest::Approx(focal_oracle(logits, y, 0.75, 2.0, 0.65, 0.35)).epsilon(1e-12));
}

TEST_CASE("polarity_focal batch mean") {
  SeededRng rng(22);
  const auto logits = random_logits({1, 2, 2, 3, 3}, rng);
  const auto y = random_targets(logits.shape(), rng);
  Tensor<double> l2(Shape{2, 2, 2, 3, 3}), y2(l2.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    l2[i] = l2[i + logits.size()] = logits[i];
    y2[i] = y2[i + logits.size()] = y[i];
  }
  Graph<double> g(false);
  CHECK(scalar_of(polarity_focal(g.constant(l2), y2, LossConfig{})) ==
        doctest::Approx(scalar_of(polarity_focal(g.constant(logits), y, LossConfig{}))).epsilon(1e-12));
}

TEST_CASE("saturated correct logits give near-zero loss") {
  SeededRng rng(23);
  const auto y = random_targets({1, 3, 2, 4, 4}, rng);
  Tensor<double> logits(y.shape());
  for (std::size_t i = 0; i < y.size(); ++i) logits[i] = y[i] == 1.0 ? 40.0 : -40.0;
  Graph<double> g(false);
  CHECK(scalar_of(polarity_focal(g.constant(logits), y, LossConfig{})) < 1e-12);
  // Probabilities equal targets exactly up to rounding, so DDR vanishes too.
  CHECK(scalar_of(total_loss(g.constant(logits), y, LossConfig{})) < 1e-9);
}

TEST_CASE("swapping polarity weights equals swapping channels") {
  SeededRng rng(24);
  const auto logits = random_logits({2, 3, 2, 4, 4}, rng);
  const auto y = random_targets(logits.shape(), rng);
  auto swap_channels = [](const Tensor<double>& t) {
    Tensor<double> out(t.shape());
    const std::size_t plane = 16;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const std::size_t c = (i / plane) % 2;
      out[i + (c == 0 ? plane : 0) - (c == 1 ? plane : 0)] = t[i];
    }
    return out;
  };
  LossConfig swapped;
  std::swap(swapped.lambda_on, swapped.lambda_off);
  Graph<double> g(false);
  CHECK(scalar_of(polarity_focal(g.constant(logits), y, swapped)) ==
        doctest::Approx(scalar_of(polarity_focal(g.constant(swap_channels(logits)), swap_channels(y), LossConfig{})))
            .epsilon(1e-12));
}

TEST_CASE("focal rejects non-binary targets and bad shapes") {
  Graph<double> g(false);
  Tensor<double> logits(Shape{1, 2, 2, 2, 2});
  auto y = logits;
  y[5] = 0.5;
  CHECK_THROWS_AS(polarity_focal(g.constant(logits), y, LossConfig{}), std::invalid_argument);
  CHECK_THROWS_AS(polarity_focal(g.constant(Tensor<double>(Shape{1, 2, 3, 2, 2})), Tensor<double>(Shape{1, 2, 3, 2, 2}),
                                 LossConfig{}),
                  ShapeError);
  CHECK_THROWS_AS(polarity_focal(g.constant(logits), Tensor<double>(Shape{1, 2, 2, 2, 3}), LossConfig{}), ShapeError);
}

TEST_CASE("focal gradient sign follows the label") {
  SeededRng rng(25);
  const auto logits = random_logits({1, 2, 2, 3, 3}, rng, 6.0);
  const auto y = random_targets(logits.shape(), rng, 0.5);
  Graph<double> g;
  Parameter<double> p("logits", logits);
  g.backward(polarity_focal(g.parameter(p), y, LossConfig{}));
  const auto& d = p.grad;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (y[i] == 1.0) CHECK(d[i] < 0.0);
    else CHECK(d[i] > 0.0);
  }
}

TEST_CASE("ddr_loss vanishes on identical and time-constant inputs") {
  SeededRng rng(26);
  Tensor<double> p(Shape{2, 4, 2, 3, 3});
  for (auto& v : p.data()) v = rng.uniform(0, 1);
  Graph<double> g(false);
  CHECK(std::abs(scalar_of(ddr_loss(g.constant(p), p, 1.0))) < 1e-12);

  // Constant in time on both sides, different constants.
  Tensor<double> a(p.shape()), b(p.shape());
  const std::size_t frame = 18;
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = 0.1 + 0.05 * static_cast<double>(i % frame);
    b[i] = (i % 3 == 0) ? 1.0 : 0.0;
  }
  CHECK(std::abs(scalar_of(ddr_loss(g.constant(a), b, 1.0))) < 1e-12);
  CHECK_THROWS_AS(ddr_loss(g.constant(Tensor<double>(Shape{1, 1, 2, 2, 2})), Tensor<double>(Shape{1, 1, 2, 2, 2}), 1.0),
                  std::invalid_argument);
}

TEST_CASE("ddr_loss matches the scalar oracle") {
  // T=2, 1x1, two channels: frames (0.2, 0.7) -> (0.6, 0.1) against (0, 1) -> (1, 0).
  Tensor<double> p(Shape{1, 2, 2, 1, 1}), y(p.shape());
  p[0] = 0.2, p[1] = 0.7, p[2] = 0.6, p[3] = 0.1;
  y[0] = 0.0, y[1] = 1.0, y[2] = 1.0, y[3] = 0.0;
  Graph<double> g(false);
  for (double tau : {1.0, 0.5, 3.0}) {
    const double hand = kl_of_diffs({0.4, -0.6}, {1.0, -1.0}, tau);
    CHECK(std::abs(scalar_of(ddr_loss(g.constant(p), y, tau)) - hand) < 1e-6);
  }
  SeededRng rng(27);
  Tensor<double> pr(Shape{2, 4, 2, 3, 2});
  for (auto& v : pr.data()) v = rng.uniform(0, 1);
  const auto yr = random_targets(pr.shape(), rng);
  CHECK(scalar_of(ddr_loss(g.constant(pr), yr, 1.0)) == doctest::Approx(ddr_oracle(pr, yr, 1.0)).epsilon(1e-6));
}

TEST_CASE("ddr_loss ignores a spatially constant per-frame offset") {
  SeededRng rng(28);
  Tensor<double> p(Shape{1, 3, 2, 3, 3});
  for (auto& v : p.data()) v = rng.uniform(0, 1);
  const auto y = random_targets(p.shape(), rng);
  auto shifted = p;
  for (std::size_t i = 0; i < p.size(); ++i) shifted[i] += 0.1 * static_cast<double>(i / 18);
  Graph<double> g(false);
  CHECK(scalar_of(ddr_loss(g.constant(shifted), y, 1.0)) ==
        doctest::Approx(scalar_of(ddr_loss(g.constant(p), y, 1.0))).epsilon(1e-9));
}

TEST_CASE("total_loss composition") {
  SeededRng rng(29);
  const auto logits = random_logits({2, 3, 2, 4, 4}, rng);
  const auto y = random_targets(logits.shape(), rng);
  Graph<double> g(false);
  LossConfig off;
  off.alpha_ddr = 0.0;
  CHECK(scalar_of(total_loss(g.constant(logits), y, off)) == scalar_of(polarity_focal(g.constant(logits), y, off)));

  Tensor<float> lf(logits.shape()), yf(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) lf[i] = static_cast<float>(logits[i]), yf[i] = static_cast<float>(y[i]);
  Graph<float> gf(false);
  CHECK(total_loss(gf.constant(lf), yf, off).value()[0] == polarity_focal(gf.constant(lf), yf, off).value()[0]);

  LossConfig cfg;
  Tensor<double> probs(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) probs[i] = 1.0 / (1.0 + std::exp(-logits[i]));
  const double expected = focal_oracle(logits, y, 0.75, 2.0, 0.65, 0.35) + 0.1 * ddr_oracle(probs, y, 1.0);
  CHECK(scalar_of(total_loss(g.constant(logits), y, cfg)) == doctest::Approx(expected).epsilon(1e-7));
  const auto terms = loss_terms(g.constant(logits), y, cfg);
  REQUIRE(terms.ddr.has_value());
  CHECK(scalar_of(terms.total) == doctest::Approx(scalar_of(terms.focal) + 0.1 * scalar_of(*terms.ddr)).epsilon(1e-12));
}

TEST_CASE("loss config parsing and validation") {
  LossConfig c;
  CHECK(c.apply("focal_alpha", "0.5"));
  CHECK(c.apply("polarity_weighting", "false"));
  CHECK_FALSE(c.apply("alpha", "0.5"));
  KeyValues kv;
  c.write(kv);
  LossConfig back;
  for (const auto& [k, v] : kv.items()) CHECK(back.apply(k, v));
  CHECK(back == c);
  c.tau = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = LossConfig{};
  c.alpha = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}
