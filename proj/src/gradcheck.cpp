#include "etide/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

namespace etide {
namespace {

// Ridders' extrapolation of central differences: shrink the step geometrically
// and keep the tableau entry with the smallest estimated error.
template <class F>
double ridders_derivative(F&& at, double h) {
  constexpr int kTable = 12;
  constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
  std::array<std::array<double, kTable>, kTable> a{};
  a[0][0] = (at(h) - at(-h)) / (2.0 * h);
  double best = a[0][0];
  double err = std::numeric_limits<double>::max();
  for (int i = 1; i < kTable; ++i) {
    h /= kShrink;
    a[0][i] = (at(h) - at(-h)) / (2.0 * h);
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

}  // namespace

GradCheckResult grad_check(const ScalarFn& f, std::span<Parameter<double>* const> params, double eps, double floor) {
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g(true);
    auto out = f(g);
    g.backward(out);
  }

  auto evaluate = [&f] {
    Graph<double> g(false);
    return f(g).value().item();
  };

  GradCheckResult r;
  for (auto* p : params) {
    auto values = p->value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      const double numeric = ridders_derivative(
          [&](double offset) {
            values[i] = saved + offset;
            return evaluate();
          },
          eps);
      values[i] = saved;
      const double analytic = p->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      const double rel = std::abs(analytic - numeric) / denom;
      ++r.checked;
      if (rel > r.max_rel_error || r.worst_param.empty()) {
        r.max_rel_error = rel;
        r.worst_param = p->name;
        r.worst_index = i;
        r.analytic = analytic;
        r.numeric = numeric;
      }
    }
  }
  return r;
}

}  // namespace etide
