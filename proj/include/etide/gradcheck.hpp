#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "etide/graph.hpp"

namespace etide {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Builds a scalar from the given parameters on a fresh graph.
using ScalarFn = std::function<Var<double>(Graph<double>&)>;

/// Compares reverse-mode gradients of `f` against Ridders-extrapolated central
/// differences (initial step `eps`) for every element of every parameter.
/// Relative error per element is |a - n| / max(|a|, |n|, floor); the floor
/// keeps roundoff in near-zero gradients from dominating.
GradCheckResult grad_check(const ScalarFn& f, std::span<Parameter<double>* const> params, double eps = 1e-4,
                           double floor = 1e-6);

}  // namespace etide
