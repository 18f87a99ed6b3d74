#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "etide/gradcheck.hpp"
#include "etide/model.hpp"

namespace etide {

inline constexpr double kGradTolerance = 1e-5;

struct GradCheckCase {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckResult result;
  bool passed() const { return result.max_rel_error < kGradTolerance; }
};

/// Every differentiable op on small random double inputs, `seeds` seeds each.
std::vector<GradCheckCase> run_op_gradchecks(int seeds = 5);

/// T_in = T_out = 3, C_s = 2, one block, 8x8, drop-path off.
ModelConfig tiny_model_config();

/// total_loss through the whole tiny model.
GradCheckCase run_model_gradcheck(std::uint64_t seed = 0);

}  // namespace etide
