#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "quack/autodiff.hpp"

namespace quack {

inline constexpr double kGradCheckTolerance = 1e-4;

struct GradCheckCase {
  std::string name;
  std::size_t elements = 0;  // checked input elements
  GradCheckReport report;

  bool ok(double tolerance = kGradCheckTolerance) const { return report.max_rel_error <= tolerance; }
};

// Central-difference checks of every differentiable op, both attention
// variants (with and without QK norm) and the 2-layer toy model end to end.
std::vector<GradCheckCase> run_gradcheck_battery(std::uint64_t seed = 1);

}  // namespace quack
