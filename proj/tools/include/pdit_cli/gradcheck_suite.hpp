#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pdit/tensor.hpp"

namespace pdit::cli {

struct GradCase {
  std::string name;
  TapeProgram program;
  std::vector<Tensor> params;
};

/// One finite-difference case per differentiable op and loss, plus the full
/// transformer (hidden 8, one P/D pair) and the baseline. `include_deep` adds
/// the two-pair stacked model; run_gradcheck checks it on the first seed only. Op inputs are drawn away from kinks (relu, clamp, minimum).
/// detach is absent: a finite difference moves the detached copy too.
std::vector<GradCase> gradcheck_cases(std::uint64_t seed, bool include_deep = true);

struct GradCaseResult {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckReport report;
  bool passed = false;
};

inline constexpr double kGradTolerance = 1e-3;
/// A case also fails when more than this share of its coordinates had to be
/// excluded for crossing a kink.
inline constexpr double kMaxKinkFraction = 0.02;

std::vector<GradCaseResult> run_gradcheck(const std::vector<std::uint64_t>& seeds, double tolerance = kGradTolerance);

}  // namespace pdit::cli
