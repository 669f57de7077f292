#pragma once

#include <string>
#include <vector>

namespace attnkit {

inline constexpr double kGradCheckTol = 1e-6;
inline constexpr double kGradCheckStep = 1e-5;

struct GradCheckReport {
  std::string suite;
  int instances = 0;
  double max_rel_err = 0.0;
};

/// Finite-difference suites over the analytic gradients. module selects one
/// of: all, attention, layernorm, ffn, model ("all" additionally runs the
/// softmax and cross-entropy suites).
std::vector<GradCheckReport> run_gradcheck(const std::string& module);

}  // namespace attnkit
