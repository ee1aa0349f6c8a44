#pragma once

#include "pimsm/engine/tape.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

namespace pimsm::engine {

/// Builds a scalar objective on `tape` from leaves bound to the probed tensors.
using Objective = std::function<Var(Tape& tape, const std::vector<Var>& leaves)>;

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::size_t samples = 50;  // coordinates probed; all of them if fewer exist
  std::uint64_t seed = 0;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-6;
};

struct GradProbe {
  std::size_t tensor = 0;
  Index row = 0;
  Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  double mean_rel_error = 0.0;
  std::vector<GradProbe> probes;
  bool passed = false;
};

/// Central-difference check of reverse-mode gradients at the current values
/// of `params`. Tensors are perturbed in place and restored.
GradCheckReport grad_check(const Objective& f, const std::vector<Matrix*>& params,
                           const GradCheckOptions& opts = {});

}  // namespace pimsm::engine
