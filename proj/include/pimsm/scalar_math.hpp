#pragma once

// Double overloads mirroring the differentiable primitives in engine/ops.hpp,
// so the same templated formula can run on plain doubles or on tape nodes.

#include <algorithm>
#include <cmath>

namespace pimsm {

/// (e^x - 1)/x, equal to 1 at x = 0.
inline double expm1_over_x(double x) {
  if (std::abs(x) < 1e-4) return 1.0 + x * (0.5 + x * (1.0 / 6.0 + x / 24.0));
  return std::expm1(x) / x;
}

inline double clamp(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

/// Plain value of a double or a tape node.
inline double value_of(double x) { return x; }

}  // namespace pimsm
