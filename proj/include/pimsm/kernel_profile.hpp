#pragma once

#include <vector>

namespace pimsm {

/// Temporal kernel sampled on a uniform lag grid g[l] = g(l * dt).
struct KernelProfile {
  std::vector<double> values;
  double dt = 1.0;

  [[nodiscard]] std::size_t size() const { return values.size(); }
  /// Riemann-sum L1 mass, sum |g| * dt.
  [[nodiscard]] double l1_mass() const;
  /// Throws ParameterError on non-finite values or dt <= 0.
  void validate() const;
};

}  // namespace pimsm
