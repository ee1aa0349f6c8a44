#pragma once

#include "pimsm/types.hpp"

#include <cmath>
#include <random>

namespace pimsm {

/// fan_in x fan_out matrix with entries uniform on +-gain*sqrt(6/(fan_in+fan_out)).
inline Matrix glorot(Index fan_in, Index fan_out, std::mt19937_64& rng, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Matrix m(fan_in, fan_out);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

}  // namespace pimsm
