#pragma once

#include <complex>
#include <span>
#include <vector>

namespace pimsm::fft {

/// Real-to-complex DFT: n/2+1 bins, unnormalised.
std::vector<std::complex<double>> rfft(std::span<const double> x);

/// Inverse of rfft for a length-n signal, normalised by 1/n.
std::vector<double> irfft(std::span<const std::complex<double>> bins, std::size_t n);

}  // namespace pimsm::fft
